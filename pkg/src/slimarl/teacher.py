"""Stage 1: train the high-capacity team policy (MAPPO, centralized critic).

The actor is shared across agents with a one-hot agent id appended to each
observation; the critic reads the joint state. After training, actor and
critic are frozen into a checkpoint bundle that the later stages treat as
read-only.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .checkpoint import BundleEntry, file_sha256, save_bundle
from .errors import DivergenceError
from .gae import compute_gae
from .losses import entropy_grad_logits, ppo_grad_logits
from .nets import Network, NetworkSpec, adam_step, init_params, log_softmax, softmax_temp


@dataclass
class Trajectory:
    """One episode of teacher experience; values carry the bootstrap tail."""

    obs: np.ndarray        # (T, N, obs_dim) full observations
    states: np.ndarray     # (T, state_dim)
    critic_in: np.ndarray  # (T, state_dim+1) state plus time fraction
    actions: np.ndarray    # (T, N)
    logp: np.ndarray       # (T, N) log-probs under the collection policy
    values: np.ndarray     # (T+1,) critic values, last entry is the bootstrap
    rewards: np.ndarray    # (T,)
    dones: np.ndarray      # (T,)
    hiddens: Optional[np.ndarray] = None  # (T, N, H) actor hidden before each step
    win: Optional[bool] = None

    def __len__(self):
        return len(self.rewards)


def critic_input(state: np.ndarray, t: int, horizon: int) -> np.ndarray:
    """Critic sees the joint state plus the elapsed-time fraction.

    The horizon end is treated as done, so value-to-go is time-dependent;
    without a clock the critic would alias early and late visits to the
    same state.
    """
    return np.concatenate([state, [t / horizon]])


def one_hot_ids(n_agents: int) -> np.ndarray:
    return np.eye(n_agents)


def augment_obs(obs: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Append the agent one-hot to each agent's observation row.

    Works for (N, obs_dim) and (T, N, obs_dim); the agent axis is last-but-one.
    """
    tiled = np.broadcast_to(ids, obs.shape[:-1] + (ids.shape[-1],))
    return np.concatenate([obs, tiled], axis=-1)


def sample_actions(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF sample per row of a (N, A) probability matrix."""
    u = rng.random(probs.shape[0])
    return (probs.cumsum(axis=1) > u[:, None]).argmax(axis=1)


def collect_rollouts(env, actor: Network, critic: Network, n_episodes: int,
                     rng: np.random.Generator, greedy: bool = False,
                     env_pool: Optional[list] = None) -> list:
    """Roll full episodes; actions sampled from the actor unless greedy.

    Episodes run in lockstep across a pool of env instances (same class and
    settings as ``env``) so policy forwards are batched; finished envs drop
    out of the batch. Results are identical to sequential collection up to
    the rng consumption order.
    """
    n_agents = env.n_agents
    ids = one_hot_ids(n_agents)
    if env_pool is None:
        env_pool = [env]
    episodes = []
    remaining = n_episodes
    while remaining > 0:
        k = min(len(env_pool), remaining)
        remaining -= k
        envs = env_pool[:k]
        seeds = [int(rng.integers(2 ** 62)) for _ in range(k)]
        outs = [e.reset(seed=s) for e, s in zip(envs, seeds)]
        recurrent = actor.spec.recurrent
        hidden = np.zeros((k * n_agents, actor.spec.hidden_dim)) if recurrent else None
        active = list(range(k))
        rec = [dict(obs=[], state=[], cin=[], act=[], logp=[], val=[], rew=[],
                    done=[], hid=[], win=None) for _ in range(k)]
        t = 0
        while active:
            aug = np.concatenate([augment_obs(outs[i].obs, ids) for i in active])
            logits, _, _, h_next = actor.step(aug, hidden)
            cins = np.stack([critic_input(outs[i].state, t, envs[i].horizon)
                             for i in active])
            _, _, values, _ = critic.step(cins)
            if greedy:
                actions = logits.argmax(axis=1)
            else:
                actions = sample_actions(softmax_temp(logits, 1.0), rng)
            logp = log_softmax(logits)[np.arange(actions.size), actions]
            still = []
            keep_rows = []
            for row, i in enumerate(active):
                sl = slice(row * n_agents, (row + 1) * n_agents)
                r = rec[i]
                r["obs"].append(outs[i].obs)
                r["state"].append(outs[i].state)
                r["cin"].append(cins[row])
                r["act"].append(actions[sl])
                r["logp"].append(logp[sl])
                if recurrent:
                    r["hid"].append(hidden[sl].copy())
                r["val"].append(float(values[row]))
                nxt = envs[i].step(actions[sl])
                r["rew"].append(nxt.reward)
                r["done"].append(float(nxt.done))
                r["win"] = nxt.win
                outs[i] = nxt
                if nxt.done:
                    boot_in = critic_input(nxt.state, t + 1, envs[i].horizon)
                    _, _, boot, _ = critic.step(boot_in)
                    r["val"].append(float(boot))
                else:
                    still.append(i)
                    keep_rows.append(row)
            if hidden is not None:
                hidden = h_next.reshape(len(active), n_agents, -1)[keep_rows] \
                    .reshape(len(keep_rows) * n_agents, -1) if keep_rows else None
            active = still
            t += 1
        for r in rec:
            episodes.append(Trajectory(
                obs=np.array(r["obs"]), states=np.array(r["state"]),
                critic_in=np.array(r["cin"]), actions=np.array(r["act"]),
                logp=np.array(r["logp"]), values=np.array(r["val"]),
                rewards=np.array(r["rew"]), dones=np.array(r["done"]),
                hiddens=np.array(r["hid"]) if recurrent else None,
                win=r["win"]))
    return episodes


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    std = adv.std()
    return (adv - adv.mean()) / max(std, 1e-8)


@dataclass
class MappoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    lr: float = 3e-4
    critic_lr: float = 1e-3
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    epochs: int = 4
    minibatches: int = 2
    target_kl: float = 0.03
    full_bptt: bool = False


def _actor_minibatch_step(actor, cfg, logits_res, acts, old_logp, adv):
    """Shared loss/gradient step given forward results on a minibatch."""
    logits = logits_res.logits
    surrogate, d_surr, _ = ppo_grad_logits(logits, acts, old_logp, adv, cfg.clip_eps)
    ent, d_ent = entropy_grad_logits(logits)
    if not np.isfinite(surrogate):
        raise DivergenceError("non-finite actor surrogate")
    actor.store.zero_grads()
    actor.backward(logits_res.cache, dlogits=-(d_surr + cfg.entropy_coef * d_ent))
    adam_step(actor.store, cfg.lr)
    new_logp = log_softmax(logits)[np.arange(acts.size), acts]
    ratio = np.exp(new_logp - old_logp)
    return {
        "surrogate": surrogate,
        "entropy": ent,
        "clip_frac": float(np.mean(np.abs(ratio - 1.0) > cfg.clip_eps)),
        "approx_kl": float(np.mean(old_logp - new_logp)),
    }


def mappo_update(actor: Network, critic: Network, episodes: list,
                 cfg: MappoConfig, rng: np.random.Generator) -> dict:
    """One PPO update over a batch of episodes.

    Advantages come from the shared team reward and critic, normalized over
    the batch and repeated per agent. Recurrent actors train with truncated
    (single-step) backprop against the hidden states recorded at collection
    time unless ``cfg.full_bptt`` is set, in which case episodes are padded
    to a common length and backprop runs through the whole sequence.
    """
    n_agents = episodes[0].obs.shape[1]
    ids = one_hot_ids(n_agents)

    adv_all, ret_all = [], []
    for ep in episodes:
        out = compute_gae(ep.rewards, ep.values, ep.dones, cfg.gamma, cfg.gae_lambda)
        adv_all.append(out.advantages)
        ret_all.append(out.returns)

    metrics = {"clip_frac": 0.0, "approx_kl": 0.0, "actor_loss": 0.0,
               "critic_loss": 0.0, "entropy": 0.0}
    n_upd = 0

    if actor.spec.recurrent and cfg.full_bptt:
        n_upd = _update_actor_sequences(actor, episodes, adv_all, cfg, rng,
                                        ids, metrics)
    else:
        n_upd = _update_actor_steps(actor, episodes, adv_all, cfg, rng, ids, metrics)

    critic_in = np.concatenate([ep.critic_in for ep in episodes])
    returns = np.concatenate(ret_all)
    for _ in range(cfg.epochs):
        vres = critic.forward(critic_in)
        err = np.asarray(vres.value) - returns
        vloss = float(np.mean(err * err))
        if not np.isfinite(vloss):
            raise DivergenceError("non-finite critic loss")
        critic.store.zero_grads()
        critic.backward(vres.cache, dvalue=cfg.value_coef * 2.0 * err / err.size)
        adam_step(critic.store, cfg.critic_lr)
        metrics["critic_loss"] += vloss

    for key in ("clip_frac", "approx_kl", "actor_loss", "entropy"):
        metrics[key] /= max(n_upd, 1)
    metrics["critic_loss"] /= cfg.epochs
    return metrics


def _update_actor_steps(actor, episodes, adv_all, cfg, rng, ids, metrics):
    """Flat (episode, step, agent) samples; recurrent nets use stored hiddens."""
    n_agents = episodes[0].obs.shape[1]
    aug = np.concatenate([augment_obs(ep.obs, ids).reshape(-1, ids.shape[0] + ep.obs.shape[2])
                          for ep in episodes])
    acts = np.concatenate([ep.actions.reshape(-1) for ep in episodes])
    old_logp = np.concatenate([ep.logp.reshape(-1) for ep in episodes])
    adv = normalize_advantages(np.concatenate(adv_all))
    adv = np.repeat(adv, n_agents)
    h_prev = None
    if actor.spec.recurrent:
        h_prev = np.concatenate([ep.hiddens.reshape(-1, actor.spec.hidden_dim)
                                 for ep in episodes])

    m = aug.shape[0]
    order = np.arange(m)
    n_upd = 0
    stop = False
    for _ in range(cfg.epochs):
        if stop:
            break
        rng.shuffle(order)
        for chunk in np.array_split(order, cfg.minibatches):
            if chunk.size == 0:
                continue
            if h_prev is not None:
                res = actor.forward_step(aug[chunk], h_prev[chunk])
            else:
                res = actor.forward(aug[chunk])
            got = _actor_minibatch_step(actor, cfg, res, acts[chunk],
                                        old_logp[chunk], adv[chunk])
            metrics["actor_loss"] += -got["surrogate"]
            metrics["entropy"] += got["entropy"]
            metrics["clip_frac"] += got["clip_frac"]
            metrics["approx_kl"] += got["approx_kl"]
            n_upd += 1
            if cfg.target_kl and got["approx_kl"] > cfg.target_kl:
                stop = True
                break
    return n_upd


def _update_actor_sequences(actor, episodes, adv_all, cfg, rng, ids, metrics):
    """Padded full-sequence backprop through time over (episode, agent) rows."""
    n_agents = episodes[0].obs.shape[1]
    t_max = max(len(ep) for ep in episodes)
    n_ep = len(episodes)
    obs_dim = episodes[0].obs.shape[2]

    adv_pad = np.zeros((n_ep, t_max))
    valid = np.zeros((n_ep, t_max), dtype=bool)
    aug_pad = np.zeros((n_ep, t_max, n_agents, obs_dim + n_agents))
    act_pad = np.zeros((n_ep, t_max, n_agents), dtype=np.int64)
    logp_pad = np.zeros((n_ep, t_max, n_agents))
    for e, ep in enumerate(episodes):
        t_len = len(ep)
        adv_pad[e, :t_len] = adv_all[e]
        valid[e, :t_len] = True
        aug_pad[e, :t_len] = augment_obs(ep.obs, ids)
        act_pad[e, :t_len] = ep.actions
        logp_pad[e, :t_len] = ep.logp
    adv_pad[valid] = normalize_advantages(adv_pad[valid])

    n_upd = 0
    stop = False
    order = np.arange(n_ep)
    for _ in range(cfg.epochs):
        if stop:
            break
        rng.shuffle(order)
        for chunk in np.array_split(order, cfg.minibatches):
            if chunk.size == 0:
                continue
            b = chunk.size
            seq = aug_pad[chunk].transpose(0, 2, 1, 3).reshape(b * n_agents, t_max, -1)
            res = actor.forward(seq)
            logits = res.logits.reshape(b, n_agents, t_max, -1).transpose(0, 2, 1, 3)
            flat = valid[chunk][:, :, None] & np.ones((1, 1, n_agents), dtype=bool)
            logits_f = logits[flat]
            acts_f = act_pad[chunk][flat]
            old_f = logp_pad[chunk][flat]
            adv_f = np.repeat(adv_pad[chunk][:, :, None], n_agents, axis=2)[flat]

            surrogate, d_surr, _ = ppo_grad_logits(logits_f, acts_f, old_f, adv_f,
                                                   cfg.clip_eps)
            ent, d_ent = entropy_grad_logits(logits_f)
            if not np.isfinite(surrogate):
                raise DivergenceError("non-finite actor surrogate")
            dlogits = np.zeros_like(logits)
            dlogits[flat] = -(d_surr + cfg.entropy_coef * d_ent)
            actor.store.zero_grads()
            actor.backward(res.cache,
                           dlogits=dlogits.transpose(0, 2, 1, 3).reshape(b * n_agents, t_max, -1))
            adam_step(actor.store, cfg.lr)

            new_logp = log_softmax(logits_f)[np.arange(acts_f.size), acts_f]
            kl = float(np.mean(old_f - new_logp))
            metrics["actor_loss"] += -surrogate
            metrics["entropy"] += ent
            metrics["clip_frac"] += float(np.mean(np.abs(np.exp(new_logp - old_f) - 1.0) > cfg.clip_eps))
            metrics["approx_kl"] += kl
            n_upd += 1
            if cfg.target_kl and kl > cfg.target_kl:
                stop = True
                break
    return n_upd


def greedy_eval(env, actor: Network, n_episodes: int, rng: np.random.Generator):
    """Greedy rollouts; returns (mean return, std, win rate or None)."""
    ids = one_hot_ids(env.n_agents)
    totals, wins = [], []
    for _ in range(n_episodes):
        out = env.reset(seed=int(rng.integers(2 ** 62)))
        hidden = None
        total = 0.0
        done = False
        while not done:
            logits, _, _, hidden = actor.step(augment_obs(out.obs, ids), hidden)
            out = env.step(logits.argmax(axis=1))
            total += out.reward
            done = out.done
        totals.append(total)
        if out.win is not None:
            wins.append(float(out.win))
    win_rate = float(np.mean(wins)) if wins else None
    return float(np.mean(totals)), float(np.std(totals)), win_rate


@dataclass
class TeacherArtifacts:
    checkpoint_path: Path
    metrics_path: Path
    checkpoint_hash: str
    final_eval: tuple = field(default=())


def build_teacher_nets(env, hidden_dim: int, recurrent: bool, critic_hidden: int,
                       rng: np.random.Generator, head_scale: float = 0.01):
    """Fresh actor/critic pair for an env.

    The actor's logit head is shrunk by ``head_scale`` so the starting policy
    is near-uniform; exploration then comes from the softmax rather than from
    accidental init preferences.
    """
    actor_spec = NetworkSpec.actor(env.obs_dim + env.n_agents, hidden_dim,
                                   env.n_actions, recurrent=recurrent)
    critic_spec = NetworkSpec.critic(env.state_dim + 1, critic_hidden)
    actor = Network(actor_spec, init_params(actor_spec, rng))
    actor.w["w_out"] *= head_scale
    actor.w["b_out"] *= head_scale
    critic = Network(critic_spec, init_params(critic_spec, rng))
    return actor, critic


def train_teacher(env_factory, teacher_cfg, out_dir, seed: int,
                  config_hash: str = "") -> TeacherArtifacts:
    """Run the Stage-1 loop and freeze the result into a checkpoint.

    ``env_factory`` builds fresh env instances (one per parallel rollout
    slot); ``teacher_cfg`` is the TeacherConfig section of the experiment
    config. Writes ``teacher.ckpt`` and ``teacher_metrics.csv`` under
    ``out_dir``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    root = np.random.SeedSequence([seed, 0x7EAC])
    init_rng, rollout_rng, update_rng, eval_rng = (
        np.random.default_rng(s) for s in root.spawn(4))

    env = env_factory()
    env_pool = [env] + [env_factory() for _ in range(teacher_cfg.episodes_per_iter - 1)]
    actor, critic = build_teacher_nets(
        env, teacher_cfg.hidden_dim, teacher_cfg.recurrent,
        teacher_cfg.critic_hidden, init_rng)
    cfg = MappoConfig(
        gamma=teacher_cfg.gamma, gae_lambda=teacher_cfg.gae_lambda,
        clip_eps=teacher_cfg.clip_eps, lr=teacher_cfg.lr,
        critic_lr=teacher_cfg.critic_lr, entropy_coef=teacher_cfg.entropy_coef,
        value_coef=teacher_cfg.value_coef, epochs=teacher_cfg.epochs,
        minibatches=teacher_cfg.minibatches)

    metrics_path = out_dir / "teacher_metrics.csv"
    with open(metrics_path, "w", newline="") as f:
        f.write(f"# config_hash={config_hash} seed={seed}\n")
        writer = csv.writer(f)
        writer.writerow(["iteration", "return_mean", "return_std", "win_rate",
                         "actor_loss", "critic_loss", "clip_frac", "entropy",
                         "eval_return", "eval_win_rate"])
        for it in range(teacher_cfg.iterations):
            if teacher_cfg.lr_decay:
                frac = it / max(teacher_cfg.iterations - 1, 1)
                cfg.lr = teacher_cfg.lr * (1.0 - 0.9 * frac)
            episodes = collect_rollouts(env, actor, critic,
                                        teacher_cfg.episodes_per_iter, rollout_rng,
                                        env_pool=env_pool)
            rets = np.array([ep.rewards.sum() for ep in episodes])
            if not np.all(np.isfinite(rets)):
                raise DivergenceError(f"non-finite returns at iteration {it}")
            wins = [ep.win for ep in episodes if ep.win is not None]
            m = mappo_update(actor, critic, episodes, cfg, update_rng)
            eval_ret, eval_win = "", ""
            if teacher_cfg.eval_every and (it + 1) % teacher_cfg.eval_every == 0:
                er, _, ew = greedy_eval(env, actor, teacher_cfg.eval_episodes, eval_rng)
                eval_ret = f"{er:.6f}"
                eval_win = "" if ew is None else f"{ew:.4f}"
            writer.writerow([
                it, f"{rets.mean():.6f}", f"{rets.std():.6f}",
                f"{np.mean(wins):.4f}" if wins else "",
                f"{m['actor_loss']:.6f}", f"{m['critic_loss']:.6f}",
                f"{m['clip_frac']:.4f}", f"{m['entropy']:.6f}",
                eval_ret, eval_win])

    ckpt_path = out_dir / "teacher.ckpt"
    save_bundle(ckpt_path, [
        BundleEntry("actor", "network", actor.store.values, spec=actor.spec),
        BundleEntry("critic", "network", critic.store.values, spec=critic.spec),
    ], meta={"config_hash": config_hash, "env": env.name,
             "n_agents": env.n_agents, "obs_dim": env.obs_dim,
             "state_dim": env.state_dim, "n_actions": env.n_actions},
        seed=seed)
    final = greedy_eval(env, actor, teacher_cfg.eval_episodes, eval_rng)
    return TeacherArtifacts(ckpt_path, metrics_path, file_sha256(ckpt_path), final)
