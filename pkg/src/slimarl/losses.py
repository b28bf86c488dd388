"""Distillation and policy-gradient loss terms with analytic gradients.

Scalar-surface functions (policy_kl, policy_ce, entropy, structure_loss,
role_distribution, role_loss, ppo_ratio_loss) implement the documented
contracts on plain distributions/vectors. The *_grad_logits / *_grads
variants are the batched forms the training engine uses; every analytic
gradient here is covered by central finite-difference tests.
"""

from __future__ import annotations

import warnings

import numpy as np

from .nets import log_softmax, softmax_temp

PROB_FLOOR = 1e-12
COS_NORM_FLOOR = 1e-8
RATIO_LOG_CLAMP = 20.0


def _check_pair(p_t, p_s):
    p_t = np.asarray(p_t, dtype=np.float64)
    p_s = np.asarray(p_s, dtype=np.float64)
    if p_t.shape != p_s.shape:
        raise ValueError(f"distribution shapes differ: {p_t.shape} vs {p_s.shape}")
    return p_t, p_s


def policy_kl(p_t, p_s) -> float:
    """KL(teacher || student), student probabilities floored inside the log."""
    p_t, p_s = _check_pair(p_t, p_s)
    log_t = np.log(np.maximum(p_t, PROB_FLOOR))
    log_s = np.log(np.maximum(p_s, PROB_FLOOR))
    per = (p_t * (log_t - log_s)).sum(axis=-1)
    return float(per) if per.ndim == 0 else float(per.mean())


def policy_ce(p_t, p_s) -> float:
    """Cross-entropy of the student under the teacher: KL + teacher entropy."""
    p_t, p_s = _check_pair(p_t, p_s)
    per = -(p_t * np.log(np.maximum(p_s, PROB_FLOOR))).sum(axis=-1)
    return float(per) if per.ndim == 0 else float(per.mean())


def entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    per = -(p * np.log(np.maximum(p, PROB_FLOOR))).sum(axis=-1)
    return float(per) if per.ndim == 0 else float(per.mean())


def kl_grad_logits(p_t: np.ndarray, logits_s: np.ndarray, tau: float):
    """Mean-over-batch KL(p_t || softmax(logits_s/tau)) and d/dlogits_s."""
    p_s = softmax_temp(logits_s, tau)
    n = p_t.reshape(-1, p_t.shape[-1]).shape[0]
    value = policy_kl(p_t, p_s)
    dlogits = (p_s - p_t) / (tau * n)
    return value, dlogits


def ce_grad_logits(p_t: np.ndarray, logits_s: np.ndarray, tau: float):
    """Mean-over-batch CE(p_t, softmax(logits_s/tau)); same gradient as KL."""
    p_s = softmax_temp(logits_s, tau)
    n = p_t.reshape(-1, p_t.shape[-1]).shape[0]
    value = policy_ce(p_t, p_s)
    dlogits = (p_s - p_t) / (tau * n)
    return value, dlogits


def entropy_grad_logits(logits_s: np.ndarray):
    """Mean-over-batch entropy of softmax(logits_s) and d/dlogits_s."""
    p = softmax_temp(logits_s, 1.0)
    log_p = np.log(np.maximum(p, PROB_FLOOR))
    per = -(p * log_p).sum(axis=-1)
    n = per.size
    dlogits = -p * (log_p + per[..., None]) / n
    return float(per.mean()), dlogits


def ppo_ratio_loss(logp_s, logp_beh, adv, eps: float) -> float:
    """Clipped importance-ratio surrogate, returned as the value to MAXIMIZE."""
    value, _, _ = _ppo_core(np.asarray(logp_s, dtype=np.float64),
                            np.asarray(logp_beh, dtype=np.float64),
                            np.asarray(adv, dtype=np.float64), eps)
    return value


def _ppo_core(logp_s, logp_beh, adv, eps):
    if logp_s.shape != logp_beh.shape or logp_s.shape != adv.shape:
        raise ValueError("logp_s, logp_beh, adv must share a shape")
    raw = logp_s - logp_beh
    clamped = np.abs(raw) > RATIO_LOG_CLAMP
    ratio = np.exp(np.clip(raw, -RATIO_LOG_CLAMP, RATIO_LOG_CLAMP))
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
    take_unclipped = unclipped <= clipped
    surrogate = np.where(take_unclipped, unclipped, clipped)
    # The clipped branch is flat in the ratio, as is the clamp plateau.
    dlogp = np.where(take_unclipped & ~clamped, unclipped, 0.0) / surrogate.size
    return float(surrogate.mean()), dlogp, int(clamped.sum())


def ppo_grad_logits(logits_s: np.ndarray, actions: np.ndarray,
                    logp_beh: np.ndarray, adv: np.ndarray, eps: float):
    """Surrogate (to maximize) and its gradient w.r.t. raw student logits."""
    logits2d = logits_s.reshape(-1, logits_s.shape[-1])
    acts = np.asarray(actions).reshape(-1)
    log_p = log_softmax(logits2d)
    idx = np.arange(acts.size)
    logp_s = log_p[idx, acts]
    value, dlogp, n_clamped = _ppo_core(
        logp_s, np.asarray(logp_beh, dtype=np.float64).reshape(-1),
        np.asarray(adv, dtype=np.float64).reshape(-1), eps)
    p = np.exp(log_p)
    dlogits = -p * dlogp[:, None]
    dlogits[idx, acts] += dlogp
    return value, dlogits.reshape(logits_s.shape), n_clamped


def _cos_pairs(phi: np.ndarray) -> np.ndarray:
    """Pairwise cosine matrix over the agent axis of (B, N, D)."""
    norms = np.maximum(np.linalg.norm(phi, axis=-1), COS_NORM_FLOOR)
    unit = phi / norms[..., None]
    return np.einsum("bnd,bmd->bnm", unit, unit)


def _pad_to(phi: np.ndarray, d: int) -> np.ndarray:
    if phi.shape[-1] == d:
        return phi
    pad = np.zeros(phi.shape[:-1] + (d - phi.shape[-1],))
    return np.concatenate([phi, pad], axis=-1)


def structure_loss(phi_t_list, phi_s_list) -> float:
    """Squared mismatch of pairwise cosine similarities, teacher vs student.

    Embedding dims may differ between the families and across students;
    within each family vectors are zero-padded to a common length before the
    cosine (which leaves equal-dim cosines untouched).
    """
    phi_t = [np.atleast_2d(np.asarray(p, dtype=np.float64)) for p in phi_t_list]
    d_t = max(p.shape[-1] for p in phi_t)
    value, _ = structure_loss_grads(
        np.stack([_pad_to(p, d_t) for p in phi_t], axis=1),
        [np.atleast_2d(np.asarray(p, dtype=np.float64)) for p in phi_s_list],
    )
    return value


def structure_loss_grads(phi_t: np.ndarray, phi_s_list: list):
    """Batched structure loss and gradients w.r.t. each student embedding.

    phi_t: (B, N, d_t) teacher embeddings (constants). phi_s_list: one
    (B, d_i) array per agent; returns (value, [dphi_i]). N < 2 gives loss 0.
    """
    n = phi_t.shape[1]
    if len(phi_s_list) != n:
        raise ValueError(f"{len(phi_s_list)} student embeddings for {n} agents")
    if n < 2:
        warnings.warn("structure loss needs >= 2 agents; returning 0", stacklevel=2)
        return 0.0, [np.zeros_like(p) for p in phi_s_list]
    b = phi_t.shape[0]
    d_max = max(p.shape[-1] for p in phi_s_list)
    phi_s = np.stack([_pad_to(p, d_max) for p in phi_s_list], axis=1)  # (B,N,D)
    cos_t = _cos_pairs(phi_t)
    raw_norms = np.linalg.norm(phi_s, axis=-1)
    norms = np.maximum(raw_norms, COS_NORM_FLOOR)
    # Subgradient 0 where the norm floor is active (degenerate embeddings).
    live = (raw_norms > COS_NORM_FLOOR).astype(np.float64)
    unit = phi_s / norms[..., None]
    cos_s = np.einsum("bnd,bmd->bnm", unit, unit)
    dphi = np.zeros_like(phi_s)
    total = 0.0
    for i in range(n):
        for j in range(i):
            diff = cos_t[:, i, j] - cos_s[:, i, j]
            total += float((diff * diff).sum())
            # d/dphi of cos(u, v): v_unit/|u| - cos * u_unit/|u|, and symmetric.
            coeff = (-2.0 * diff * live[:, i] * live[:, j])[:, None]
            cs = cos_s[:, i, j][:, None]
            dphi[:, i] += coeff * (unit[:, j] - cs * unit[:, i]) / norms[:, i][:, None]
            dphi[:, j] += coeff * (unit[:, i] - cs * unit[:, j]) / norms[:, j][:, None]
    total /= b
    dphi /= b
    return total, [dphi[:, i, : phi_s_list[i].shape[-1]] for i in range(n)]


def role_distribution(u: np.ndarray, phi: np.ndarray, tau_role: float) -> np.ndarray:
    """softmax(U phi / tau) over K roles; phi may be (D,) or (B, D)."""
    u = np.asarray(u, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape[-1] != u.shape[1]:
        raise ValueError(f"embedding dim {phi.shape[-1]} != projection dim {u.shape[1]}")
    return softmax_temp(phi @ u.T, tau_role)


def role_loss(rho_t, rho_s) -> float:
    """KL(teacher role distribution || student role distribution)."""
    return policy_kl(rho_t, rho_s)


def role_loss_grads(rho_t: np.ndarray, u_s: np.ndarray, phi_s: np.ndarray,
                    tau_role: float):
    """Mean-over-batch role KL plus gradients w.r.t. U_S and phi_S.

    rho_t: (B, K) teacher role distributions (constants); u_s: (K, d_s);
    phi_s: (B, d_s).
    """
    logits = phi_s @ u_s.T
    rho_s = softmax_temp(logits, tau_role)
    value = policy_kl(rho_t, rho_s)
    b = rho_t.shape[0]
    dlogits = (rho_s - rho_t) / (tau_role * b)
    du = dlogits.T @ phi_s
    dphi = dlogits @ u_s
    return value, du, dphi
