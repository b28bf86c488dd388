import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from slimarl.losses import (
    ce_grad_logits,
    entropy,
    entropy_grad_logits,
    kl_grad_logits,
    policy_ce,
    policy_kl,
    ppo_grad_logits,
    ppo_ratio_loss,
    role_distribution,
    role_loss,
    role_loss_grads,
    structure_loss,
    structure_loss_grads,
)
from slimarl.nets import log_softmax, softmax_temp

from fd import assert_grads_close, central_diff


def random_dist(rng, k):
    p = rng.random(k) + 1e-3
    return p / p.sum()


# -- KL / CE ----------------------------------------------------------------

def test_kl_zero_at_equality_and_closed_form():
    p = np.array([0.3, 0.7])
    assert policy_kl(p, p) == pytest.approx(0.0, abs=1e-15)
    assert policy_kl([1.0, 0.0], [0.5, 0.5]) == pytest.approx(np.log(2), abs=1e-12)


def test_ce_closed_forms():
    assert policy_ce([1.0, 0.0], [0.5, 0.5]) == pytest.approx(np.log(2), abs=1e-12)
    k = 5
    u = np.full(k, 1.0 / k)
    assert policy_ce(u, u) == pytest.approx(np.log(k), abs=1e-12)


def test_dimension_mismatch_rejected():
    with pytest.raises(ValueError):
        policy_kl([0.5, 0.5], [0.3, 0.3, 0.4])
    with pytest.raises(ValueError):
        policy_ce([0.5, 0.5], [1.0])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(2, 8))
def test_gibbs_inequality_and_ce_identity(seed, k):
    rng = np.random.default_rng(seed)
    p, q = random_dist(rng, k), random_dist(rng, k)
    kl = policy_kl(p, q)
    assert kl >= -1e-12
    assert policy_ce(p, q) - kl == pytest.approx(entropy(p), abs=1e-10)


def test_role_loss_closed_form():
    rho_t = np.array([0.9, 0.1])
    rho_s = np.array([0.1, 0.9])
    expect = 0.9 * np.log(9.0) + 0.1 * np.log(1.0 / 9.0)
    assert role_loss(rho_t, rho_s) == pytest.approx(expect, abs=1e-12)
    assert role_loss(rho_t, rho_t) == pytest.approx(0.0, abs=1e-15)


def test_role_distribution_basics():
    u = np.array([[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_allclose(role_distribution(u, np.zeros(2), 1.0), [0.5, 0.5], atol=1e-15)
    # K=2, logits (1, 0), tau=1 -> sigmoid(1)
    rho = role_distribution(np.array([[1.0, 0.0], [0.0, 0.0]]), np.array([1.0, 1.0]), 1.0)
    np.testing.assert_allclose(rho, [0.7311, 0.2689], atol=1e-4)
    # larger temperature flattens toward uniform
    h_sharp = entropy(role_distribution(u, np.array([2.0, -1.0]), 0.5))
    h_flat = entropy(role_distribution(u, np.array([2.0, -1.0]), 5.0))
    assert h_flat > h_sharp
    with pytest.raises(ValueError):
        role_distribution(u, np.zeros(3), 1.0)


# -- structure loss -----------------------------------------------------------

def test_structure_loss_zero_under_rotation_copy():
    rng = np.random.default_rng(4)
    phi_t = [rng.normal(size=6) for _ in range(3)]
    q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    phi_s = [q @ p for p in phi_t]
    assert structure_loss(phi_t, phi_s) == pytest.approx(0.0, abs=1e-12)


def test_structure_loss_hand_case_orthogonal_pair():
    phi_t = [np.array([1.0, 0.0]), np.array([2.0, 0.0])]       # cos = 1
    phi_s = [np.array([1.0, 0.0]), np.array([0.0, 1.0])]       # cos = 0
    assert structure_loss(phi_t, phi_s) == pytest.approx(1.0, abs=1e-12)


def test_structure_loss_range_bound():
    rng = np.random.default_rng(5)
    n = 4
    phi_t = [rng.normal(size=5) for _ in range(n)]
    phi_s = [rng.normal(size=3) for _ in range(n)]
    assert structure_loss(phi_t, phi_s) <= 4.0 * n * (n - 1) / 2 + 1e-12


def test_structure_loss_single_agent_warns_and_returns_zero():
    with pytest.warns(UserWarning):
        value = structure_loss([np.ones(3)], [np.ones(2)])
    assert value == 0.0


def test_structure_loss_heterogeneous_student_dims():
    rng = np.random.default_rng(6)
    phi_t = np.stack([rng.normal(size=(2, 3, 8))], axis=0)[0]  # (B=2, N=3, 8)
    phi_s = [rng.normal(size=(2, 4)), rng.normal(size=(2, 8)), rng.normal(size=(2, 4))]
    value, grads = structure_loss_grads(phi_t, phi_s)
    assert np.isfinite(value)
    assert [g.shape for g in grads] == [(2, 4), (2, 8), (2, 4)]


# -- ppo ----------------------------------------------------------------------

def test_ppo_ratio_one_gives_mean_advantage():
    rng = np.random.default_rng(7)
    logp = rng.normal(size=16)
    adv = rng.normal(size=16)
    assert ppo_ratio_loss(logp, logp, adv, 0.2) == pytest.approx(float(adv.mean()), abs=1e-12)


def test_ppo_clip_hand_cases():
    # r = 1.5, A = 1, eps = 0.2 -> min(1.5, 1.2) = 1.2
    assert ppo_ratio_loss(np.log(1.5), 0.0, np.array(1.0), 0.2) == pytest.approx(1.2, abs=1e-12)
    # r = 0.5, A = -1, eps = 0.2 -> min(-0.5, -0.8) = -0.8
    assert ppo_ratio_loss(np.log(0.5), 0.0, np.array(-1.0), 0.2) == pytest.approx(-0.8, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_ppo_surrogate_never_exceeds_clip_bounds(seed):
    rng = np.random.default_rng(seed)
    logp_s = rng.normal(size=32)
    logp_b = rng.normal(size=32)
    adv = rng.normal(size=32)
    eps = float(rng.uniform(0.05, 0.4))
    ratio = np.exp(logp_s - logp_b)
    per_sample = np.minimum(ratio * adv, np.clip(ratio, 1 - eps, 1 + eps) * adv)
    # the clipped-surrogate value never exceeds the clip-bound envelope
    bound = np.maximum((1 - eps) * adv, (1 + eps) * adv)
    assert np.all(per_sample <= bound + 1e-12)
    got = ppo_ratio_loss(logp_s, logp_b, adv, eps)
    assert got == pytest.approx(float(per_sample.mean()), abs=1e-12)


def test_ppo_extreme_ratio_is_clamped_and_counted():
    value, dlogits, n_clamped = ppo_grad_logits(
        np.array([[50.0, 0.0]]), np.array([0]), np.array([-30.0]), np.array([1.0]), 0.2)
    assert np.isfinite(value)
    assert n_clamped == 1
    assert np.all(np.isfinite(dlogits))


# -- gradient checks -----------------------------------------------------------

def _away_from_kinks(logits, actions, logp_beh, adv, eps):
    log_p = log_softmax(logits.reshape(-1, logits.shape[-1]))
    ratio = np.exp(log_p[np.arange(len(actions)), actions] - logp_beh)
    return np.all(np.abs(ratio - (1 - eps)) > 1e-3) and np.all(np.abs(ratio - (1 + eps)) > 1e-3)


@pytest.mark.parametrize("seed", range(20))
def test_loss_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(1000 + seed)
    b, a, k, d_s = 6, 4, 3, 5
    p_t = np.stack([random_dist(rng, a) for _ in range(b)])
    logits = rng.normal(size=(b, a)) * 0.8
    tau = float(rng.uniform(0.5, 3.0))

    _, d_kl = kl_grad_logits(p_t, logits, tau)
    assert_grads_close(d_kl, central_diff(
        lambda x: policy_kl(p_t, softmax_temp(x.reshape(b, a), tau)),
        logits.ravel()).reshape(b, a), what="kl")

    _, d_ce = ce_grad_logits(p_t, logits, tau)
    assert_grads_close(d_ce, central_diff(
        lambda x: policy_ce(p_t, softmax_temp(x.reshape(b, a), tau)),
        logits.ravel()).reshape(b, a), what="ce")

    _, d_h = entropy_grad_logits(logits)
    assert_grads_close(d_h, central_diff(
        lambda x: entropy(softmax_temp(x.reshape(b, a), 1.0)),
        logits.ravel()).reshape(b, a), what="entropy")

    actions = rng.integers(0, a, size=b)
    logp_beh = log_softmax(logits)[np.arange(b), actions] + rng.normal(size=b) * 0.1
    adv = rng.normal(size=b)
    eps = 0.2
    if _away_from_kinks(logits, actions, logp_beh, adv, eps):
        _, d_ppo, _ = ppo_grad_logits(logits, actions, logp_beh, adv, eps)

        def ppo_of(x):
            lp = log_softmax(x.reshape(b, a))[np.arange(b), actions]
            ratio = np.exp(lp - logp_beh)
            per = np.minimum(ratio * adv, np.clip(ratio, 1 - eps, 1 + eps) * adv)
            return float(per.mean())

        assert_grads_close(d_ppo, central_diff(ppo_of, logits.ravel()).reshape(b, a),
                           what="ppo")

    # structure loss gradients w.r.t. student embeddings
    phi_t = rng.normal(size=(b, 3, 6))
    phi_s = [rng.normal(size=(b, d_s)) for _ in range(3)]
    _, grads = structure_loss_grads(phi_t, phi_s)

    def str_of(flat, which):
        alt = [p.copy() for p in phi_s]
        alt[which] = flat.reshape(b, d_s)
        v, _ = structure_loss_grads(phi_t, alt)
        return v

    for i in range(3):
        assert_grads_close(grads[i], central_diff(
            lambda x, i=i: str_of(x, i), phi_s[i].ravel()).reshape(b, d_s),
            what=f"structure phi_{i}")

    # role loss gradients w.r.t. U_S and phi_S
    u_s = rng.normal(size=(k, d_s))
    phi = rng.normal(size=(b, d_s))
    rho_t = np.stack([random_dist(rng, k) for _ in range(b)])
    tau_r = float(rng.uniform(0.5, 2.0))
    _, du, dphi = role_loss_grads(rho_t, u_s, phi, tau_r)

    assert_grads_close(du, central_diff(
        lambda x: policy_kl(rho_t, softmax_temp(phi @ x.reshape(k, d_s).T, tau_r)),
        u_s.ravel()).reshape(k, d_s), what="role U_S")
    assert_grads_close(dphi, central_diff(
        lambda x: policy_kl(rho_t, softmax_temp(x.reshape(b, d_s) @ u_s.T, tau_r)),
        phi.ravel()).reshape(b, d_s), what="role phi_S")
