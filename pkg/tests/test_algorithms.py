import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rlab.algorithms import (AwrConfig, Checkpoint, CqlConfig, RedsConfig, RhoTable,
                             advantages, awr_policy, bellman_target, cql_backup_closed_form,
                             cql_objective, cql_objective_gradient, cql_penalty, fit_rho,
                             g_inverse, mixture_pi_re, reds_backup_closed_form,
                             reds_objective, reds_objective_gradient, reds_penalty_g,
                             reds_penalty_rho, rho_weights, soft_policy_improvement, train)
from rlab.dataset import EmpiricalModel
from rlab.mdp import TabularPolicy

from conftest import random_model, random_policy


def one_state_model(beta, eps_b=1e-4):
    beta = np.asarray(beta, dtype=float)
    n = len(beta)
    counts = np.rint(beta * 1000).astype(np.int64)[None]
    nxt = np.zeros((1, n, 1), dtype=np.int64)
    nxt[0, :, 0] = counts[0]
    return EmpiricalModel(TabularPolicy(beta[None]), np.ones(1), counts, nxt,
                          np.zeros((1, n)), counts > 0, eps_b)


# ---------------------------------------------------------------- policy improvement

def test_soft_policy_improvement_examples():
    np.testing.assert_allclose(soft_policy_improvement(np.full((2, 3), 4.2), 0.5).probs, 1 / 3)
    p = soft_policy_improvement(np.array([[1.0, 0.0]]), 1.0).probs[0]
    np.testing.assert_allclose(p, [np.e / (np.e + 1), 1 / (np.e + 1)])
    sharp = soft_policy_improvement(np.array([[0.1, 0.0, -0.3]]), 1e-4).probs[0]
    assert abs(sharp[0] - 1.0) < 1e-6
    big = soft_policy_improvement(np.array([[1e4, 0.0]]), 1e-3).probs
    assert np.isfinite(big).all()
    with pytest.raises(ValueError):
        soft_policy_improvement(np.zeros((1, 2)), 0.0)


# ---------------------------------------------------------------- CQL closed form

def test_cql_closed_form_examples():
    m = one_state_model([0.5, 0.5])
    cfg = CqlConfig(alpha=0.5, gamma=0.5)
    pi = TabularPolicy(np.array([[1.0, 0.0]]))
    # target B^pi Qbar = (1, 1): r = 0, gamma * V(next) = 0.5 * 2
    q_bar = np.array([[2.0, 2.0]])
    q = cql_backup_closed_form(q_bar, pi, m, cfg)
    np.testing.assert_allclose(q, [[0.5, 1.5]])
    same = cql_backup_closed_form(q_bar, m.pi_beta_hat, m, cfg)
    np.testing.assert_allclose(same, [[1.0, 1.0]])
    plain = cql_backup_closed_form(q_bar, pi, m, CqlConfig(alpha=0.0, gamma=0.5))
    np.testing.assert_allclose(plain, bellman_target(q_bar, pi, m, 0.5))


def test_cql_closed_form_is_clamped():
    m = one_state_model([0.9999, 0.0001])
    pi = TabularPolicy(np.array([[0.0, 1.0]]))
    q = cql_backup_closed_form(np.zeros((1, 2)), pi, m, CqlConfig(alpha=100.0, gamma=0.9))
    assert q.min() == pytest.approx(-20.0)


def test_cql_penalty_sign_structure(rng):
    pi = random_policy(rng, 20, 4).probs
    beta = random_policy(rng, 20, 4).probs
    pen = cql_penalty(pi, beta)
    assert (pen[pi > beta] > 0).all() and (pen[pi < beta] < 0).all()


@pytest.mark.parametrize("seed", range(5))
def test_cql_gradient_stationary_at_closed_form(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng)
    pi = random_policy(rng, 5, 3)
    cfg = CqlConfig(alpha=0.7, gamma=0.9)
    q_bar = rng.normal(size=(5, 3))
    q_star = cql_backup_closed_form(q_bar, pi, m, cfg)
    grad = cql_objective_gradient(q_star, pi, m, cfg, q_target=q_bar)
    assert np.abs(grad).max() <= 1e-9
    t = bellman_target(q_bar, pi, m, cfg.gamma)
    zero = cql_objective_gradient(t, pi, m, CqlConfig(alpha=0.0, gamma=0.9), q_target=q_bar)
    assert np.abs(zero).max() <= 1e-12


def central_difference(f, x, h=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        g[idx] = (f(x + e) - f(x - e)) / (2 * h)
    return g


@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    m = random_model(rng)
    pi = random_policy(rng, 5, 3)
    rho = fit_rho(m, rng.normal(size=(5, 3)), pi, RedsConfig())
    q_bar = rng.normal(size=(5, 3))
    q = rng.normal(size=(5, 3))
    cfg = RedsConfig(alpha=0.8, gamma=0.9)
    t = bellman_target(q_bar, pi, m, cfg.gamma)
    g_cql = cql_objective_gradient(q, pi, m, cfg, q_target=q_bar)
    fd = central_difference(lambda x: cql_objective(x, t, pi, m, cfg.alpha), q)
    np.testing.assert_allclose(g_cql, fd, rtol=1e-5, atol=1e-10)
    g_reds = reds_objective_gradient(q, pi, rho, m, cfg, q_target=q_bar)
    fd = central_difference(lambda x: reds_objective(x, t, pi, rho, m, cfg), q)
    np.testing.assert_allclose(g_reds, fd, rtol=1e-5, atol=1e-10)


# ---------------------------------------------------------------- rho, mixture, ReDS

def test_fit_rho_examples():
    m = one_state_model([0.5, 0.5])
    cfg = RedsConfig(tau=1.0)
    pi = m.pi_beta_hat
    flat = fit_rho(m, np.full((1, 2), 3.0), pi, cfg)
    np.testing.assert_allclose(flat.probs, [[0.5, 0.5]])
    # A = (ln 2, 0) up to a shared baseline
    q = np.array([[np.log(2.0), 0.0]])
    np.testing.assert_allclose(fit_rho(m, q, pi, cfg).probs, [[1 / 3, 2 / 3]], atol=1e-12)


def test_clip_constants_exact():
    cfg = RedsConfig(tau=1.0)
    adv = np.array([[20.0, -20.0, 0.0]])
    np.testing.assert_array_equal(rho_weights(adv, cfg), np.exp([[-10.0, 5.0, 0.0]]))
    assert (cfg.clip_lo, cfg.clip_hi) == (-10.0, 5.0)


def test_fit_rho_respects_support_and_flags_empty_rows():
    rng = np.random.default_rng(3)
    m = random_model(rng, 6, 4, drop=0.5)
    rho = fit_rho(m, rng.normal(size=(6, 4)), random_policy(rng, 6, 4), RedsConfig())
    assert (rho.probs[~m.support_mask] == 0).all()
    counts = m.counts.copy()
    counts[0] = 0
    empty = EmpiricalModel(m.pi_beta_hat, m.mu_hat, counts, m.next_counts, m.reward_sum,
                           counts > 0, m.eps_b)
    rho = fit_rho(empty, np.zeros((6, 4)), m.pi_beta_hat, RedsConfig())
    assert rho.flagged[0] and not rho.flagged[1:].any()
    np.testing.assert_allclose(rho.probs[0], m.beta[0])


def test_fit_rho_closed_matches_mle():
    rng = np.random.default_rng(4)
    m = random_model(rng, 5, 3, drop=0.3)
    q = rng.normal(size=(5, 3))
    pi = random_policy(rng, 5, 3)
    cfg = RedsConfig(tau=0.5)
    a = fit_rho(m, q, pi, cfg).probs
    b = fit_rho(m, q, pi, cfg, mode="mle").probs
    assert (0.5 * np.abs(a - b).sum(1)).max() <= 1e-4


def test_mixture_examples():
    pi = TabularPolicy(np.array([[1.0, 0.0]]))
    rho = RhoTable(np.array([[0.0, 1.0]]))
    np.testing.assert_allclose(mixture_pi_re(pi, rho).probs, [[0.5, 0.5]])
    np.testing.assert_allclose(mixture_pi_re(pi, RhoTable(pi.probs)).probs, pi.probs)
    np.testing.assert_allclose(mixture_pi_re(pi, rho, weight=1.0).probs, pi.probs)


def test_reds_g_form_examples():
    m = one_state_model([0.5, 0.5])
    pi = m.pi_beta_hat
    zero_t = np.zeros((1, 2))
    q = reds_backup_closed_form(zero_t, pi, None, m, RedsConfig(alpha=1.0, tau=2.0), form="g")
    np.testing.assert_allclose(q, [[0.0, 0.0]], atol=1e-12)
    q = reds_backup_closed_form(zero_t, pi, None, m, RedsConfig(alpha=1.0, tau=1.0), form="g")
    np.testing.assert_allclose(q, [[-0.5, -0.5]], atol=1e-12)


def test_reds_lowers_penalty_on_favoured_action():
    m = one_state_model([0.4, 0.3, 0.3])
    pi = TabularPolicy(np.array([[0.9, 0.05, 0.05]]))
    cfg = RedsConfig(alpha=1.0, tau=1.0)
    rho = fit_rho(m, np.array([[1.0, 0.0, -0.5]]), pi, cfg)
    cql_pen = cql_penalty(pi.probs, m.beta)
    reds_pen = reds_penalty_rho(pi.probs, rho.probs, m.beta)
    assert reds_pen[0, 0] < cql_pen[0, 0]


@pytest.mark.parametrize("seed", range(5))
def test_reds_gradient_stationary(seed):
    rng = np.random.default_rng(200 + seed)
    m = random_model(rng)
    pi = random_policy(rng, 5, 3)
    cfg = RedsConfig(alpha=0.5, gamma=0.9)
    q_bar = rng.normal(size=(5, 3))
    rho = fit_rho(m, q_bar, pi, cfg)
    q_star = reds_backup_closed_form(q_bar, pi, rho, m, cfg)
    grad = reds_objective_gradient(q_star, pi, rho, m, cfg, q_target=q_bar)
    assert np.abs(grad).max() <= 1e-9
    np.testing.assert_allclose(reds_backup_closed_form(q_bar, pi, RhoTable(pi.probs), m, cfg),
                               cql_backup_closed_form(q_bar, pi, m, cfg), atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(1, 10**6), min_size=2, max_size=20, unique=True))
def test_g_strictly_decreasing(ks):
    x = np.sort(np.array(ks)) / 1000.0
    assert (np.diff(g_inverse(x)) < 0).all()


# ---------------------------------------------------------------- trainers

def test_bc_returns_behavior_policy():
    m = random_model(np.random.default_rng(9))
    ck = train("bc", m)
    assert len(ck) == 1
    np.testing.assert_array_equal(ck[0].policy.probs, m.pi_beta_hat.probs)


def test_awr_large_temperature_recovers_behavior():
    m = random_model(np.random.default_rng(10))
    pi, _ = awr_policy(m, AwrConfig(tau=1e6))
    assert 0.5 * np.abs(pi.probs - m.beta).sum(1).max() <= 1e-3


@pytest.mark.parametrize("method,cls", [("cql", CqlConfig), ("reds", RedsConfig)])
def test_gradient_trainer_matches_closed_trainer(method, cls):
    m = random_model(np.random.default_rng(11))
    closed = train(f"{method}_closed", m, None,
                   cls(alpha=0.1, beta_ent=1.0, n_iters=5000, tol=1e-12))
    lr = 1.0 / np.max(m.mu_hat[:, None] * m.beta)
    grad = train(f"{method}_grad", m, None,
                 cls(alpha=0.1, beta_ent=1.0, n_iters=20000, tol=1e-12, lr_q=lr,
                     inner_steps=50, checkpoint_every=10**6))
    assert np.abs(closed[-1].q - grad[-1].q).max() <= 1e-5


def test_closed_trainer_fixed_point_is_consistent():
    m = random_model(np.random.default_rng(12), drop=0.3)
    cfg = RedsConfig(alpha=0.2, beta_ent=0.5, n_iters=5000, tol=1e-12)
    ck = train("reds_closed", m, None, cfg)[-1]
    np.testing.assert_allclose(ck.policy.probs, soft_policy_improvement(ck.q, 0.5).probs,
                               atol=1e-9)
    assert (ck.policy.probs[~m.support_mask] < 1e-12).all()


def test_trainer_checkpoints_deterministic(tmp_path):
    m = random_model(np.random.default_rng(13))
    a = train("reds_closed", m, None, RedsConfig(n_iters=120, checkpoint_every=50))
    b = train("reds_closed", m, None, RedsConfig(n_iters=120, checkpoint_every=50))
    assert [c.iteration for c in a] == [50, 100, 120]
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.q, y.q)
    a[-1].save(tmp_path / "ck.json", RedsConfig())
    back = Checkpoint.load(tmp_path / "ck.json")
    np.testing.assert_array_equal(back.q, a[-1].q)
    assert json.loads((tmp_path / "ck.json").read_text())["config"]["alpha"] == 0.01


def test_config_validation():
    with pytest.raises(ValueError):
        CqlConfig(alpha=-1)
    with pytest.raises(ValueError):
        RedsConfig(clip_lo=5, clip_hi=-10)
    with pytest.raises(ValueError):
        train("dqn", random_model(np.random.default_rng(0)))
    assert advantages(np.ones((2, 2)), TabularPolicy.uniform(2, 2)).max() == 0


def test_cql_alpha_zero_is_fitted_q_iteration():
    m = random_model(np.random.default_rng(14), drop=0.3)
    cfg = CqlConfig(alpha=0.0, gamma=0.9, n_iters=400, tol=1e-13)
    ck = train("cql_closed", m, None, cfg)[-1]
    cap = 2.0 / (1.0 - cfg.gamma)
    pinned = ~m.support_mask
    q = np.where(pinned, -cap, 0.0)
    for _ in range(400):
        pi = soft_policy_improvement(q, cfg.beta_ent)
        q = np.where(pinned, -cap, bellman_target(q, pi, m, cfg.gamma))
    np.testing.assert_allclose(ck.q, q, atol=1e-9)
