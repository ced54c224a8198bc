"""Tabular offline RL trainers: BC, AWR, CQL and CQL (ReDS).

All backups run on the empirical MDP held by an :class:`EmpiricalModel`.
For a target table ``Qbar`` and policy ``pi`` the empirical Bellman target is

    T(s, a) = r_hat(s, a) + gamma * sum_s' P_hat(s'|s, a) * sum_a' pi(a'|s') Qbar(s', a')

CQL modifies it by ``-alpha * (pi / beta - 1)``; ReDS replaces ``pi`` inside
that ratio by the mixture ``w * pi + (1 - w) * rho``.  The gradient forms below
differentiate the tabular objectives

    alpha * sum_s mu(s) sum_a (p(a|s) - beta(a|s)) Q(s, a)
        + 1/2 * sum_s mu(s) sum_a beta(a|s) (Q(s, a) - T(s, a))^2

with ``p = pi`` (CQL) or ``p = pi_re`` (ReDS), so their stationary points are
exactly the closed forms.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
from scipy.special import logsumexp

from .dataset import EmpiricalModel, empirical_mdp
from .mdp import TabularMdp, TabularPolicy, policy_evaluation, q_cap

METHODS = ("bc", "awr", "cql_closed", "cql_grad", "reds_closed", "reds_grad")


@dataclass(frozen=True)
class CqlConfig:
    alpha: float = 1.0
    gamma: float = 0.99
    n_iters: int = 500
    beta_ent: float = 1e-3
    lr_q: float = 0.5
    inner_steps: int = 1
    tol: float = 1e-8
    checkpoint_every: int = 50

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if self.beta_ent <= 0 or self.lr_q <= 0 or self.tol <= 0:
            raise ValueError("beta_ent, lr_q and tol must be positive")
        if self.n_iters < 1 or self.inner_steps < 1 or self.checkpoint_every < 1:
            raise ValueError("n_iters, inner_steps and checkpoint_every must be >= 1")


@dataclass(frozen=True)
class RedsConfig(CqlConfig):
    alpha: float = 0.01
    tau: float = 1.0
    clip_lo: float = -10.0
    clip_hi: float = 5.0
    mix_weight: float = 0.5

    def __post_init__(self):
        super().__post_init__()
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not self.clip_lo < self.clip_hi:
            raise ValueError("clip_lo must be below clip_hi")
        if not 0 < self.mix_weight <= 1:
            raise ValueError("mix_weight must lie in (0, 1]")


@dataclass(frozen=True)
class AwrConfig:
    tau: float = 1.0
    gamma: float = 0.99
    clip_lo: float = -10.0
    clip_hi: float = 5.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not self.clip_lo < self.clip_hi:
            raise ValueError("clip_lo must be below clip_hi")


@dataclass(frozen=True, eq=False)
class RhoTable:
    probs: np.ndarray
    flagged: np.ndarray = field(default=None)

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if (p < 0).any() or not np.allclose(p.sum(1), 1.0, atol=1e-9, rtol=0):
            raise ValueError("rho rows must be probability vectors")
        object.__setattr__(self, "probs", p)
        if self.flagged is None:
            object.__setattr__(self, "flagged", np.zeros(len(p), dtype=bool))


@dataclass(frozen=True, eq=False)
class Checkpoint:
    iteration: int
    q: np.ndarray
    policy: TabularPolicy
    rho: Optional[RhoTable] = None
    eval_success: Optional[float] = None

    def to_dict(self, config=None) -> dict:
        return {
            "iteration": self.iteration,
            "q": self.q.tolist(),
            "policy": self.policy.probs.tolist(),
            "rho": None if self.rho is None else self.rho.probs.tolist(),
            "eval_success": self.eval_success,
            "config": None if config is None else asdict(config),
        }

    def save(self, path: Union[str, Path], config=None) -> None:
        Path(path).write_text(json.dumps(self.to_dict(config), sort_keys=True))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Checkpoint":
        d = json.loads(Path(path).read_text())
        rho = None if d["rho"] is None else RhoTable(np.array(d["rho"]))
        return cls(d["iteration"], np.array(d["q"]), TabularPolicy(np.array(d["policy"])),
                   rho, d["eval_success"])


# --------------------------------------------------------------------------
# Elementary operations
# --------------------------------------------------------------------------

def soft_policy_improvement(q: np.ndarray, beta_ent: float) -> TabularPolicy:
    """Boltzmann policy ``pi(a|s) ∝ exp(Q(s, a) / beta_ent)``."""
    if beta_ent <= 0:
        raise ValueError("beta_ent must be positive")
    z = q / beta_ent
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    return TabularPolicy(p / p.sum(axis=1, keepdims=True))


def bellman_target(q_target: np.ndarray, pi: TabularPolicy, model: EmpiricalModel,
                   gamma: float) -> np.ndarray:
    """Empirical backup ``B^pi Qbar``; unobserved pairs self-loop with reward 0."""
    v = (pi.probs * q_target).sum(1)
    return model.reward_mean + gamma * model.empirical_transition @ v


def _bellman_target_v(v: np.ndarray, model: EmpiricalModel, gamma: float,
                      P: Optional[np.ndarray] = None) -> np.ndarray:
    P = model.empirical_transition if P is None else P
    return model.reward_mean + gamma * P @ v


def cql_penalty(pi: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """``pi / beta - 1``: positive where the policy over-weights an action."""
    return pi / beta - 1.0


def cql_backup_closed_form(q_target: np.ndarray, pi: TabularPolicy, model: EmpiricalModel,
                           cfg: CqlConfig) -> np.ndarray:
    """One CQL iteration in closed form, clamped to ``±2 / (1 - gamma)``."""
    t = bellman_target(q_target, pi, model, cfg.gamma)
    q = t - cfg.alpha * cql_penalty(pi.probs, model.beta)
    cap = q_cap(cfg.gamma)
    return np.clip(q, -cap, cap)


def cql_objective(q: np.ndarray, target: np.ndarray, pi: TabularPolicy,
                  model: EmpiricalModel, alpha: float) -> float:
    mu, beta = model.mu_hat[:, None], model.beta
    reg = alpha * np.sum(mu * (pi.probs - beta) * q)
    td = 0.5 * np.sum(mu * beta * (q - target) ** 2)
    return float(reg + td)


def cql_objective_gradient(q: np.ndarray, pi: TabularPolicy, model: EmpiricalModel,
                           cfg: CqlConfig, q_target: Optional[np.ndarray] = None) -> np.ndarray:
    """Gradient of the CQL objective in each tabular entry, TD target held fixed.

    The target is built from ``q_target`` (defaults to ``q`` itself).
    """
    target = bellman_target(q if q_target is None else q_target, pi, model, cfg.gamma)
    return _objective_gradient(q, target, pi.probs, model, cfg.alpha)


def _objective_gradient(q, target, push_down, model, alpha):
    mu, beta = model.mu_hat[:, None], model.beta
    return mu * (alpha * (push_down - beta) + beta * (q - target))


def _clipped_weights(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return np.exp(np.clip(x, lo, hi))


def advantages(q: np.ndarray, pi: TabularPolicy) -> np.ndarray:
    """``A = Q - V`` with the baseline ``V(s) = sum_a pi(a|s) Q(s, a)``."""
    return q - (pi.probs * q).sum(1, keepdims=True)


def rho_weights(adv: np.ndarray, cfg: RedsConfig) -> np.ndarray:
    return _clipped_weights(-adv / cfg.tau, cfg.clip_lo, cfg.clip_hi)


def fit_rho(model: EmpiricalModel, q: np.ndarray, pi: TabularPolicy, cfg: RedsConfig,
            mode: str = "closed", n_steps: int = 20000, lr: float = 2.0) -> RhoTable:
    """Negative-advantage-weighted fit of ``rho``.

    ``closed`` returns the weighted-likelihood maximiser
    ``rho ∝ beta_hat * exp(clip(-A / tau, clip_lo, clip_hi))`` on the support.
    ``mle`` runs gradient ascent on softmax logits of the weighted data
    log-likelihood and serves as a cross-check.  States without support copy
    ``beta_hat`` and are flagged.
    """
    w = rho_weights(advantages(q, pi), cfg)
    empty = ~model.support_mask.any(1)
    if mode == "closed":
        raw = np.where(model.support_mask, model.beta * w, 0.0)
        raw[empty] = model.beta[empty]
        return RhoTable(raw / raw.sum(1, keepdims=True), flagged=empty)
    if mode != "mle":
        raise ValueError(f"unknown mode {mode!r}")
    cw = model.counts * w
    tot = cw.sum(1, keepdims=True)
    target = np.divide(cw, tot, out=np.zeros_like(cw), where=tot > 0)
    logits = np.zeros_like(cw)
    # stable for lr < 4: the softmax log-likelihood has curvature at most 1/2
    for _ in range(n_steps):
        z = logits - logits.max(1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(1, keepdims=True)
        logits += lr * (target - p)
    p = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
    p[empty] = model.beta[empty]
    return RhoTable(p / p.sum(1, keepdims=True), flagged=empty)


def g_inverse(x: np.ndarray) -> np.ndarray:
    """The decreasing reweighting function ``g(x) = 1 / x``."""
    return 1.0 / np.asarray(x, dtype=float)


def mixture_pi_re(pi: TabularPolicy, rho: RhoTable, weight: float = 0.5) -> TabularPolicy:
    """``weight * pi + (1 - weight) * rho``."""
    return TabularPolicy(weight * pi.probs + (1.0 - weight) * rho.probs)


def reds_penalty_rho(pi: np.ndarray, rho: np.ndarray, beta: np.ndarray,
                     weight: float = 0.5) -> np.ndarray:
    return (weight * pi + (1.0 - weight) * rho) / beta - 1.0


def reds_penalty_g(pi: np.ndarray, g: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """``(pi + beta * g - 2 beta) / (2 beta)`` for per-action reweighting values ``g``."""
    return (pi + beta * g - 2.0 * beta) / (2.0 * beta)


def reds_backup_closed_form(q_target: np.ndarray, pi: TabularPolicy, rho: Optional[RhoTable],
                            model: EmpiricalModel, cfg: RedsConfig, form: str = "rho",
                            g: Optional[np.ndarray] = None) -> np.ndarray:
    """One ReDS iteration in closed form.

    ``form="rho"`` pushes down under the mixture of ``pi`` and ``rho``.
    ``form="g"`` uses explicit reweighting values; when ``g`` is omitted it is
    ``g_inverse(tau * pi)``.
    """
    t = bellman_target(q_target, pi, model, cfg.gamma)
    if form == "rho":
        pen = reds_penalty_rho(pi.probs, rho.probs, model.beta, cfg.mix_weight)
    elif form == "g":
        g = g_inverse(cfg.tau * pi.probs) if g is None else g
        pen = reds_penalty_g(pi.probs, g, model.beta)
    else:
        raise ValueError(f"unknown form {form!r}")
    cap = q_cap(cfg.gamma)
    return np.clip(t - cfg.alpha * pen, -cap, cap)


def reds_objective_gradient(q: np.ndarray, pi: TabularPolicy, rho: RhoTable,
                            model: EmpiricalModel, cfg: RedsConfig,
                            q_target: Optional[np.ndarray] = None) -> np.ndarray:
    target = bellman_target(q if q_target is None else q_target, pi, model, cfg.gamma)
    pi_re = mixture_pi_re(pi, rho, cfg.mix_weight).probs
    return _objective_gradient(q, target, pi_re, model, cfg.alpha)


def reds_objective(q, target, pi, rho, model, cfg: RedsConfig) -> float:
    return cql_objective(q, target, mixture_pi_re(pi, rho, cfg.mix_weight), model, cfg.alpha)


def awr_policy(model: EmpiricalModel, cfg: AwrConfig,
               mdp: Optional[TabularMdp] = None) -> tuple:
    """One-step AWR: ``pi ∝ beta_hat * exp(clip(A / tau))`` with ``A`` from ``Q^beta_hat``."""
    emdp = _empirical_for(model, cfg.gamma, mdp)
    _, q = policy_evaluation(emdp, model.pi_beta_hat)
    adv = advantages(q, model.pi_beta_hat)
    p = model.beta * _clipped_weights(adv / cfg.tau, cfg.clip_lo, cfg.clip_hi)
    return TabularPolicy(p / p.sum(1, keepdims=True)), q


def _empirical_for(model: EmpiricalModel, gamma: float, mdp: Optional[TabularMdp]) -> TabularMdp:
    n = model.n_states
    init = mdp.initial_dist if mdp is not None else np.full(n, 1.0 / n)
    terminal = mdp.terminal if mdp is not None else frozenset()
    return TabularMdp(model.empirical_transition, model.reward_mean, np.array(init), gamma,
                      terminal)


# --------------------------------------------------------------------------
# Coupled backup / improvement step
# --------------------------------------------------------------------------

def _log_lambert_w_exp(z: np.ndarray) -> np.ndarray:
    """``log W(exp(z))``, i.e. the root ``t`` of ``t + exp(t) = z``."""
    t = np.where(z < 1.0, z, np.log(np.maximum(z, 1.0)))
    for _ in range(100):
        et = np.exp(np.minimum(t, 700.0))
        step = (t + et - z) / (1.0 + et)
        t = t - step
        if np.max(np.abs(step)) < 1e-14:
            break
    return t


def _equilibrium_policy(t_eff: np.ndarray, coef: np.ndarray, active: np.ndarray,
                        beta_ent: float, low_q: float) -> np.ndarray:
    """Per-state solution of ``pi = softmax(Q / beta_ent)``, ``Q = t_eff - coef * pi``.

    Inactive actions have the fixed value ``low_q``.  Each action's
    probability solves ``log pi + k pi = (t_eff - c) / beta_ent`` with
    ``k = coef / beta_ent``; the normaliser ``c`` is found by Newton steps
    safeguarded by a bisection bracket.
    """
    k = coef / beta_ent
    logk = np.log(np.where(k > 0, k, 1.0))

    def probs(c):
        y = (t_eff - c[:, None]) / beta_ent
        with np.errstate(over="ignore"):
            p_plain = np.exp(np.minimum(y, 700.0))
        p_coupled = np.exp(_log_lambert_w_exp(logk + y) - logk)
        p = np.where(k > 0, p_coupled, p_plain)
        p_low = np.exp(np.minimum((low_q - c[:, None]) / beta_ent, 700.0))
        p = np.where(active, p, p_low)
        # d p / d c = -p / (beta_ent * (1 + k p)) on active coupled entries
        slope = np.where(active & (k > 0), p / (1.0 + k * p), p)
        return p, -slope.sum(1) / beta_ent

    nA = t_eff.shape[1]
    t_act = np.where(active, t_eff, -np.inf)
    hi = np.maximum(t_act.max(1), low_q) + beta_ent * np.log(nA) + 1e-12
    lo = np.where(active, t_eff - coef, -np.inf).max(1)
    lo = np.maximum(lo, np.where((~active).any(1), low_q, -np.inf))
    lo = np.minimum(lo, hi - 1e-12)
    c = 0.5 * (lo + hi)
    for _ in range(200):
        p, dsum = probs(c)
        excess = p.sum(1) - 1.0
        lo = np.where(excess > 0, c, lo)
        hi = np.where(excess > 0, hi, c)
        if np.max(np.abs(excess)) < 1e-13:
            break
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = c - excess / dsum
        # roots often sit on the lower edge, where Newton overshoots by rounding
        c_new = np.where(np.isfinite(newton), np.clip(newton, lo, hi), 0.5 * (lo + hi))
        if np.array_equal(c_new, c):
            break
        c = c_new
    p, _ = probs(c)
    return p / p.sum(1, keepdims=True)


def _support_state(model: EmpiricalModel):
    """Actions treated as in support: observed pairs, or every action at an unobserved state."""
    observed = model.observed
    active = np.where(observed[:, None], model.support_mask, True)
    return active, observed


# --------------------------------------------------------------------------
# Trainers
# --------------------------------------------------------------------------

def train(method: str, model: EmpiricalModel, mdp_for_eval: Optional[TabularMdp] = None,
          cfg=None, seed: int = 0, eval_episodes: int = 0, eval_horizon: int = 400,
          callback: Optional[Callable[[Checkpoint], None]] = None) -> List[Checkpoint]:
    """Run one tabular trainer and return its checkpoints.

    ``bc`` and ``awr`` produce a single checkpoint (iteration 0).  The CQL and
    ReDS trainers emit a checkpoint every ``cfg.checkpoint_every`` iterations
    plus the final one.  Actions never seen at an observed state are held at
    ``-2 / (1 - gamma)``.  When ``mdp_for_eval`` and ``eval_episodes`` are
    given, each checkpoint is scored by rollouts in that MDP with seeds derived
    from ``seed``.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")

    def finish(ckpts: List[Checkpoint]) -> List[Checkpoint]:
        if mdp_for_eval is None or eval_episodes <= 0:
            return ckpts
        from .harness import evaluate_policy

        out = []
        for c in ckpts:
            rate, _ = evaluate_policy(mdp_for_eval, c.policy, eval_episodes, eval_horizon,
                                      seed=seed)
            out.append(replace(c, eval_success=rate))
        return out

    if method == "bc":
        cfg = cfg or CqlConfig()
        _, q = policy_evaluation(_empirical_for(model, cfg.gamma, mdp_for_eval), model.pi_beta_hat)
        return finish([Checkpoint(0, q, model.pi_beta_hat)])
    if method == "awr":
        cfg = cfg or AwrConfig()
        pi, q = awr_policy(model, cfg, mdp_for_eval)
        return finish([Checkpoint(0, q, pi)])

    reds = method.startswith("reds")
    if cfg is None:
        cfg = RedsConfig() if reds else CqlConfig()
    if reds and not isinstance(cfg, RedsConfig):
        raise TypeError("ReDS trainers need a RedsConfig")
    closed = method.endswith("closed")
    ckpts = _run_conservative(model, cfg, reds, closed, callback)
    return finish(ckpts)


def _run_conservative(model: EmpiricalModel, cfg, reds: bool, closed: bool,
                      callback=None) -> List[Checkpoint]:
    nS, nA = model.n_states, model.n_actions
    cap = q_cap(cfg.gamma)
    beta = model.beta
    P = model.empirical_transition
    active, observed = _support_state(model)
    pushed = ~active
    w = cfg.mix_weight if reds else 1.0

    q = np.where(pushed, -cap, 0.0)
    pi = soft_policy_improvement(q, cfg.beta_ent)
    rho = None
    ckpts: List[Checkpoint] = []
    for it in range(1, cfg.n_iters + 1):
        if reds:
            rho = fit_rho(model, q, pi, cfg)
        v = (pi.probs * q).sum(1)
        target = _bellman_target_v(v, model, cfg.gamma, P)
        if closed:
            extra = 0.0 if rho is None else (1.0 - w) * rho.probs / beta
            t_eff = target - cfg.alpha * (extra - 1.0)
            coef = cfg.alpha * w / beta
            p = _equilibrium_policy(t_eff, coef, active, cfg.beta_ent, -cap)
            new_pi = TabularPolicy(p)
            if reds:
                pen = reds_penalty_rho(p, rho.probs, beta, w)
            else:
                pen = cql_penalty(p, beta)
            q_new = np.clip(target - cfg.alpha * pen, -cap, cap)
            q_new = np.where(pushed, -cap, q_new)
        else:
            push = pi.probs if rho is None else w * pi.probs + (1.0 - w) * rho.probs
            q_new = q.copy()
            for _ in range(cfg.inner_steps):
                grad = _objective_gradient(q_new, target, push, model, cfg.alpha)
                q_new = q_new - cfg.lr_q * grad
            q_new = np.where(pushed, -cap, np.clip(q_new, -cap, cap))
            new_pi = soft_policy_improvement(q_new, cfg.beta_ent)
        delta = np.max(np.abs(q_new - q))
        q, pi = q_new, new_pi
        done = delta < cfg.tol or it == cfg.n_iters
        if it % cfg.checkpoint_every == 0 or done:
            ck = Checkpoint(it, q.copy(), pi, rho)
            ckpts.append(ck)
            if callback is not None:
                callback(ck)
        if done:
            break
    return ckpts
