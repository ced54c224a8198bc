"""Divergences, per-state divergence profiles and differential concentrability."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from .dataset import EmpiricalModel
from .mdp import TabularMdp, TabularPolicy

Divergence = Callable[[np.ndarray, np.ndarray], np.ndarray]


class DivisionBySupportGap(ZeroDivisionError):
    """``q`` is zero where ``p`` has mass."""


def d_cql(p, q) -> float:
    """``sum_x p(x) (p(x) / q(x) - 1)``, equivalently ``sum_x p^2 / q - 1``."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError("p and q must have the same support size")
    gap = (q <= 0) & (p > 0)
    if gap.any():
        raise DivisionBySupportGap("q is zero where p is positive; floor q first")
    m = p > 0
    return float(np.sum(p[m] * (p[m] / q[m] - 1.0)) + np.sum(q[~m] * 0.0))


def d_cql_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise ``d_cql`` for ``[state, action]`` tables."""
    if ((q <= 0) & (p > 0)).any():
        raise DivisionBySupportGap("q is zero where p is positive; floor q first")
    ratio = np.divide(p, q, out=np.zeros_like(p, dtype=float), where=p > 0)
    return np.sum(p * (ratio - 1.0), axis=1)


def kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        logr = np.where(p > 0, np.log(np.where(p > 0, p, 1.0) / q), 0.0)
    return np.sum(p * logr, axis=1)


@dataclass(frozen=True, eq=False)
class DivergenceReport:
    per_state: np.ndarray
    counted: np.ndarray
    std: float
    max: float
    mean: float
    states_counted: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["state", "D", "counted"])
        for s, (d, c) in enumerate(zip(self.per_state, self.counted)):
            w.writerow([s, repr(float(d)), int(c)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "DivergenceReport":
        rows = list(csv.DictReader(io.StringIO(text)))
        d = np.array([float(r["D"]) for r in rows])
        counted = np.array([bool(int(r["counted"])) for r in rows])
        return summarize_divergence(d, counted)

    def summary(self) -> dict:
        return {"std": self.std, "max": self.max, "mean": self.mean,
                "states_counted": self.states_counted}


def summarize_divergence(per_state: np.ndarray, counted: np.ndarray) -> DivergenceReport:
    vals = per_state[counted]
    if len(vals) == 0:
        return DivergenceReport(per_state, counted, 0.0, 0.0, 0.0, 0)
    return DivergenceReport(per_state, counted, float(vals.std()), float(vals.max()),
                            float(vals.mean()), int(counted.sum()))


def per_state_divergence(pi: TabularPolicy, model: EmpiricalModel,
                         divergence: Divergence = d_cql_rows) -> DivergenceReport:
    """``D(pi, beta_hat)(s)`` at every state with ``mu_hat(s) > 0``.

    ``std`` is the population standard deviation over the counted states,
    each distinct state weighted equally.
    """
    per_state = np.maximum(divergence(pi.probs, model.beta), 0.0)
    counted = model.mu_hat > 0
    return summarize_divergence(np.where(counted, per_state, 0.0), counted)


@dataclass(frozen=True)
class ConcentrabilityEstimate:
    value: float
    n_pairs: int
    estimator: str
    stderr: float = 0.0
    seed: Optional[int] = None


def _scaled_root(d_values: np.ndarray, mu: np.ndarray, floor: float) -> np.ndarray:
    return np.sqrt(np.maximum(d_values, 0.0) / np.maximum(mu, floor))


def differential_concentrability_from_values(d_values: np.ndarray, mu: np.ndarray,
                                             d_pi: np.ndarray, mode: str = "exact_tabular",
                                             n_pairs: int = 100_000, seed: int = 0,
                                             floor: float = 1e-4) -> ConcentrabilityEstimate:
    """``E_{s1, s2 ~ d_pi} (sqrt(D/mu)(s1) - sqrt(D/mu)(s2))^2`` with ``mu`` floored."""
    d_pi = np.asarray(d_pi, dtype=float)
    if (d_pi < 0).any() or abs(d_pi.sum() - 1.0) > 1e-6:
        raise ValueError("d_pi must be a probability vector")
    x = _scaled_root(np.asarray(d_values, dtype=float), np.asarray(mu, dtype=float), floor)
    if mode == "exact_tabular":
        diff = (x[:, None] - x[None, :]) ** 2
        n = len(x)
        return ConcentrabilityEstimate(float(d_pi @ diff @ d_pi), n * n, mode)
    if mode == "sampled_pairs":
        rng = np.random.default_rng(seed)
        p = d_pi / d_pi.sum()
        s1 = rng.choice(len(x), size=n_pairs, p=p)
        s2 = rng.choice(len(x), size=n_pairs, p=p)
        terms = (x[s1] - x[s2]) ** 2
        se = float(terms.std(ddof=1) / np.sqrt(n_pairs)) if n_pairs > 1 else 0.0
        return ConcentrabilityEstimate(float(terms.mean()), n_pairs, mode, se, seed)
    raise ValueError(f"unknown mode {mode!r}")


def differential_concentrability(pi: TabularPolicy, model: EmpiricalModel, d_pi: np.ndarray,
                                 mode: str = "exact_tabular", n_pairs: int = 100_000,
                                 seed: int = 0,
                                 divergence: Divergence = d_cql_rows) -> ConcentrabilityEstimate:
    d_values = divergence(pi.probs, model.beta)
    return differential_concentrability_from_values(d_values, model.mu_hat, d_pi, mode,
                                                    n_pairs, seed, model.eps_b)


def occupancy(mdp: TabularMdp, policy: TabularPolicy, tol: float = 1e-12,
              max_iter: int = 1_000_000) -> np.ndarray:
    """Normalised discounted state occupancy from ``mdp.initial_dist``.

    Iterates ``d <- (1 - gamma) mu0 + gamma P_pi^T d`` to a fixed point.
    """
    P_pi = np.einsum("sa,sat->st", policy.probs, mdp.transition)
    g = mdp.gamma
    d = np.array(mdp.initial_dist, dtype=float)
    base = (1.0 - g) * d
    for _ in range(max_iter):
        d_new = base + g * (P_pi.T @ d)
        if np.max(np.abs(d_new - d)) <= tol:
            d = d_new
            break
        d = d_new
    return d / d.sum()


def expected_divergence(pi: TabularPolicy, model: EmpiricalModel, d_pi: np.ndarray,
                        divergence: Divergence = d_cql_rows) -> float:
    """``E_{s ~ d_pi} D(pi, beta_hat)(s)``."""
    return float(d_pi @ divergence(pi.probs, model.beta))


def export_report(report: DivergenceReport, conc: Optional[ConcentrabilityEstimate],
                  out_dir: Union[str, Path], stem: str = "divergence") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.csv").write_text(report.to_csv())
    summary = report.summary()
    summary["C_diff"] = None if conc is None else conc.value
    summary["C_diff_estimator"] = None if conc is None else conc.estimator
    (out / f"{stem}.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
