"""Experiment orchestration: evaluation, checkpoint selection, sweeps, audits, heatmaps.

Heatmap PGM scaling: binary ``P5``, 8-bit, one pixel per cell, row-major.
Wall cells are 0; a free cell with visitation frequency ``f`` is
``1 + round(254 * f / max_f)`` (so unvisited free cells are 1).
"""

from __future__ import annotations

import csv
import io
import itertools
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .algorithms import (AwrConfig, Checkpoint, CqlConfig, RedsConfig, train)
from .dataset import (EmpiricalModel, OfflineDataset, empirical_mdp, estimate_model,
                      generate_dataset, DEFAULT_EPS_B)
from .mdp import TabularMdp, TabularPolicy, build_gridworld, load_layout
from .metrics import (ConcentrabilityEstimate, DivergenceReport, differential_concentrability,
                      occupancy, per_state_divergence, expected_divergence)


@dataclass(frozen=True, eq=False)
class HeatmapGrid:
    width: int
    height: int
    freq: np.ndarray
    walls: np.ndarray

    def to_pgm(self) -> bytes:
        f = self.freq
        top = f.max()
        scaled = np.zeros_like(f) if top <= 0 else f / top
        pix = np.where(self.walls, 0, 1 + np.rint(254 * scaled)).astype(np.uint8)
        header = f"P5\n{self.width} {self.height}\n255\n".encode()
        return header + pix.tobytes()

    def write_pgm(self, path: Union[str, Path]) -> None:
        Path(path).write_bytes(self.to_pgm())

    def to_svg(self, cell: int = 20) -> str:
        top = self.freq.max() or 1.0
        parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width * cell}" '
                 f'height="{self.height * cell}">']
        for y in range(self.height):
            for x in range(self.width):
                if self.walls[y, x]:
                    color = "#222222"
                else:
                    level = int(round(255 * (1 - self.freq[y, x] / top)))
                    color = f"#ff{level:02x}{level:02x}"
                parts.append(f'<rect x="{x * cell}" y="{y * cell}" width="{cell}" '
                             f'height="{cell}" fill="{color}"/>')
        parts.append("</svg>")
        return "\n".join(parts) + "\n"


def read_pgm(data: bytes) -> np.ndarray:
    """Decode a binary P5 image written by :meth:`HeatmapGrid.to_pgm`."""
    magic, dims, maxval, rest = data.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError("expected an 8-bit P5 image")
    w, h = map(int, dims.split())
    return np.frombuffer(rest, dtype=np.uint8, count=w * h).reshape(h, w)


def heatmap_from_counts(mdp: TabularMdp, counts: np.ndarray) -> HeatmapGrid:
    grid = mdp.grid
    freq = np.zeros((grid.height, grid.width))
    walls = np.zeros((grid.height, grid.width), dtype=bool)
    for (x, y) in grid.walls:
        walls[y, x] = True
    total = counts.sum()
    for s, (x, y) in enumerate(mdp.cells):
        freq[y, x] = counts[s] / total if total > 0 else 0.0
    return HeatmapGrid(grid.width, grid.height, freq, walls)


def evaluate_policy(mdp: TabularMdp, policy: TabularPolicy, episodes: int, horizon: int,
                    seed: int) -> Tuple[float, Optional[HeatmapGrid]]:
    """Success rate (terminal state reached within ``horizon``) and visitation heatmap.

    Episodes run in lockstep from ``mdp.initial_dist`` with one generator
    seeded by ``seed``.  Every episode contributes one visit per time step
    for all ``horizon`` steps; an episode that reached the terminal state keeps
    occupying it, matching the absorbing-state occupancy measure.
    """
    if episodes < 1 or horizon < 1:
        raise ValueError("episodes and horizon must be >= 1")
    rng = np.random.default_rng(seed)
    cum_pi = np.cumsum(policy.probs, axis=1)
    cum_T = np.cumsum(mdp.transition, axis=2)
    terminal = np.zeros(mdp.n_states, dtype=bool)
    terminal[list(mdp.terminal)] = True
    s = np.searchsorted(np.cumsum(mdp.initial_dist), rng.random(episodes), side="right")
    s = np.minimum(s, mdp.n_states - 1)
    alive = ~terminal[s]
    success = terminal[s].copy()
    visits = np.zeros(mdp.n_states)
    nA = mdp.n_actions
    for t in range(horizon):
        np.add.at(visits, s, 1)
        if not alive.any():
            np.add.at(visits, s, horizon - t - 1)
            break
        u = rng.random((episodes, 2))
        a = np.minimum((u[:, :1] >= cum_pi[s]).sum(1), nA - 1)
        s2 = np.minimum((u[:, 1:] >= cum_T[s, a]).sum(1), mdp.n_states - 1)
        s = np.where(alive, s2, s)
        arrived = alive & terminal[s]
        success |= arrived
        alive &= ~arrived
    heat = heatmap_from_counts(mdp, visits) if mdp.grid is not None else None
    return float(success.mean()), heat


def oracle_select(checkpoints: Sequence[Checkpoint]) -> Checkpoint:
    """Highest ``eval_success``; ties go to the earliest iteration."""
    if not checkpoints:
        raise ValueError("no checkpoints")
    best = None
    for ck in sorted(checkpoints, key=lambda c: c.iteration):
        score = -np.inf if ck.eval_success is None else ck.eval_success
        if best is None or score > best[0]:
            best = (score, ck)
    return best[1]


def hallway_components(grid) -> List[List[Tuple[int, int]]]:
    """Connected hallway regions ordered by BFS distance from the start."""
    from_start = grid.distances_to(grid.start)
    cells = [c for c in grid.free_cells() if grid.region_labels[c] == "hallway"]
    remaining, comps = set(cells), []
    for c0 in cells:
        if c0 not in remaining:
            continue
        comp, stack = [], [c0]
        remaining.discard(c0)
        while stack:
            c = stack.pop()
            comp.append(c)
            for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                n = (c[0] + dx, c[1] + dy)
                if n in remaining:
                    remaining.discard(n)
                    stack.append(n)
        comps.append(sorted(comp, key=lambda c: (c[1], c[0])))
    comps.sort(key=lambda comp: min(from_start.get(c, 10**9) for c in comp))
    return comps


def cells_past_hallway(grid, index: int = 1) -> List[Tuple[int, int]]:
    """Free cells beyond the ``index``-th connecting hallway (0-based).

    Connecting hallways are hallway regions containing neither the start nor
    the goal.  "Beyond" means connected to the goal once that hallway is
    removed from the grid.
    """
    connecting = [c for c in hallway_components(grid)
                  if grid.start not in c and grid.goal not in c]
    if index >= len(connecting):
        raise ValueError(f"layout has only {len(connecting)} connecting hallways")
    blocked = set(connecting[index])
    seen, stack = {grid.goal}, [grid.goal]
    while stack:
        c = stack.pop()
        for a in range(4):
            n = grid.step(c, a)
            if n not in seen and n not in blocked:
                seen.add(n)
                stack.append(n)
    return sorted(seen, key=lambda c: (c[1], c[0]))


def mass_past_hallway(heat: HeatmapGrid, grid, index: int = 1) -> float:
    total = heat.freq.sum()
    if total <= 0:
        return 0.0
    return float(sum(heat.freq[y, x] for x, y in cells_past_hallway(grid, index)) / total)


# --------------------------------------------------------------------------
# Experiment configuration and runs
# --------------------------------------------------------------------------

METHOD_ALIASES = {"cql": "cql_closed", "reds": "reds_closed"}


def canonical_method(method: str) -> str:
    return METHOD_ALIASES.get(method, method)


def method_config(method: str, params: Mapping[str, float], gamma: float = 0.99):
    """Build the config dataclass for ``method``; unknown keys raise ``ValueError``."""
    method = canonical_method(method)
    if method == "awr":
        cls = AwrConfig
    elif method.startswith("reds"):
        cls = RedsConfig
    else:
        cls = CqlConfig
    names = set(cls.__dataclass_fields__)
    unknown = sorted(set(params) - names)
    if unknown:
        raise ValueError(f"unknown {method} parameters: {unknown}")
    kwargs = dict(params)
    kwargs.setdefault("gamma", gamma)
    for key in ("n_iters", "inner_steps", "checkpoint_every"):
        if key in kwargs:
            kwargs[key] = int(kwargs[key])
    return cls(**kwargs)


@dataclass(frozen=True)
class ExperimentConfig:
    """One training run on one dataset, evaluated under several seeds.

    ``dataset_path`` takes precedence over the generation fields.  Trainers
    are deterministic, so ``seeds`` only drive evaluation rollouts.
    """

    method: str = "reds"
    params: Mapping[str, float] = field(default_factory=dict)
    layout: str = "didactic-24x16"
    variant: str = "didactic"
    n_traj: int = 1000
    data_horizon: int = 400
    data_seed: int = 7
    gamma: float = 0.99
    eps_b: float = DEFAULT_EPS_B
    dataset_path: Optional[str] = None
    seeds: Tuple[int, ...] = (0, 1, 2)
    eval_episodes: int = 100
    eval_horizon: int = 400
    out_dir: Optional[str] = None

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.eval_episodes < 1 or self.eval_horizon < 1:
            raise ValueError("eval_episodes and eval_horizon must be >= 1")
        if self.n_traj < 1:
            raise ValueError("n_traj must be >= 1")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "params", dict(self.params))
        method_config(self.method, self.params, self.gamma)

    @property
    def label(self) -> str:
        parts = [canonical_method(self.method).replace("_closed", "")]
        parts += [f"{k}={self.params[k]:g}" for k in sorted(self.params)]
        return "_".join(parts)


@dataclass(frozen=True, eq=False)
class RunResult:
    config: ExperimentConfig
    successes: Tuple[float, ...]
    mean: float
    std: float
    selected_iters: Tuple[int, ...]
    divergence: DivergenceReport
    concentrability: ConcentrabilityEstimate
    heatmap: Optional[HeatmapGrid] = None
    checkpoints: Tuple[Checkpoint, ...] = ()

    @property
    def selected_iter(self) -> int:
        return self.selected_iters[0]


_DATA_CACHE: Dict[tuple, tuple] = {}


def load_problem(cfg: ExperimentConfig) -> Tuple[TabularMdp, EmpiricalModel, OfflineDataset]:
    """True MDP, empirical model and dataset for ``cfg`` (memoised per process)."""
    key = (cfg.dataset_path, cfg.layout, cfg.variant, cfg.n_traj, cfg.data_horizon,
           cfg.data_seed, cfg.gamma, cfg.eps_b)
    if key not in _DATA_CACHE:
        if cfg.dataset_path is not None:
            data = OfflineDataset.load(cfg.dataset_path)
            if data.meta is None:
                raise ValueError(f"{cfg.dataset_path}: dataset header lacks metadata")
            mdp = build_gridworld(data.meta.grid(), data.meta.gamma)
        else:
            mdp, _, data = generate_dataset(layout=cfg.layout, variant=cfg.variant,
                                            n_traj=cfg.n_traj, horizon=cfg.data_horizon,
                                            seed=cfg.data_seed, gamma=cfg.gamma)
        model = estimate_model(data, mdp.n_states, mdp.n_actions, cfg.eps_b)
        _DATA_CACHE[key] = (mdp, model, data)
    return _DATA_CACHE[key]


def run_experiment(cfg: ExperimentConfig, keep_checkpoints: bool = False) -> RunResult:
    """Train once, select a checkpoint per seed by evaluation success, and audit the final policy."""
    mdp, model, _ = load_problem(cfg)
    method = canonical_method(cfg.method)
    mcfg = method_config(method, cfg.params, cfg.gamma)
    ckpts = train(method, model, None, mcfg)
    successes, selected, heat = [], [], None
    for seed in cfg.seeds:
        scored = []
        for ck in ckpts:
            rate, _ = evaluate_policy(mdp, ck.policy, cfg.eval_episodes, cfg.eval_horizon, seed)
            scored.append(replace(ck, eval_success=rate))
        best = oracle_select(scored)
        successes.append(best.eval_success)
        selected.append(best.iteration)
        if heat is None:
            _, heat = evaluate_policy(mdp, best.policy, cfg.eval_episodes, cfg.eval_horizon, seed)
    final = ckpts[-1].policy
    report, conc = _audit(model, mdp, final)
    arr = np.array(successes)
    return RunResult(cfg, tuple(successes), float(arr.mean()), float(arr.std()), tuple(selected),
                     report, conc, heat, tuple(ckpts) if keep_checkpoints else ())


def _run_cell(cfg: ExperimentConfig) -> RunResult:
    return run_experiment(cfg)


def expand_grid(base: ExperimentConfig, grid: Mapping[str, Sequence]) -> List[ExperimentConfig]:
    """Cartesian product of ``grid`` applied to ``base``.

    Keys naming :class:`ExperimentConfig` fields replace those fields; any
    other key is a method parameter.  An empty grid yields ``[base]``.
    """
    keys = list(grid)
    fields = set(ExperimentConfig.__dataclass_fields__) - {"params"}
    cells = []
    for values in itertools.product(*(grid[k] for k in keys)):
        top, params = {}, dict(base.params)
        for k, v in zip(keys, values):
            (top if k in fields else params)[k] = v
        cells.append(replace(base, params=params, **top))
    return cells


def sweep(base: ExperimentConfig, grid: Mapping[str, Sequence], jobs: int = 1,
          results_csv: Optional[Union[str, Path]] = None) -> List[RunResult]:
    """Run every cell of the grid; results keep grid order regardless of ``jobs``."""
    cells = expand_grid(base, grid)
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, cells))
    else:
        results = [_run_cell(c) for c in cells]
    if results_csv is not None:
        Path(results_csv).write_text(results_table(results))
    return results


def results_table(results: Sequence[RunResult]) -> str:
    """Per-seed CSV: method, one column per parameter, seed, success, std_D, max_D, C_diff, selected_iter."""
    pkeys = sorted({k for r in results for k in r.config.params})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", *pkeys, "seed", "success", "std_D", "max_D", "C_diff", "selected_iter"])
    for r in results:
        for seed, succ, it in zip(r.config.seeds, r.successes, r.selected_iters):
            w.writerow([canonical_method(r.config.method),
                        *(r.config.params.get(k, "") for k in pkeys), seed, f"{succ:.4f}",
                        f"{r.divergence.std:.6g}", f"{r.divergence.max:.6g}",
                        f"{r.concentrability.value:.6g}", it])
    return buf.getvalue()


# --------------------------------------------------------------------------
# Audits
# --------------------------------------------------------------------------

def _audit(model: EmpiricalModel, mdp: TabularMdp, policy: TabularPolicy,
           estimator: str = "exact_tabular", n_pairs: int = 100_000,
           seed: int = 0) -> Tuple[DivergenceReport, ConcentrabilityEstimate]:
    report = per_state_divergence(policy, model)
    d_pi = occupancy(empirical_mdp(model, mdp), policy)
    conc = differential_concentrability(policy, model, d_pi, estimator, n_pairs, seed)
    return report, conc


def audit_heteroskedasticity(dataset: OfflineDataset, policy: TabularPolicy,
                             mdp: Optional[TabularMdp] = None, eps_b: float = DEFAULT_EPS_B,
                             estimator: str = "exact_tabular", n_pairs: int = 100_000,
                             seed: int = 0) -> Tuple[DivergenceReport, ConcentrabilityEstimate]:
    """Per-state ``D(pi, beta_hat)`` over dataset states and ``C_diff`` under the empirical MDP."""
    if mdp is None:
        if dataset.meta is None:
            raise ValueError("an MDP is required for datasets without metadata")
        mdp = build_gridworld(dataset.meta.grid(), dataset.meta.gamma)
    model = estimate_model(dataset, mdp.n_states, mdp.n_actions, eps_b)
    return _audit(model, mdp, policy, estimator, n_pairs, seed)


def reference_policy(layout: str = "didactic-24x16", n_traj: int = 1000, horizon: int = 400,
                     seed: int = 7, alpha: float = 1.0, gamma: float = 0.99,
                     eps_b: float = DEFAULT_EPS_B) -> TabularPolicy:
    """Shared audit policy: closed-form CQL trained on the homogeneous dataset.

    Training on uniform-behavior data keeps the policy independent of the
    action distributions of the datasets being compared.
    """
    mdp, _, data = generate_dataset(layout=layout, variant="homogeneous", n_traj=n_traj,
                                    horizon=horizon, seed=seed, gamma=gamma)
    model = estimate_model(data, mdp.n_states, mdp.n_actions, eps_b)
    return train("cql_closed", model, None, CqlConfig(alpha=alpha, gamma=gamma))[-1].policy


def monotonicity_check(model: EmpiricalModel, mdp: TabularMdp, alpha_grid: Sequence[float],
                       base: Optional[CqlConfig] = None) -> List[Tuple[float, float]]:
    """Rows ``(alpha, E_{s ~ d_hat^pi} D(pi_alpha, beta_hat)(s))`` for converged CQL policies.

    ``d_hat^pi`` is the discounted occupancy of ``pi_alpha`` from the initial
    distribution of ``mdp`` under the empirical dynamics.
    """
    base = base or CqlConfig(gamma=mdp.gamma)
    emdp = empirical_mdp(model, mdp)
    rows = []
    for alpha in alpha_grid:
        pi = train("cql_closed", model, None, replace(base, alpha=float(alpha)))[-1].policy
        rows.append((float(alpha), expected_divergence(pi, model, occupancy(emdp, pi))))
    return rows


def is_non_increasing(rows: Sequence[Tuple[float, float]], rel_slack: float = 0.05) -> bool:
    """Each value is at most ``(1 + rel_slack)`` times its predecessor."""
    vals = [v for _, v in sorted(rows)]
    return all(b <= a * (1.0 + rel_slack) + 1e-15 for a, b in zip(vals, vals[1:]))


# --------------------------------------------------------------------------
# Didactic reproduction
# --------------------------------------------------------------------------

AWR_TAUS = (0.1, 0.3, 1.0)
CQL_ALPHAS = (0.1, 1.0, 5.0, 10.0)


def reproduce_didactic(out_dir: Union[str, Path], base: Optional[ExperimentConfig] = None,
                       awr_taus: Sequence[float] = AWR_TAUS,
                       cql_alphas: Sequence[float] = CQL_ALPHAS,
                       reds_params: Optional[Mapping[str, float]] = None,
                       jobs: int = 1) -> List[RunResult]:
    """AWR sweep, CQL sweep and one ReDS run with heatmaps and a comparison table.

    Writes ``results.csv`` (per seed), ``comparison.csv`` (one row per run),
    ``summary.json`` and ``heatmaps/<label>.{pgm,svg}``.
    """
    out = Path(out_dir)
    (out / "heatmaps").mkdir(parents=True, exist_ok=True)
    base = base or ExperimentConfig()
    cells = expand_grid(replace(base, method="awr", params={}), {"tau": list(awr_taus)})
    cells += expand_grid(replace(base, method="cql", params={}), {"alpha": list(cql_alphas)})
    cells.append(replace(base, method="reds", params=dict(reds_params or {})))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, cells))
    else:
        results = [_run_cell(c) for c in cells]

    mdp, _, _ = load_problem(base)
    (out / "results.csv").write_text(results_table(results))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "method", "mean_success", "std_success", "mass_past_second_hallway",
                "std_D", "max_D", "C_diff", "selected_iter"])
    summary = []
    for r in results:
        r.heatmap.write_pgm(out / "heatmaps" / f"{r.config.label}.pgm")
        (out / "heatmaps" / f"{r.config.label}.svg").write_text(r.heatmap.to_svg())
        past = mass_past_hallway(r.heatmap, mdp.grid)
        w.writerow([r.config.label, canonical_method(r.config.method), f"{r.mean:.4f}",
                    f"{r.std:.4f}", f"{past:.4f}", f"{r.divergence.std:.6g}",
                    f"{r.divergence.max:.6g}", f"{r.concentrability.value:.6g}",
                    r.selected_iter])
        summary.append({"label": r.config.label, "mean_success": r.mean, "std_success": r.std,
                        "successes": list(r.successes), "mass_past_second_hallway": past})
    (out / "comparison.csv").write_text(buf.getvalue())
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return results
