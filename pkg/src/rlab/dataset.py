"""Heteroskedastic behavior policies, offline dataset collection and count-based models.

Dataset file format (JSON lines)::

    {"type": "header", "layout": ..., "behavior": {...}, "n_traj": ..., ...}
    {"s": 12, "a": 3, "r": 0, "s2": 13, "done": 0}
    ...

Trajectory ``i`` draws all of its randomness from
``np.random.default_rng(np.random.SeedSequence(seed).spawn(n_traj)[i])``, so
datasets can be regenerated bit-exactly from the header alone.
"""

from __future__ import annotations

import bisect
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .mdp import (ACTION_DELTAS, DOWN, HALLWAY, NOOP, ROOM, UP, Cell, GridSpec,
                  TabularMdp, TabularPolicy, Transition, build_gridworld, load_layout,
                  parse_layout)

VARIANTS = ("didactic", "noisy", "biased", "homogeneous")
DEFAULT_EPS_B = 1e-4
DEFAULT_N_TRAJ = 1000


class EmptyDatasetError(ValueError):
    pass


@dataclass(frozen=True)
class BehaviorSpec:
    """Region-dependent behavior policy.

    Hallway cells put ``1 - noise_eps`` on the shortest-path action and spread
    ``noise_eps`` over the other actions.  Room cells mix a uniform policy
    (weight ``w_uniform``) with a biased one (weight ``w_biased``) that puts
    ``bias_strength`` on the room's bias action and splits the remainder over
    the other actions.  The bias action is chosen per room by
    ``room_bias_dirs``: ``"away"`` (vertical step away from the room exit),
    ``"toward"`` (vertical step toward the exit) or ``"goal"`` (per-cell
    shortest-path action).  A room's ``noise_eps`` then mixes in a uniform
    policy on top.

    ``noise_eps`` keys are ``"hallway"``, ``"room"`` or ``"room:<k>"`` where
    rooms are numbered by increasing distance from the start.
    """

    variant: str = "didactic"
    w_uniform: float = 0.0
    w_biased: float = 1.0
    bias_strength: float = 0.8
    noise_eps: Dict[str, float] = field(default_factory=dict)
    room_bias_dirs: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if abs(self.w_uniform + self.w_biased - 1.0) > 1e-9:
            raise ValueError("w_uniform + w_biased must equal 1")
        if min(self.w_uniform, self.w_biased) < 0:
            raise ValueError("mixture weights must be non-negative")
        if not 0.0 <= self.bias_strength <= 1.0:
            raise ValueError("bias_strength must lie in [0, 1]")
        for key, eps in self.noise_eps.items():
            if not 0.0 <= eps <= 1.0:
                raise ValueError(f"noise_eps[{key!r}] must lie in [0, 1]")
        for key, d in self.room_bias_dirs.items():
            if d not in ("away", "toward", "goal"):
                raise ValueError(f"room_bias_dirs[{key!r}] must be away/toward/goal")

    def eps_for(self, region: str, room_index: Optional[int] = None) -> float:
        if room_index is not None and f"room:{room_index}" in self.noise_eps:
            return self.noise_eps[f"room:{room_index}"]
        return self.noise_eps.get(region, 0.0)

    def dir_for(self, room_index: int) -> str:
        return self.room_bias_dirs.get(str(room_index), self.room_bias_dirs.get("*", "away"))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BehaviorSpec":
        return cls(**d)


def behavior_preset(variant: str, **overrides) -> BehaviorSpec:
    """Default behavior for each dataset variant.

    ``didactic``: deterministic hallways; rooms mix uniform (0.75) with a policy
    biased 0.8 away from the exit (0.25).
    ``noisy``: shortest-path action everywhere with room noise 0.1 / 0.4 / 0.7.
    ``biased``: the didactic room mixture with the bias alternating away /
    toward the exit, hallway noise 0.1.
    ``homogeneous``: the uniform policy at every state.
    """
    presets = {
        "didactic": dict(w_uniform=0.75, w_biased=0.25),
        "noisy": dict(
            w_uniform=0.0, w_biased=1.0, bias_strength=1.0,
            noise_eps={"hallway": 0.0, "room:0": 0.1, "room:1": 0.4, "room:2": 0.7},
            room_bias_dirs={"*": "goal"},
        ),
        "biased": dict(
            w_uniform=0.75, w_biased=0.25, bias_strength=0.8,
            noise_eps={"hallway": 0.1},
            room_bias_dirs={"0": "away", "1": "toward", "2": "away", "*": "toward"},
        ),
        "homogeneous": dict(w_uniform=1.0, w_biased=0.0, noise_eps={"hallway": 0.8}),
    }
    if variant not in presets:
        raise ValueError(f"unknown variant {variant!r}")
    kwargs = {**presets[variant], **overrides}
    return BehaviorSpec(variant=variant, **kwargs)


def _room_components(grid: GridSpec) -> List[List[Cell]]:
    """Connected room regions, ordered by BFS distance of their nearest cell from the start."""
    rooms = [c for c in grid.free_cells() if grid.region_labels[c] == ROOM]
    remaining = set(rooms)
    comps = []
    for seed_cell in rooms:
        if seed_cell not in remaining:
            continue
        comp, stack = [], [seed_cell]
        remaining.discard(seed_cell)
        while stack:
            c = stack.pop()
            comp.append(c)
            for dx, dy in ACTION_DELTAS[:4]:
                n = (c[0] + dx, c[1] + dy)
                if n in remaining:
                    remaining.discard(n)
                    stack.append(n)
        comps.append(sorted(comp, key=lambda c: (c[1], c[0])))
    from_start = grid.distances_to(grid.start)
    comps.sort(key=lambda comp: (min(from_start.get(c, 10**9) for c in comp), comp[0][1], comp[0][0]))
    return comps


def shortest_path_actions(grid: GridSpec) -> Dict[Cell, int]:
    """For every cell, the lowest-index action that decreases BFS distance to the goal."""
    dist = grid.distances_to(grid.goal)
    out = {}
    for cell in grid.free_cells():
        if cell == grid.goal or cell not in dist:
            out[cell] = NOOP
            continue
        for a in range(4):
            if dist.get(grid.step(cell, a), 10**9) < dist[cell]:
                out[cell] = a
                break
    return out


def room_away_actions(grid: GridSpec) -> Dict[int, int]:
    """Per room, the vertical action pointing away from the room's exit toward the goal."""
    dist = grid.distances_to(grid.goal)
    out = {}
    for k, comp in enumerate(_room_components(grid)):
        exit_cell = min(comp, key=lambda c: (dist.get(c, 10**9), c[1], c[0]))
        mean_y = float(np.mean([c[1] for c in comp]))
        out[k] = UP if exit_cell[1] >= mean_y else DOWN
    return out


def region_map(grid: GridSpec) -> Dict[Cell, Tuple[str, Optional[int]]]:
    """Cell -> (region label, room index or None)."""
    out: Dict[Cell, Tuple[str, Optional[int]]] = {}
    for k, comp in enumerate(_room_components(grid)):
        for c in comp:
            out[c] = (ROOM, k)
    for c in grid.free_cells():
        label = grid.region_labels.get(c)
        if label is None:
            raise ValueError(f"missing region label for cell {c}")
        if label == HALLWAY:
            out[c] = (HALLWAY, None)
    return out


def _one_hot_rest(n: int, a: int, p_main: float) -> np.ndarray:
    row = np.full(n, (1.0 - p_main) / (n - 1))
    row[a] = p_main
    return row


def make_behavior_policy(mdp: TabularMdp, spec: BehaviorSpec) -> TabularPolicy:
    """Build the behavior policy described by ``spec`` on a gridworld MDP."""
    grid = mdp.grid
    if grid is None:
        raise ValueError("behavior policies need a gridworld MDP")
    missing = [c for c in grid.free_cells() if c not in grid.region_labels]
    if missing:
        raise ValueError(f"missing region label for cell {missing[0]}")
    nA = mdp.n_actions
    uniform = np.full(nA, 1.0 / nA)
    toward = shortest_path_actions(grid)
    away = room_away_actions(grid)
    regions = region_map(grid)
    probs = np.zeros((mdp.n_states, nA))
    for s, cell in enumerate(mdp.cells):
        if cell not in regions:
            raise ValueError(f"missing region label for cell {cell}")
        region, k = regions[cell]
        if region == HALLWAY:
            probs[s] = _one_hot_rest(nA, toward[cell], 1.0 - spec.eps_for(HALLWAY))
            continue
        direction = spec.dir_for(k)
        if direction == "away":
            bias_a = away[k]
        elif direction == "toward":
            bias_a = UP if away[k] == DOWN else DOWN
        else:
            bias_a = toward[cell]
        biased = _one_hot_rest(nA, bias_a, spec.bias_strength)
        base = spec.w_uniform * uniform + spec.w_biased * biased
        eps = spec.eps_for(ROOM, k)
        probs[s] = (1.0 - eps) * base + eps * uniform
    return TabularPolicy(probs)


@dataclass(frozen=True)
class DatasetMeta:
    layout: str
    behavior: BehaviorSpec
    n_traj: int
    horizon: int
    seed: int
    gamma: float
    start_mode: str = "uniform"
    layout_ascii: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["behavior"] = self.behavior.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetMeta":
        d = dict(d)
        d["behavior"] = BehaviorSpec.from_dict(d["behavior"])
        return cls(**d)

    def grid(self) -> GridSpec:
        if self.layout_ascii:
            return parse_layout(self.layout_ascii, name=self.layout)
        return load_layout(self.layout)


@dataclass(frozen=True, eq=False)
class OfflineDataset:
    """Transitions stored column-wise as integer arrays."""

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s2: np.ndarray
    done: np.ndarray
    meta: Optional[DatasetMeta] = None

    def __len__(self) -> int:
        return len(self.s)

    def transitions(self) -> List[Transition]:
        return [Transition(int(s), int(a), float(r), int(s2), bool(d))
                for s, a, r, s2, d in zip(self.s, self.a, self.r, self.s2, self.done)]

    def save(self, path: Union[str, Path]) -> None:
        path = Path(path)
        with path.open("w") as f:
            header = {"type": "header", **(self.meta.to_dict() if self.meta else {})}
            f.write(json.dumps(header, sort_keys=True) + "\n")
            for s, a, r, s2, d in zip(self.s.tolist(), self.a.tolist(), self.r.tolist(),
                                      self.s2.tolist(), self.done.tolist()):
                f.write(f'{{"s": {s}, "a": {a}, "r": {r}, "s2": {s2}, "done": {d}}}\n')

    @classmethod
    def load(cls, path: Union[str, Path]) -> "OfflineDataset":
        with Path(path).open() as f:
            header = json.loads(f.readline())
            if header.pop("type", None) != "header":
                raise ValueError(f"{path}: first line must be the metadata header")
            rows = [json.loads(line) for line in f if line.strip()]
        meta = DatasetMeta.from_dict(header) if header else None
        cols = {k: np.array([row[k] for row in rows], dtype=np.int64)
                for k in ("s", "a", "r", "s2", "done")}
        return cls(meta=meta, **cols)


class _Sampler:
    """Inverse-CDF sampler over a fixed MDP and policy, using ``bisect`` on plain lists."""

    def __init__(self, mdp: TabularMdp, policy: TabularPolicy):
        self.cum_pi = [list(np.cumsum(row)) for row in policy.probs]
        self.next = []
        for s in range(mdp.n_states):
            rows = []
            for a in range(mdp.n_actions):
                nz = np.flatnonzero(mdp.transition[s, a])
                rows.append((nz.tolist(), np.cumsum(mdp.transition[s, a, nz]).tolist()))
            self.next.append(rows)
        self.reward = mdp.reward.tolist()
        self.terminal = mdp.terminal
        self.nA = mdp.n_actions

    def run(self, s: int, horizon: int, rng: np.random.Generator):
        u = rng.random((horizon, 2)).tolist()
        out = []
        for t in range(horizon):
            a = min(bisect.bisect_right(self.cum_pi[s], u[t][0]), self.nA - 1)
            states, cum = self.next[s][a]
            s2 = states[min(bisect.bisect_right(cum, u[t][1]), len(states) - 1)]
            done = s2 in self.terminal
            out.append((s, a, self.reward[s][a], s2, done))
            if done:
                break
            s = s2
        return out


def collect_dataset(mdp: TabularMdp, behavior: TabularPolicy, n_traj: int, horizon: int,
                    seed: int, start_mode: str = "uniform",
                    meta: Optional[DatasetMeta] = None) -> OfflineDataset:
    """Roll out ``n_traj`` behavior trajectories.

    ``start_mode="uniform"`` starts each trajectory at a uniformly drawn
    non-terminal state; ``"initial"`` uses the MDP's initial distribution.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if start_mode not in ("uniform", "initial"):
        raise ValueError(f"unknown start_mode {start_mode!r}")
    sampler = _Sampler(mdp, behavior)
    starts = np.array([s for s in range(mdp.n_states) if s not in mdp.terminal])
    records = []
    for child in np.random.SeedSequence(seed).spawn(n_traj):
        rng = np.random.default_rng(child)
        if start_mode == "uniform":
            s0 = int(starts[rng.integers(len(starts))])
        else:
            s0 = int(np.searchsorted(np.cumsum(mdp.initial_dist), rng.random(), side="right"))
        records.extend(sampler.run(s0, horizon, rng))
    arr = np.array([(s, a, r, s2, d) for s, a, r, s2, d in records], dtype=np.int64)
    return OfflineDataset(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], arr[:, 4], meta)


def generate_dataset(layout: str = "didactic-24x16", variant: str = "didactic",
                     n_traj: int = DEFAULT_N_TRAJ, horizon: int = 400, seed: int = 7,
                     gamma: float = 0.99, behavior: Optional[BehaviorSpec] = None,
                     start_mode: str = "uniform") -> Tuple[TabularMdp, TabularPolicy, OfflineDataset]:
    """Build the layout, its behavior policy and a dataset, recording full metadata."""
    grid = load_layout(layout)
    mdp = build_gridworld(grid, gamma)
    spec = behavior if behavior is not None else behavior_preset(variant)
    pi_b = make_behavior_policy(mdp, spec)
    meta = DatasetMeta(layout=grid.name, behavior=spec, n_traj=n_traj, horizon=horizon,
                       seed=seed, gamma=gamma, start_mode=start_mode,
                       layout_ascii=grid.to_ascii())
    data = collect_dataset(mdp, pi_b, n_traj, horizon, seed, start_mode, meta)
    return mdp, pi_b, data


def regenerate(meta: DatasetMeta) -> OfflineDataset:
    """Rebuild a dataset from its metadata header."""
    mdp = build_gridworld(meta.grid(), meta.gamma)
    pi_b = make_behavior_policy(mdp, meta.behavior)
    return collect_dataset(mdp, pi_b, meta.n_traj, meta.horizon, meta.seed, meta.start_mode, meta)


@dataclass(frozen=True, eq=False)
class EmpiricalModel:
    pi_beta_hat: TabularPolicy
    mu_hat: np.ndarray
    counts: np.ndarray
    next_counts: np.ndarray
    reward_sum: np.ndarray
    support_mask: np.ndarray
    eps_b: float

    @property
    def n_states(self) -> int:
        return self.counts.shape[0]

    @property
    def n_actions(self) -> int:
        return self.counts.shape[1]

    @property
    def state_counts(self) -> np.ndarray:
        return self.counts.sum(1)

    @property
    def observed(self) -> np.ndarray:
        """States that appear as the source of at least one transition."""
        return self.state_counts > 0

    @property
    def empirical_transition(self) -> np.ndarray:
        n = self.counts[..., None].astype(float)
        T = np.divide(self.next_counts, n, out=np.zeros(self.next_counts.shape), where=n > 0)
        unseen = ~self.support_mask
        T[unseen] = 0.0
        for s, a in zip(*np.nonzero(unseen)):
            T[s, a, s] = 1.0
        return T

    @property
    def reward_mean(self) -> np.ndarray:
        return np.divide(self.reward_sum, self.counts, out=np.zeros(self.counts.shape),
                         where=self.counts > 0)

    @property
    def beta(self) -> np.ndarray:
        return self.pi_beta_hat.probs


def floor_and_normalize(p: np.ndarray, floor: float) -> np.ndarray:
    p = np.maximum(p, floor)
    return p / p.sum(axis=-1, keepdims=True)


def estimate_model(dataset: OfflineDataset, n_states: int, n_actions: int,
                   eps_b: float = DEFAULT_EPS_B) -> EmpiricalModel:
    """Count-based behavior policy, state density and dynamics.

    Observed states get ``count(s, a) / count(s)`` floored at ``eps_b`` and
    renormalised; unobserved states get a uniform row and an all-false mask.
    """
    if not 0.0 < eps_b <= 1e-2:
        raise ValueError("eps_b must lie in (0, 1e-2]")
    if len(dataset) == 0:
        raise EmptyDatasetError("dataset has no transitions")
    s, a, s2 = dataset.s, dataset.a, dataset.s2
    if s.min() < 0 or s.max() >= n_states or s2.min() < 0 or s2.max() >= n_states:
        raise ValueError("state index out of range")
    if a.min() < 0 or a.max() >= n_actions:
        raise ValueError("action index out of range")
    counts = np.zeros((n_states, n_actions), dtype=np.int64)
    np.add.at(counts, (s, a), 1)
    next_counts = np.zeros((n_states, n_actions, n_states), dtype=np.int64)
    np.add.at(next_counts, (s, a, s2), 1)
    reward_sum = np.zeros((n_states, n_actions))
    np.add.at(reward_sum, (s, a), dataset.r.astype(float))
    n_s = counts.sum(1)
    raw = np.full((n_states, n_actions), 1.0 / n_actions)
    seen = n_s > 0
    raw[seen] = counts[seen] / n_s[seen, None]
    beta = raw.copy()
    beta[seen] = floor_and_normalize(raw[seen], eps_b)
    mu = n_s / n_s.sum()
    return EmpiricalModel(TabularPolicy(beta), mu, counts, next_counts, reward_sum,
                          counts > 0, eps_b)


def empirical_mdp(model: EmpiricalModel, mdp: TabularMdp) -> TabularMdp:
    """The MDP induced by the counts; unobserved pairs self-loop with reward 0."""
    return TabularMdp(model.empirical_transition, model.reward_mean, np.array(mdp.initial_dist),
                      mdp.gamma, mdp.terminal, grid=mdp.grid, cells=mdp.cells)
