"""Finite MDPs, the gridworld builder, rollouts and exact policy evaluation.

Gridworld conventions
---------------------
Cells are addressed as ``(x, y)`` with ``x`` the column and ``y`` the row,
row 0 at the top.  States index the non-wall cells in row-major order
(all of row 0 left to right, then row 1, ...).  Actions are::

    0 = L (x - 1)   1 = R (x + 1)   2 = U (y - 1)   3 = D (y + 1)   4 = NoOp

Moving into a wall or off the grid leaves the agent in place.  Entering the
goal yields reward 1 and ends the episode; the goal is absorbing with reward 0.

Return convention: ``policy_return`` is the plain discounted sum
``sum_s mu0(s) V(s)``, without the ``1 / (1 - gamma)`` prefactor.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, FrozenSet, List, Mapping, Optional, Tuple, Union

import numpy as np

Cell = Tuple[int, int]

ACTIONS = ("L", "R", "U", "D", "NoOp")
ACTION_DELTAS = ((-1, 0), (1, 0), (0, -1), (0, 1), (0, 0))
LEFT, RIGHT, UP, DOWN, NOOP = range(5)

HALLWAY = "hallway"
ROOM = "room"

BUILTIN_LAYOUTS = ("didactic-24x16",)

DEFAULT_GAMMA = 0.99
DEFAULT_HORIZON = 400


class GridSpecError(ValueError):
    """Raised for malformed grid specifications."""


class UnreachableGoal(GridSpecError):
    """Raised when breadth-first search from the start never meets the goal."""


def q_cap(gamma: float) -> float:
    """Bound on ``|Q|`` used to keep closed-form penalties finite."""
    return 2.0 / (1.0 - gamma)


@dataclass(frozen=True)
class GridSpec:
    width: int
    height: int
    walls: FrozenSet[Cell]
    start: Cell
    goal: Cell
    region_labels: Mapping[Cell, str]
    wall_penalty_mode: str = "stay_in_place"
    name: str = "custom"

    def in_bounds(self, cell: Cell) -> bool:
        x, y = cell
        return 0 <= x < self.width and 0 <= y < self.height

    def is_free(self, cell: Cell) -> bool:
        return self.in_bounds(cell) and cell not in self.walls

    def free_cells(self) -> List[Cell]:
        """Non-wall cells in row-major order; position in the list is the state index."""
        return [
            (x, y)
            for y in range(self.height)
            for x in range(self.width)
            if (x, y) not in self.walls
        ]

    def step(self, cell: Cell, action: int) -> Cell:
        dx, dy = ACTION_DELTAS[action]
        nxt = (cell[0] + dx, cell[1] + dy)
        return nxt if self.is_free(nxt) else cell

    def validate(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise GridSpecError("grid dimensions must be positive")
        if self.wall_penalty_mode != "stay_in_place":
            raise GridSpecError(f"unknown wall_penalty_mode {self.wall_penalty_mode!r}")
        for name, cell in (("start", self.start), ("goal", self.goal)):
            if not self.is_free(cell):
                raise GridSpecError(f"{name} {cell} is a wall or out of bounds")
        free = self.free_cells()
        for cell in free:
            if not any(self.is_free(self.step(cell, a)) and self.step(cell, a) != cell
                       for a in range(4)):
                raise GridSpecError(f"cell {cell} is isolated")
            label = self.region_labels.get(cell)
            if label not in (HALLWAY, ROOM):
                raise GridSpecError(f"cell {cell} has no valid region label")
        extra = set(self.region_labels) - set(free)
        if extra:
            raise GridSpecError(f"region labels on non-free cells: {sorted(extra)[:5]}")

    def distances_to(self, target: Cell) -> Dict[Cell, int]:
        """BFS step distance from every reachable free cell to ``target``."""
        dist = {target: 0}
        queue = deque([target])
        while queue:
            cell = queue.popleft()
            for dx, dy in ACTION_DELTAS[:4]:
                nxt = (cell[0] + dx, cell[1] + dy)
                if self.is_free(nxt) and nxt not in dist:
                    dist[nxt] = dist[cell] + 1
                    queue.append(nxt)
        return dist

    def to_ascii(self) -> str:
        rows = []
        for y in range(self.height):
            row = []
            for x in range(self.width):
                c = (x, y)
                if c in self.walls:
                    row.append("#")
                elif c == self.start:
                    row.append("S")
                elif c == self.goal:
                    row.append("G")
                elif self.region_labels.get(c) == HALLWAY:
                    row.append("H")
                else:
                    row.append(".")
            rows.append("".join(row))
        return "\n".join(rows) + "\n"


def parse_layout(text: str, name: str = "custom") -> GridSpec:
    """Parse an ASCII map.

    ``#`` wall, ``.`` free room cell, ``H`` free hallway cell, ``S`` start,
    ``G`` goal.  ``S`` and ``G`` are labelled hallway when they touch an ``H``
    cell, room otherwise.  Rows are padded with walls to the longest row.
    """
    lines = [ln.rstrip("\n") for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise GridSpecError("empty layout")
    width = max(len(ln) for ln in lines)
    height = len(lines)
    walls = set()
    labels: Dict[Cell, str] = {}
    start = goal = None
    chars: Dict[Cell, str] = {}
    for y, line in enumerate(lines):
        for x in range(width):
            ch = line[x] if x < len(line) else "#"
            if ch == "#":
                walls.add((x, y))
                continue
            if ch not in ".HSG":
                raise GridSpecError(f"unknown map character {ch!r} at {(x, y)}")
            chars[(x, y)] = ch
            if ch == "S":
                if start is not None:
                    raise GridSpecError("multiple start cells")
                start = (x, y)
            elif ch == "G":
                if goal is not None:
                    raise GridSpecError("multiple goal cells")
                goal = (x, y)
    if start is None or goal is None:
        raise GridSpecError("layout needs exactly one S and one G")
    for cell, ch in chars.items():
        if ch == "H":
            labels[cell] = HALLWAY
        elif ch in "SG":
            touches = any(
                chars.get((cell[0] + dx, cell[1] + dy)) == "H" for dx, dy in ACTION_DELTAS[:4]
            )
            labels[cell] = HALLWAY if touches else ROOM
        else:
            labels[cell] = ROOM
    return GridSpec(width, height, frozenset(walls), start, goal, labels, name=name)


def load_layout(name_or_path: Union[str, Path]) -> GridSpec:
    """Load a built-in layout by name or an ASCII map from a file path."""
    if str(name_or_path) in BUILTIN_LAYOUTS:
        text = resources.files("rlab.layouts").joinpath(f"{name_or_path}.txt").read_text()
        return parse_layout(text, name=str(name_or_path))
    path = Path(name_or_path)
    if not path.is_file():
        raise FileNotFoundError(f"layout {name_or_path!r} is neither built in nor a file")
    return parse_layout(path.read_text(), name=path.stem)


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """A finite MDP with dense ``transition[s, a, s']`` and ``reward[s, a]``."""

    transition: np.ndarray
    reward: np.ndarray
    initial_dist: np.ndarray
    gamma: float
    terminal: FrozenSet[int] = frozenset()
    grid: Optional[GridSpec] = None
    cells: Optional[Tuple[Cell, ...]] = None

    def __post_init__(self):
        for arr in (self.transition, self.reward, self.initial_dist):
            arr.setflags(write=False)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def state_of(self, cell: Cell) -> int:
        return self.cells.index(cell)

    def check(self, atol: float = 1e-9) -> None:
        T = self.transition
        if T.ndim != 3 or T.shape[0] != T.shape[2]:
            raise ValueError(f"bad transition shape {T.shape}")
        if (T < 0).any() or not np.allclose(T.sum(-1), 1.0, atol=atol, rtol=0):
            raise ValueError("transition rows must be probability vectors")
        if self.reward.shape != T.shape[:2]:
            raise ValueError("reward shape mismatch")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if abs(self.initial_dist.sum() - 1.0) > atol or (self.initial_dist < 0).any():
            raise ValueError("initial_dist must be a probability vector")
        for s in self.terminal:
            if not np.allclose(T[s, :, s], 1.0) or np.any(self.reward[s] != 0):
                raise ValueError(f"terminal state {s} must self-loop with zero reward")


@dataclass(frozen=True, eq=False)
class TabularPolicy:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 2:
            raise ValueError("policy table must be [state, action]")
        if (p < 0).any() or not np.allclose(p.sum(1), 1.0, atol=1e-9, rtol=0):
            raise ValueError("policy rows must be probability vectors")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "TabularPolicy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions, n_actions: int) -> "TabularPolicy":
        actions = np.asarray(actions)
        p = np.zeros((len(actions), n_actions))
        p[np.arange(len(actions)), actions] = 1.0
        return cls(p)

    def greedy_actions(self) -> np.ndarray:
        """Argmax action per state; ties go to the lowest index."""
        return np.argmax(self.probs, axis=1)


@dataclass(frozen=True)
class Transition:
    state: int
    action: int
    reward: float
    next_state: int
    done: bool


Trajectory = List[Transition]


def build_gridworld(spec: GridSpec, gamma: float = DEFAULT_GAMMA) -> TabularMdp:
    """Compile a :class:`GridSpec` into a :class:`TabularMdp`.

    Raises
    ------
    UnreachableGoal
        If the goal cannot be reached from the start.
    """
    spec.validate()
    if spec.start not in spec.distances_to(spec.goal):
        raise UnreachableGoal(f"goal {spec.goal} unreachable from start {spec.start}")
    cells = spec.free_cells()
    index = {c: i for i, c in enumerate(cells)}
    nS, nA = len(cells), len(ACTIONS)
    T = np.zeros((nS, nA, nS))
    R = np.zeros((nS, nA))
    goal = index[spec.goal]
    for s, cell in enumerate(cells):
        for a in range(nA):
            if s == goal:
                T[s, a, s] = 1.0
                continue
            nxt = index[spec.step(cell, a)]
            T[s, a, nxt] = 1.0
            R[s, a] = 1.0 if nxt == goal else 0.0
    mu0 = np.zeros(nS)
    mu0[index[spec.start]] = 1.0
    mdp = TabularMdp(T, R, mu0, gamma, frozenset({goal}), grid=spec, cells=tuple(cells))
    mdp.check()
    return mdp


def rollout(mdp: TabularMdp, policy: TabularPolicy, horizon: int, seed: int,
            start_state: Optional[int] = None) -> Trajectory:
    """Sample one episode of at most ``horizon`` steps.

    The episode stops early when a terminal state is entered.  All randomness
    comes from ``numpy.random.default_rng(seed)``.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    rng = np.random.default_rng(seed)
    if start_state is None:
        s = int(_sample(mdp.initial_dist, rng.random()))
    else:
        s = int(start_state)
    u = rng.random((horizon, 2))
    cum_pi = np.cumsum(policy.probs, axis=1)
    traj: Trajectory = []
    for t in range(horizon):
        a = int(min(np.searchsorted(cum_pi[s], u[t, 0], side="right"), mdp.n_actions - 1))
        s2 = int(_sample(mdp.transition[s, a], u[t, 1]))
        done = s2 in mdp.terminal
        traj.append(Transition(s, a, float(mdp.reward[s, a]), s2, done))
        if done:
            break
        s = s2
    return traj


def _sample(p: np.ndarray, u: float) -> int:
    return min(int(np.searchsorted(np.cumsum(p), u, side="right")), len(p) - 1)


def bellman_q(mdp: TabularMdp, v: np.ndarray) -> np.ndarray:
    """``r(s, a) + gamma * sum_s' T(s'|s, a) v(s')``."""
    return mdp.reward + mdp.gamma * mdp.transition @ v


def policy_evaluation(mdp: TabularMdp, policy: TabularPolicy,
                      tol: float = 1e-10, max_iter: int = 1_000_000) -> Tuple[np.ndarray, np.ndarray]:
    """Exact ``V^pi`` and ``Q^pi`` by iterating the Bellman evaluation operator.

    Stops once the sup-norm Bellman residual of ``V`` is at most ``tol``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    pi = policy.probs
    r_pi = (pi * mdp.reward).sum(1)
    P_pi = np.einsum("sa,sat->st", pi, mdp.transition)
    # A direct solve gives the fixed point; the loop below certifies the residual.
    v = np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * P_pi, r_pi)
    for _ in range(max_iter):
        v_new = r_pi + mdp.gamma * P_pi @ v
        resid = np.max(np.abs(v_new - v))
        v = v_new
        if resid <= tol:
            break
    q = bellman_q(mdp, v)
    return v, q


def policy_return(mdp: TabularMdp, policy: TabularPolicy, tol: float = 1e-10) -> float:
    v, _ = policy_evaluation(mdp, policy, tol)
    return float(mdp.initial_dist @ v)


def value_iteration(mdp: TabularMdp, tol: float = 1e-10,
                    max_iter: int = 100_000) -> Tuple[np.ndarray, np.ndarray]:
    """Optimal ``V*`` and ``Q*``."""
    v = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        q = bellman_q(mdp, v)
        v_new = q.max(1)
        if np.max(np.abs(v_new - v)) <= tol:
            v = v_new
            break
        v = v_new
    return v, bellman_q(mdp, v)


def greedy_policy(q: np.ndarray) -> TabularPolicy:
    """Deterministic argmax policy, ties to the lowest action index."""
    return TabularPolicy.deterministic(np.argmax(q, axis=1), q.shape[1])
