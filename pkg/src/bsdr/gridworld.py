"""Deterministic fixed-horizon GridWorld.

Coordinates are ``(x, y)`` with ``x`` the column and ``y`` the row; ``up``
decreases ``y``. Every cell has exactly five actions in the fixed order
``up, down, left, right, stay``. Moves into walls or obstacles alias to
``stay`` rather than being pruned, so the action space never shrinks.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import DomainError, OracleSizeError, SchemaError

ACTIONS = ("up", "down", "left", "right", "stay")
DELTAS = ((0, -1), (0, 1), (-1, 0), (1, 0), (0, 0))
N_ACTIONS = len(ACTIONS)
STAY = 4

FEATURE_MAPS = ("bias_goal_dist", "one_hot", "goal_indicators")
DEFAULT_ORACLE_CAP = 10**7


class State(NamedTuple):
    x: int
    y: int


def _as_state(c) -> State:
    x, y = c
    return State(int(x), int(y))


@dataclass(frozen=True)
class GridSpec:
    """Layout, start, goals, horizon and feature map of a GridWorld.

    Obstacles are stored as a sorted tuple so specs hash and compare by value.
    """

    width: int
    height: int
    start: State
    goals: tuple
    horizon: int
    obstacles: tuple = ()
    feature_map: str = "bias_goal_dist"

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "start", _as_state(self.start))
        set_(self, "goals", tuple(_as_state(g) for g in self.goals))
        set_(self, "obstacles", tuple(sorted({_as_state(o) for o in self.obstacles})))
        if int(self.width) < 1 or int(self.height) < 1:
            raise DomainError(f"grid must be at least 1x1, got {self.width}x{self.height}")
        if int(self.horizon) < 1:
            raise DomainError(f"horizon must be >= 1, got {self.horizon}")
        if self.feature_map not in FEATURE_MAPS:
            raise DomainError(f"unknown feature map {self.feature_map!r}; choose from {FEATURE_MAPS}")
        if not self.goals:
            raise DomainError("at least one goal is required")
        if not self.is_valid(self.start):
            raise DomainError(f"start {tuple(self.start)} is out of bounds or an obstacle")
        for g in self.goals:
            if not self.is_valid(g):
                raise DomainError(f"goal {tuple(g)} is out of bounds or an obstacle")

    def in_bounds(self, s) -> bool:
        return 0 <= s[0] < self.width and 0 <= s[1] < self.height

    def is_valid(self, s) -> bool:
        return self.in_bounds(s) and tuple(s) not in self._obstacle_set

    @cached_property
    def _obstacle_set(self):
        return frozenset(self.obstacles)

    @cached_property
    def cells(self) -> tuple:
        """Valid cells in row-major order; position is the state index."""
        return tuple(
            State(x, y)
            for y in range(self.height)
            for x in range(self.width)
            if (x, y) not in self._obstacle_set
        )

    @cached_property
    def _index(self) -> dict:
        return {c: i for i, c in enumerate(self.cells)}

    @property
    def n_states(self) -> int:
        return len(self.cells)

    @property
    def start_index(self) -> int:
        return self._index[self.start]

    def index_of(self, s) -> int:
        try:
            return self._index[(s[0], s[1])]
        except (KeyError, TypeError, IndexError):
            raise DomainError(f"invalid state {s!r} for {self.width}x{self.height} grid") from None

    @cached_property
    def succ(self) -> np.ndarray:
        """``(n_states, 5)`` successor index table, read-only."""
        table = np.empty((self.n_states, N_ACTIONS), dtype=np.int64)
        for i, (x, y) in enumerate(self.cells):
            for a, (dx, dy) in enumerate(DELTAS):
                nxt = (x + dx, y + dy)
                table[i, a] = self._index[nxt] if self.is_valid(nxt) else i
        table.setflags(write=False)
        return table

    @cached_property
    def features(self) -> np.ndarray:
        """``(n_states, D)`` feature matrix, row ``i`` is phi of ``cells[i]``."""
        F = _feature_matrix(self)
        F.setflags(write=False)
        return F

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def has_bias(self) -> bool:
        return self.feature_map in ("bias_goal_dist", "goal_indicators")

    def with_goals(self, goals) -> "GridSpec":
        return GridSpec(self.width, self.height, self.start, tuple(goals), self.horizon,
                        self.obstacles, self.feature_map)

    def with_horizon(self, horizon) -> "GridSpec":
        return GridSpec(self.width, self.height, self.start, self.goals, horizon,
                        self.obstacles, self.feature_map)

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "obstacles": [list(o) for o in self.obstacles],
            "start": list(self.start),
            "goals": [list(g) for g in self.goals],
            "horizon": self.horizon,
            "feature_map": self.feature_map,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        known = {"width", "height", "obstacles", "start", "goals", "horizon", "feature_map"}
        extra = set(d) - known
        if extra:
            raise DomainError(f"unknown grid keys: {sorted(extra)}")
        try:
            return cls(
                width=int(d["width"]),
                height=int(d["height"]),
                start=d["start"],
                goals=d["goals"],
                horizon=int(d["horizon"]),
                obstacles=d.get("obstacles", ()),
                feature_map=d.get("feature_map", "bias_goal_dist"),
            )
        except KeyError as e:
            raise DomainError(f"grid config missing key {e.args[0]!r}") from None
        except (TypeError, ValueError) as e:
            if isinstance(e, DomainError):
                raise
            raise DomainError(f"malformed grid config: {e}") from None


def _feature_matrix(spec: GridSpec) -> np.ndarray:
    cells = np.array(spec.cells, dtype=np.float64).reshape(-1, 2)
    goals = np.array(spec.goals, dtype=np.float64)
    if spec.feature_map == "bias_goal_dist":
        dist = np.abs(cells[:, None, :] - goals[None, :, :]).sum(axis=2).min(axis=1)
        dmax = dist.max()
        closeness = 1.0 - dist / dmax if dmax > 0 else np.ones_like(dist)
        return np.column_stack([np.ones(len(cells)), closeness])
    if spec.feature_map == "one_hot":
        F = np.zeros((len(cells), spec.width * spec.height))
        for i, (x, y) in enumerate(spec.cells):
            F[i, y * spec.width + x] = 1.0
        return F
    # goal_indicators
    F = np.zeros((len(cells), 1 + len(spec.goals)))
    F[:, 0] = 1.0
    for k, g in enumerate(spec.goals):
        F[spec.index_of(g), 1 + k] = 1.0
    return F


@dataclass(frozen=True)
class Trajectory:
    """A fixed-horizon state sequence, optionally with its action indices."""

    states: tuple
    actions: Optional[tuple] = None
    agent_id: Optional[str] = field(default=None, compare=True)

    def __post_init__(self):
        object.__setattr__(self, "states", tuple(_as_state(s) for s in self.states))
        if self.actions is not None:
            object.__setattr__(self, "actions", tuple(int(a) for a in self.actions))

    def __len__(self):
        return len(self.states)

    @property
    def horizon(self) -> int:
        return len(self.states) - 1


def neighbors(s, spec: GridSpec) -> list:
    """Successors of ``up, down, left, right, stay`` from ``s``, aliases kept."""
    i = spec.index_of(s)
    return [spec.cells[j] for j in spec.succ[i]]


def featurize(s, spec: GridSpec) -> np.ndarray:
    return spec.features[spec.index_of(s)].copy()


def state_indices(states: Sequence, spec: GridSpec) -> np.ndarray:
    return np.fromiter((spec.index_of(s) for s in states), dtype=np.int64, count=len(states))


def validate_trajectory(xi: Trajectory, spec: GridSpec, *, full_length: bool = True) -> np.ndarray:
    """Check ``xi`` against ``spec`` and return its state indices.

    Raises :class:`SchemaError` naming the offending step.
    """
    states = xi.states
    if full_length and len(states) != spec.horizon + 1:
        raise SchemaError(f"trajectory has {len(states)} states, expected {spec.horizon + 1}")
    if not states:
        raise SchemaError("trajectory is empty", step=0)
    idx = np.empty(len(states), dtype=np.int64)
    for k, s in enumerate(states):
        if not spec.is_valid(s):
            raise SchemaError(f"step {k}: state {tuple(s)} is out of bounds or an obstacle", step=k)
        idx[k] = spec._index[s]
    if idx[0] != spec.start_index:
        raise SchemaError(f"step 0: trajectory starts at {tuple(states[0])}, spec start is {tuple(spec.start)}", step=0)
    succ = spec.succ
    for k in range(len(idx) - 1):
        if idx[k + 1] not in succ[idx[k]]:
            raise SchemaError(
                f"step {k + 1}: {tuple(states[k])} -> {tuple(states[k + 1])} is not a legal move", step=k + 1
            )
    if xi.actions is not None:
        if len(xi.actions) != len(states) - 1:
            raise SchemaError(f"{len(xi.actions)} actions for {len(states)} states")
        for k, a in enumerate(xi.actions):
            if not 0 <= a < N_ACTIONS or succ[idx[k], a] != idx[k + 1]:
                raise SchemaError(f"step {k + 1}: action {a} does not produce {tuple(states[k + 1])}", step=k + 1)
    return idx


def action_multiplicity(xi: Trajectory, spec: GridSpec) -> int:
    """Number of action sequences that produce the state sequence of ``xi``."""
    idx = validate_trajectory(xi, spec, full_length=False)
    succ = spec.succ
    m = 1
    for k in range(len(idx) - 1):
        m *= int((succ[idx[k]] == idx[k + 1]).sum())
    return m


def canonical_actions(idx: np.ndarray, spec: GridSpec) -> np.ndarray:
    """Smallest action index producing each transition of a state-index path."""
    succ = spec.succ
    return np.array([int(np.argmax(succ[idx[k]] == idx[k + 1])) for k in range(len(idx) - 1)], dtype=np.int64)


def enumerate_paths(spec: GridSpec, cap: int = DEFAULT_ORACLE_CAP):
    """All ``5**T`` action sequences as ``(actions, states)`` index arrays.

    Rows are in lexicographic action order. Raises :class:`OracleSizeError`
    when ``5**T`` exceeds ``cap``.
    """
    T = spec.horizon
    count = N_ACTIONS**T
    if count > cap:
        raise OracleSizeError(f"5^{T} = {count} trajectories exceeds the oracle cap {cap}")
    actions = np.array(list(itertools.product(range(N_ACTIONS), repeat=T)), dtype=np.int64).reshape(count, T)
    states = np.empty((count, T + 1), dtype=np.int64)
    states[:, 0] = spec.start_index
    for t in range(T):
        states[:, t + 1] = spec.succ[states[:, t], actions[:, t]]
    return actions, states


def enumerate_trajectories(spec: GridSpec, cap: int = DEFAULT_ORACLE_CAP) -> list:
    """One :class:`Trajectory` per action sequence (aliases give duplicates)."""
    actions, states = enumerate_paths(spec, cap)
    cells = spec.cells
    return [
        Trajectory(tuple(cells[i] for i in row), tuple(int(a) for a in acts))
        for acts, row in zip(actions, states)
    ]


def make_trajectory(idx, spec: GridSpec, actions=None, agent_id=None) -> Trajectory:
    cells = spec.cells
    acts = None if actions is None else tuple(int(a) for a in actions)
    return Trajectory(tuple(cells[int(i)] for i in idx), acts, agent_id)


def bfs_distance(spec: GridSpec, source, target) -> int:
    """Shortest number of moves from ``source`` to ``target``; -1 if unreachable."""
    src, dst = spec.index_of(source), spec.index_of(target)
    dist = {src: 0}
    frontier = [src]
    while frontier:
        nxt = []
        for i in frontier:
            if i == dst:
                return dist[i]
            for j in spec.succ[i]:
                j = int(j)
                if j not in dist:
                    dist[j] = dist[i] + 1
                    nxt.append(j)
        frontier = nxt
    return -1
