"""Core domain types for time-varying Markov decision processes.

A TVMDP couples a finite spatial state space with a discrete time grid.
The transition law and reward may depend on the current time slot, so
policies and value tables are indexed by (state, slot) rather than by
state alone.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ContractViolation",
    "HEADING_NAMES",
    "HEADING_OFFSETS",
    "HEADING_ANGLES",
    "HEADING_UNITS",
    "N_HEADINGS",
    "GridMap",
    "TimeGrid",
    "SlotTables",
    "TableLaw",
    "Policy",
    "ValueTable",
    "TvmdpModel",
    "step_cost_reward",
]


class ContractViolation(ValueError):
    """Raised when a model, policy, or law is queried outside its contract."""


# Compass headings, clockwise from north. Row index increases northward,
# column index increases eastward, so (x, y) = (col, row).
HEADING_NAMES = ("N", "NE", "E", "SE", "S", "SW", "W", "NW")
HEADING_OFFSETS = np.array(
    [(1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)],
    dtype=np.int64,
)  # (d_row, d_col)
N_HEADINGS = len(HEADING_NAMES)

_dxy = np.stack([HEADING_OFFSETS[:, 1], HEADING_OFFSETS[:, 0]], axis=1).astype(float)
HEADING_UNITS = _dxy / np.linalg.norm(_dxy, axis=1, keepdims=True)
HEADING_ANGLES = np.arctan2(_dxy[:, 1], _dxy[:, 0])


def wrap_angle(theta):
    """Wrap angles to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(theta), 2.0 * np.pi)


class GridMap:
    """Rectangular cell grid; each cell center is one spatial state.

    State indices enumerate cells row-major: index = row * cols + col.
    Positions are reported in physical units, (x, y) = (col, row) * cell_size.
    """

    def __init__(self, rows: int, cols: int, cell_size: float = 1.0):
        if rows < 1 or cols < 1:
            raise ContractViolation("grid must have at least one row and column")
        if cell_size <= 0:
            raise ContractViolation("cell_size must be positive")
        self.rows = int(rows)
        self.cols = int(cols)
        self.cell_size = float(cell_size)
        self.n_states = self.rows * self.cols

        r, c = np.divmod(np.arange(self.n_states), self.cols)
        self._rc = np.stack([r, c], axis=1)
        # neighbor_table[s, d] = state index one step along heading d, -1 off-grid
        nr = r[:, None] + HEADING_OFFSETS[None, :, 0]
        nc = c[:, None] + HEADING_OFFSETS[None, :, 1]
        inside = (nr >= 0) & (nr < self.rows) & (nc >= 0) & (nc < self.cols)
        self.neighbor_table = np.where(inside, nr * self.cols + nc, -1)
        # step_lengths[d]: center-to-center distance along heading d
        self.step_lengths = (
            np.linalg.norm(HEADING_OFFSETS.astype(float), axis=1) * self.cell_size
        )

    def index(self, row: int, col: int) -> int:
        if not (0 <= row < self.rows and 0 <= col < self.cols):
            raise ContractViolation(f"cell ({row}, {col}) outside {self.rows}x{self.cols} grid")
        return row * self.cols + col

    def coords(self, state: int) -> tuple[int, int]:
        if not (0 <= state < self.n_states):
            raise ContractViolation(f"state {state} outside grid with {self.n_states} states")
        return int(self._rc[state, 0]), int(self._rc[state, 1])

    def positions(self) -> np.ndarray:
        """(N, 2) array of (x, y) cell-center positions in physical units."""
        return self._rc[:, ::-1].astype(float) * self.cell_size

    def position(self, state: int) -> tuple[float, float]:
        row, col = self.coords(state)
        return col * self.cell_size, row * self.cell_size

    def feasible_headings(self, state: int) -> np.ndarray:
        return np.nonzero(self.neighbor_table[state] >= 0)[0]

    def heading_between(self, s: int, s_next: int) -> int:
        """Heading index of the single step from s to a neighboring s_next."""
        hits = np.nonzero(self.neighbor_table[s] == s_next)[0]
        if hits.size == 0:
            raise ContractViolation(f"states {s} and {s_next} are not connected")
        return int(hits[0])

    def distance(self, s: int, s_next: int) -> float:
        d = self._rc[s] - self._rc[s_next]
        return float(np.hypot(d[0], d[1])) * self.cell_size


class TimeGrid:
    """Uniform discrete time slots covering [0, horizon).

    slot_times[k] = k * horizon / slot_count, so the first slot sits at
    t = 0 and the last strictly below the horizon.
    """

    def __init__(self, slot_count: int, horizon: float):
        if slot_count < 1:
            raise ContractViolation("need at least one time slot")
        if horizon <= 0:
            raise ContractViolation("horizon must be positive")
        self.slot_count = int(slot_count)
        self.horizon = float(horizon)
        self.dt = self.horizon / self.slot_count
        self.slot_times = np.arange(self.slot_count) * self.dt

    def snap(self, t: float) -> int:
        """Nearest slot to time t; exact midpoints round to the later slot."""
        return int(self.snap_array(np.asarray(t, dtype=float)))

    def snap_array(self, t: np.ndarray) -> np.ndarray:
        # round-half-up onto the uniform grid, then clamp
        idx = np.floor(np.asarray(t, dtype=float) / self.dt + 0.5).astype(np.int64)
        return np.clip(idx, 0, self.slot_count - 1)

    def time_of(self, slot: int) -> float:
        return float(self.slot_times[slot])


@dataclass
class SlotTables:
    """Dense per-slot view of a transition law.

    For each state row s, the J successor columns list target states
    (``succ``, padded with -1), their arrival slots, and local travel
    times. ``probs[a, s, j]`` gives the transition probability under
    action a; rows of infeasible (s, a) pairs are zero.
    """

    succ: np.ndarray        # (N, J) int
    slots: np.ndarray       # (N, J) int
    probs: np.ndarray       # (A, N, J) float
    local_times: np.ndarray  # (N, J) float
    feasible: np.ndarray    # (N, A) bool


class TableLaw:
    """Transition law given by explicit per-action matrices.

    Intended for small hand-built fixtures: ``trans[a][s, s']`` is the
    spatial transition probability and ``times[s, s']`` the local travel
    time for connected pairs. The law is time-invariant; arrival slots
    come from snapping t + h onto the time grid.
    """

    def __init__(
        self,
        trans: Sequence[np.ndarray] | np.ndarray,
        times: np.ndarray,
        time_grid: TimeGrid,
        terminal: Iterable[int] = (),
    ):
        if isinstance(trans, np.ndarray) and trans.ndim == 2:
            trans = [trans]
        self.trans = [np.asarray(T, dtype=float) for T in trans]
        self.times = np.asarray(times, dtype=float)
        self.time_grid = time_grid
        self.n_states = self.trans[0].shape[0]
        self.n_actions = len(self.trans)
        self.terminal = frozenset(int(s) for s in terminal)
        for T in self.trans:
            if T.shape != (self.n_states, self.n_states):
                raise ContractViolation("transition matrices must be square and same-shaped")
            rows = np.delete(np.arange(self.n_states), sorted(self.terminal)) \
                if self.terminal else np.arange(self.n_states)
            sums = T[rows].sum(axis=1)
            if not np.allclose(sums, 1.0, atol=1e-9):
                raise ContractViolation("transition rows must sum to 1")
        self._cache: dict[int, SlotTables] = {}

    def feasible(self, s: int, k: int) -> np.ndarray:
        return np.arange(self.n_actions)

    def slot_tables(self, k: int) -> SlotTables:
        if k in self._cache:
            return self._cache[k]
        n, a = self.n_states, self.n_actions
        succ = np.tile(np.arange(n), (n, 1))
        h = self.times.copy()
        t_now = self.time_grid.time_of(k)
        slots = self.time_grid.snap_array(t_now + h)
        probs = np.stack(self.trans).astype(float)
        for s in self.terminal:
            succ[s] = s
            slots[s] = k
            h[s] = 0.0
            probs[:, s, :] = 0.0
            probs[:, s, s] = 1.0
        feas = np.ones((n, a), dtype=bool)
        tables = SlotTables(succ, slots, probs, h, feas)
        self._cache[k] = tables
        return tables

    def row(self, s: int, k: int, a: int):
        t = self.slot_tables(k)
        p = t.probs[a, s]
        keep = p > 0.0
        return t.succ[s][keep], t.slots[s][keep], p[keep], t.local_times[s][keep]


class Policy:
    """Deterministic Markov policy: action table over (state, slot).

    A time-independent policy stores one action per state and answers
    lookups identically at every slot.
    """

    def __init__(self, actions: np.ndarray, time_independent: bool = False):
        actions = np.asarray(actions, dtype=np.int64)
        if time_independent and actions.ndim != 1:
            raise ContractViolation("time-independent policy takes a 1-D action array")
        if not time_independent and actions.ndim != 2:
            raise ContractViolation("spatiotemporal policy takes an (N, K) action array")
        self.actions = actions
        self.time_independent = bool(time_independent)

    @property
    def n_states(self) -> int:
        return self.actions.shape[0]

    def lookup(self, s: int, k: int) -> int:
        if self.time_independent:
            return int(self.actions[s])
        return int(self.actions[s, k])

    def action_table(self, slot_count: int) -> np.ndarray:
        """(N, K) action table, replicating time-independent policies."""
        if self.time_independent:
            return np.repeat(self.actions[:, None], slot_count, axis=1)
        return self.actions

    def validate(self, model: "TvmdpModel") -> None:
        table = self.action_table(model.time_grid.slot_count)
        for s in range(model.n_states):
            feas = set(int(a) for a in model.law.feasible(s, 0))
            for k in range(model.time_grid.slot_count):
                if int(table[s, k]) not in feas:
                    raise ContractViolation(f"policy action at (s={s}, k={k}) infeasible")

    def to_csv(self, path) -> None:
        write_policy_csv(path, self, comment=None)

    @classmethod
    def from_csv(cls, path) -> "Policy":
        rows = []
        with open(path, newline="") as f:
            for rec in csv.reader(f):
                if not rec or rec[0].startswith("#"):
                    continue
                if rec[0] == "s":
                    continue
                rows.append((int(rec[0]), int(rec[1]), int(rec[2])))
        n = 1 + max(r[0] for r in rows)
        k = 1 + max(r[1] for r in rows)
        table = np.zeros((n, k), dtype=np.int64)
        for s, t, a in rows:
            table[s, t] = a
        return cls(table)


def write_policy_csv(path, policy: Policy, slot_count: int | None = None, comment: str | None = None):
    table = policy.actions if not policy.time_independent else None
    if table is None:
        if slot_count is None:
            slot_count = 1
        table = policy.action_table(slot_count)
    with open(path, "w", newline="") as f:
        if comment:
            f.write(f"# {comment}\n")
        w = csv.writer(f)
        w.writerow(["s", "t_slot", "action"])
        for s in range(table.shape[0]):
            for k in range(table.shape[1]):
                w.writerow([s, k, int(table[s, k])])


@dataclass
class ValueTable:
    """Value function over (state, slot), or over states alone."""

    values: np.ndarray

    @property
    def spatiotemporal(self) -> bool:
        return self.values.ndim == 2

    def check_finite(self) -> None:
        if not np.all(np.isfinite(self.values)):
            raise ContractViolation("value table contains non-finite entries")

    def to_csv(self, path, comment: str | None = None) -> None:
        with open(path, "w", newline="") as f:
            if comment:
                f.write(f"# {comment}\n")
            w = csv.writer(f)
            if self.spatiotemporal:
                w.writerow(["s", "t_slot", "value"])
                for s in range(self.values.shape[0]):
                    for k in range(self.values.shape[1]):
                        w.writerow([s, k, f"{self.values[s, k]:.12g}"])
            else:
                w.writerow(["s", "value"])
                for s in range(self.values.shape[0]):
                    w.writerow([s, f"{self.values[s]:.12g}"])


def step_cost_reward(step: float = -0.1) -> Callable[[int, int, int], float]:
    """Constant per-action cost; terminal rewards live on the model."""

    def reward(s: int, k: int, a: int) -> float:
        return step

    return reward


@dataclass
class TvmdpModel:
    """A time-varying MDP: states, time grid, law, reward, and terminals.

    Goal and obstacle states are absorbing. Their terminal reward is
    collected once on arrival; afterwards they self-loop with zero
    reward, which the solvers encode by pinning their values.
    """

    law: object
    time_grid: TimeGrid
    reward: Callable[[int, int, int], float]
    gamma: float
    goal: int | None = None
    obstacles: frozenset = field(default_factory=frozenset)
    grid: GridMap | None = None
    local_times: object | None = None
    start: int | None = None
    goal_reward: float = 1.0
    obstacle_reward: float = -1.0

    def __post_init__(self):
        self.obstacles = frozenset(int(s) for s in self.obstacles)
        if not (0.0 <= self.gamma < 1.0):
            raise ContractViolation("discount gamma must lie in [0, 1)")

    @property
    def n_states(self) -> int:
        return self.law.n_states

    @property
    def n_actions(self) -> int:
        return self.law.n_actions

    def is_terminal(self, s: int) -> bool:
        return s == self.goal or s in self.obstacles

    def terminal_value(self, s: int) -> float:
        if s == self.goal:
            return self.goal_reward
        if s in self.obstacles:
            return self.obstacle_reward
        raise ContractViolation(f"state {s} is not terminal")

    def terminal_states(self) -> list[int]:
        out = sorted(self.obstacles)
        if self.goal is not None:
            out.append(self.goal)
        return sorted(set(out))

    def feasible_actions(self, s: int, k: int) -> np.ndarray:
        return self.law.feasible(s, k)

    def reward_table(self, k: int) -> np.ndarray:
        """(N, A) reward array at slot k, memoized."""
        cache = self.__dict__.setdefault("_reward_cache", {})
        if k not in cache:
            n, a = self.n_states, self.n_actions
            table = np.empty((n, a))
            for s in range(n):
                for act in range(a):
                    table[s, act] = self.reward(s, k, act)
            cache[k] = table
        return cache[k]

    def transition(self, s: int, k: int, a: int) -> list[tuple[tuple[int, int], float]]:
        """Transition distribution for a feasible (s, k, a) triple.

        Returns [((s', k'), p), ...] with probabilities summing to one
        and every target slot k' >= k.
        """
        if not (0 <= k < self.time_grid.slot_count):
            raise ContractViolation(f"slot {k} outside time grid")
        if not self.is_terminal(s) and a not in set(int(x) for x in self.law.feasible(s, k)):
            raise ContractViolation(f"action {a} infeasible at (s={s}, k={k})")
        succ, slots, probs, _ = self.law.row(s, k, a)
        total = float(probs.sum())
        if abs(total - 1.0) > 1e-9:
            raise ContractViolation(f"transition row at (s={s}, k={k}, a={a}) sums to {total}")
        if np.any(slots < k):
            raise ContractViolation("transition targets an earlier time slot")
        return [((int(sp), int(kp)), float(p)) for sp, kp, p in zip(succ, slots, probs)]

    def local_time(self, s: int, k: int, s_next: int) -> float:
        """Local travel time h for one hop from s at slot k to s_next."""
        if s == s_next:
            return 0.0
        if self.local_times is not None:
            return self.local_times.of(s, k, s_next)
        tables = self.law.slot_tables(k)
        hits = np.nonzero(tables.succ[s] == s_next)[0]
        if hits.size == 0:
            raise ContractViolation(f"states {s} and {s_next} are not connected")
        return float(tables.local_times[s, hits[0]])
