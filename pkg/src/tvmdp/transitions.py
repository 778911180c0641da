"""Stochastic grid transitions driven by a disturbance field.

The commanded heading plus the local current define a net drift
direction; probability mass over the eight neighbor cells follows a
Gaussian in angular deviation from that drift. Arrival slots come from
local travel times, which are either fixed at one slot per hop or
estimated kinematically by Monte Carlo trials.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (
    ContractViolation,
    GridMap,
    HEADING_ANGLES,
    HEADING_UNITS,
    N_HEADINGS,
    SlotTables,
    TimeGrid,
    wrap_angle,
)

__all__ = [
    "GaussianHeadingModel",
    "VehicleModel",
    "LocalTimeTable",
    "unit_local_times",
    "estimate_local_times_mc",
    "heading_distribution",
    "GridLaw",
    "save_local_times_csv",
    "load_local_times_csv",
]


@dataclass(frozen=True)
class GaussianHeadingModel:
    """Angular-deviation model: weight(d) ~ exp(-dtheta^2 / (2 sigma2))."""

    sigma2: float

    def __post_init__(self):
        if self.sigma2 <= 0:
            raise ContractViolation("heading variance sigma2 must be positive")


@dataclass(frozen=True)
class VehicleModel:
    """Vehicle envelope: top speed and the physical size of one cell."""

    max_speed: float
    cell_size: float = 1.0

    def __post_init__(self):
        if self.max_speed <= 0 or self.cell_size <= 0:
            raise ContractViolation("max_speed and cell_size must be positive")


def heading_distribution(net_angle: np.ndarray, sigma2: float, in_grid: np.ndarray) -> np.ndarray:
    """Probabilities over the 8 headings given net drift angles.

    ``net_angle`` broadcasts against leading axes; ``in_grid`` masks
    headings that would leave the grid (their mass is renormalized away).
    Weights are computed relative to the best heading so that a nearly
    deterministic model (tiny sigma2) cannot underflow to an all-zero row.
    """
    net_angle = np.asarray(net_angle, float)
    delta = wrap_angle(HEADING_ANGLES - net_angle[..., None])
    log_w = -(delta * delta) / (2.0 * sigma2)
    log_w = np.where(in_grid, log_w, -np.inf)
    log_w = log_w - np.max(log_w, axis=-1, keepdims=True)
    w = np.exp(log_w)
    return w / w.sum(axis=-1, keepdims=True)


class LocalTimeTable:
    """Per-hop travel times h(s, slot, direction).

    ``values`` has shape (K, N, 8) or (1, N, 8); the single-slot form is
    shared across all slots. Clip counters record how often the Monte
    Carlo estimate hit its bounds.
    """

    def __init__(self, values: np.ndarray, grid: GridMap, clipped_low: int = 0, clipped_high: int = 0):
        values = np.asarray(values, float)
        if values.ndim != 3 or values.shape[1:] != (grid.n_states, N_HEADINGS):
            raise ContractViolation("local time table must have shape (K|1, N, 8)")
        self.values = values
        self.grid = grid
        self.clipped_low = int(clipped_low)
        self.clipped_high = int(clipped_high)

    @property
    def time_varying(self) -> bool:
        return self.values.shape[0] > 1

    def by_direction(self, k: int) -> np.ndarray:
        """(N, 8) travel times at slot k."""
        return self.values[k if self.time_varying else 0]

    def of(self, s: int, k: int, s_next: int) -> float:
        if s == s_next:
            return 0.0
        d = self.grid.heading_between(s, s_next)
        return float(self.by_direction(k)[s, d])


def unit_local_times(grid: GridMap, time_grid: TimeGrid) -> LocalTimeTable:
    """Travel time of exactly one time unit for every connected hop."""
    return LocalTimeTable(np.ones((1, grid.n_states, N_HEADINGS)), grid)


def estimate_local_times_mc(
    field,
    vehicle: VehicleModel,
    grid: GridMap,
    time_grid: TimeGrid,
    trials: int = 100,
    seed: int = 0,
    heading_sigma2: float = 0.0,
) -> LocalTimeTable:
    """Monte Carlo estimate of per-hop travel times under the current field.

    For each (state, slot, neighbor direction) the vehicle aims straight
    at the neighbor; each trial perturbs the realized heading by Gaussian
    angular noise of variance ``heading_sigma2`` (zero noise makes all
    trials identical), adds the local current, and projects the net
    velocity onto the hop direction. Travel time is hop distance over the
    projected speed, floored at 0.1 * max_speed so opposing currents
    cannot produce unbounded times, and the averaged result is clipped to
    [0.1, 10] times the still-water hop time.
    """
    if trials < 1:
        raise ContractViolation("trials must be >= 1")
    n, K = grid.n_states, time_grid.slot_count
    dists = grid.step_lengths  # (8,)
    speed_floor = 0.1 * vehicle.max_speed
    h_nominal = dists / vehicle.max_speed
    h_min, h_max = 0.1 * h_nominal, 10.0 * h_nominal

    pos = grid.positions()
    rng = np.random.default_rng(seed)
    values = np.empty((K, n, N_HEADINGS))
    clipped_low = clipped_high = 0
    for k in range(K):
        cx, cy = field.velocity_grid(pos[:, 0], pos[:, 1], time_grid.time_of(k))
        cur_proj = (
            cx[:, None] * HEADING_UNITS[:, 0] + cy[:, None] * HEADING_UNITS[:, 1]
        )  # (N, 8) current speed toward each neighbor
        if heading_sigma2 > 0.0:
            noise = rng.normal(0.0, np.sqrt(heading_sigma2), size=(n, N_HEADINGS, trials))
            veh_proj = vehicle.max_speed * np.cos(noise)
        else:
            veh_proj = np.full((n, N_HEADINGS, 1), vehicle.max_speed)
        proj = np.maximum(speed_floor, veh_proj + cur_proj[:, :, None])
        h = (dists[None, :, None] / proj).mean(axis=2)
        clipped_low += int(np.count_nonzero(h < h_min))
        clipped_high += int(np.count_nonzero(h > h_max))
        values[k] = np.clip(h, h_min, h_max)
    return LocalTimeTable(values, grid, clipped_low, clipped_high)


def save_local_times_csv(path, table: LocalTimeTable, comment: str | None = None) -> None:
    """Persist a local-time table as rows (s, t_slot, s', h)."""
    grid = table.grid
    with open(path, "w", newline="") as f:
        if comment:
            f.write(f"# {comment}\n")
        w = csv.writer(f)
        w.writerow(["s", "t_slot", "s_prime", "h"])
        for k in range(table.values.shape[0]):
            hk = table.values[k]
            for s in range(grid.n_states):
                for d in range(N_HEADINGS):
                    nxt = grid.neighbor_table[s, d]
                    if nxt < 0:
                        continue
                    w.writerow([s, k, int(nxt), f"{hk[s, d]:.12g}"])


def load_local_times_csv(path, grid: GridMap) -> LocalTimeTable:
    slabs: dict[int, np.ndarray] = {}
    with open(path, newline="") as f:
        for rec in csv.reader(f):
            if not rec or rec[0].startswith("#") or rec[0] == "s":
                continue
            s, k, nxt, h = int(rec[0]), int(rec[1]), int(rec[2]), float(rec[3])
            slab = slabs.setdefault(k, np.ones((grid.n_states, N_HEADINGS)))
            slab[s, grid.heading_between(s, nxt)] = h
    if not slabs:
        raise ContractViolation(f"no local-time rows found in {path}")
    ks = sorted(slabs)
    return LocalTimeTable(np.stack([slabs[k] for k in ks]), grid)


class GridLaw:
    """Time-varying transition law on a grid under a disturbance field.

    For a commanded heading the law builds the net drift (vehicle velocity
    plus current), spreads probability over in-grid neighbor headings via
    :func:`heading_distribution`, and assigns each spatial successor the
    single arrival slot snap(t + h). Goal and obstacle states are
    absorbing. Per-slot tables are memoized; the full dense law over
    (s, t, a) is never materialized at once beyond these slot slabs.
    """

    def __init__(
        self,
        grid: GridMap,
        time_grid: TimeGrid,
        field,
        heading_model: GaussianHeadingModel,
        vehicle: VehicleModel,
        local_times: LocalTimeTable,
        goal: int | None = None,
        obstacles=(),
    ):
        self.grid = grid
        self.time_grid = time_grid
        self.field = field
        self.heading_model = heading_model
        self.vehicle = vehicle
        self.local_times = local_times
        self.goal = goal
        self.obstacles = frozenset(int(s) for s in obstacles)
        self.n_states = grid.n_states
        self.n_actions = N_HEADINGS
        self._feasible = grid.neighbor_table >= 0
        self._cache: dict[int, SlotTables] = {}

    def feasible(self, s: int, k: int) -> np.ndarray:
        return np.nonzero(self._feasible[s])[0]

    def _terminals(self):
        out = set(self.obstacles)
        if self.goal is not None:
            out.add(int(self.goal))
        return out

    def slot_tables(self, k: int) -> SlotTables:
        if k in self._cache:
            return self._cache[k]
        grid, tg = self.grid, self.time_grid
        n = self.n_states
        t_now = tg.time_of(k)
        pos = grid.positions()
        cx, cy = self.field.velocity_grid(pos[:, 0], pos[:, 1], t_now)

        # net drift per (action, state); zero drift falls back to the command
        vx = self.vehicle.max_speed * HEADING_UNITS[:, 0][:, None] + cx[None, :]
        vy = self.vehicle.max_speed * HEADING_UNITS[:, 1][:, None] + cy[None, :]
        speed = np.hypot(vx, vy)
        net_angle = np.arctan2(vy, vx)
        net_angle = np.where(
            speed < 1e-12 * self.vehicle.max_speed,
            HEADING_ANGLES[:, None],
            net_angle,
        )
        probs = heading_distribution(net_angle, self.heading_model.sigma2, self._feasible[None, :, :])

        succ = grid.neighbor_table.copy()
        h = self.local_times.by_direction(k).copy()
        slots = tg.snap_array(t_now + h)
        for s in self._terminals():
            succ[s] = -1
            succ[s, 0] = s
            slots[s] = k
            h[s] = 0.0
            probs[:, s, :] = 0.0
            probs[:, s, 0] = 1.0
        feas = self._feasible.copy()
        tables = SlotTables(succ, slots, probs, h, feas)
        self._cache[k] = tables
        return tables

    def row(self, s: int, k: int, a: int):
        """Transition row for one (state, slot, action) triple."""
        if not self._feasible[s, a] and s not in self._terminals():
            raise ContractViolation(f"heading {a} leaves the grid from state {s}")
        t = self.slot_tables(k)
        keep = t.succ[s] >= 0
        return t.succ[s][keep], t.slots[s][keep], t.probs[a, s][keep], t.local_times[s][keep]
