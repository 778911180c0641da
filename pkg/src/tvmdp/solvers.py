"""Policy solvers for time-varying MDPs.

Four related solvers share one Bellman backup kernel:

* ``solve_full_st_vi``: value iteration over the entire (state, slot)
  product space. Exact but expensive; the baseline.
* ``solve_expected_ppt_vi``: value iteration over states alone, with the
  law frozen at each state's expected visit time; refreshes those times
  after every sweep. Produces a time-independent policy.
* ``solve_reachable_vi``: alternates passage-time moments, reachable-space
  construction, transition reconstruction, and value iteration restricted
  to the reachable slots. Actions outside the reachable space are copied
  from the nearest member state at the same slot.
* ``solve_non_iterative``: single reachable-space pass with the inner
  value iteration run to convergence.

All solvers are deterministic: they use no random numbers.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .core import ContractViolation, Policy, SlotTables, TvmdpModel, ValueTable
from .moments import PptMoments, ReachableSpace, build_reachable_space, compute_ppt_moments

__all__ = [
    "SolverConfig",
    "SolveResult",
    "solve_full_st_vi",
    "solve_expected_ppt_vi",
    "ReconstructedLaw",
    "reconstruct",
    "solve_reachable_vi",
    "solve_non_iterative",
    "map_action",
    "fill_actions_outside",
]


@dataclass
class SolverConfig:
    """Knobs shared by the solver family.

    ``gamma=None`` defers to the model's discount. ``burn_in``, ``outer``
    and ``inner`` are the loop counts of the reachable-space solver:
    burn-in iterations of the expected-time solver, outer
    moment/reconstruction rounds, and inner VI sweeps per round.
    """

    gamma: float | None = None
    delta_tol: float = 1e-4
    max_iterations: int = 500
    burn_in: int = 3
    outer: int = 20
    inner: int = 30
    m_r: float = 2.0
    alpha: float = 0.99
    mu_damping: float = 0.5
    workers: int = 1

    def __post_init__(self):
        if self.delta_tol <= 0:
            raise ContractViolation("delta_tol must be positive")
        if min(self.burn_in, self.outer, self.inner) < 1:
            raise ContractViolation("loop counts burn_in, outer, inner must be >= 1")
        if self.gamma is not None and not (0.0 <= self.gamma < 1.0):
            raise ContractViolation("gamma must lie in [0, 1)")
        if self.m_r < 1.0:
            raise ContractViolation("m_r must be >= 1")
        if not (0.0 < self.alpha <= 1.0):
            raise ContractViolation("alpha must lie in (0, 1]")
        if not (0.0 < self.mu_damping <= 1.0):
            raise ContractViolation("mu_damping must lie in (0, 1]")


@dataclass
class SolveResult:
    """Solver output: policy, values, and run diagnostics."""

    policy: Policy
    values: ValueTable
    converged: bool
    iterations: int
    timings: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)


def _gamma(model: TvmdpModel, cfg: SolverConfig) -> float:
    return model.gamma if cfg.gamma is None else cfg.gamma


def _terminal_arrays(model: TvmdpModel):
    n = model.n_states
    mask = np.zeros(n, dtype=bool)
    vals = np.zeros(n)
    for s in model.terminal_states():
        mask[s] = True
        vals[s] = model.terminal_value(s)
    return mask, vals


def _backup_rows(values: np.ndarray, tables: SlotTables, rewards: np.ndarray, gamma: float, rows: np.ndarray):
    """Q-values (A, M) for the given state rows at one slot.

    ``values`` is the (N, K) table; successor values are gathered at the
    successor's own arrival slot. Infeasible actions score -inf.
    """
    succ = tables.succ[rows]
    slots = tables.slots[rows]
    valid = succ >= 0
    sc = np.where(valid, succ, 0)
    sl = np.where(valid, slots, 0)
    vg = np.where(valid, values[sc, sl], 0.0)
    pr = tables.probs[:, rows, :]
    q = rewards[rows].T + gamma * (pr * vg[None, :, :]).sum(axis=-1)
    return np.where(tables.feasible[rows].T, q, -np.inf)


def _backup_rows_spatial(v: np.ndarray, tables: SlotTables, rewards: np.ndarray, gamma: float, rows: np.ndarray):
    """Q-values (A, M) against a purely spatial value vector v of shape (N,)."""
    succ = tables.succ[rows]
    valid = succ >= 0
    vg = np.where(valid, v[np.where(valid, succ, 0)], 0.0)
    pr = tables.probs[:, rows, :]
    q = rewards[rows].T + gamma * (pr * vg[None, :, :]).sum(axis=-1)
    return np.where(tables.feasible[rows].T, q, -np.inf)


def _first_feasible(tables: SlotTables) -> np.ndarray:
    return tables.feasible.argmax(axis=1)


def solve_full_st_vi(model: TvmdpModel, cfg: SolverConfig | None = None) -> SolveResult:
    """Value iteration over the full spatiotemporal space.

    Sweeps slots backward (later slots first) until the largest value
    update falls below ``delta_tol``. The last slot reuses its own
    transition data for targets beyond the horizon, so its values solve a
    stationary fixed point reached by repeated sweeps.
    """
    cfg = cfg or SolverConfig()
    gamma = _gamma(model, cfg)
    n, K = model.n_states, model.time_grid.slot_count
    t_mask, t_vals = _terminal_arrays(model)
    rows = np.nonzero(~t_mask)[0]

    values = np.zeros((n, K))
    values[t_mask, :] = t_vals[t_mask, None]

    t0 = time.perf_counter()
    converged = False
    sweeps = 0
    for sweeps in range(1, cfg.max_iterations + 1):
        delta = 0.0
        for k in reversed(range(K)):
            tables = model.law.slot_tables(k)
            q = _backup_rows(values, tables, model.reward_table(k), gamma, rows)
            vnew = q.max(axis=0)
            delta = max(delta, float(np.abs(vnew - values[rows, k]).max()))
            values[rows, k] = vnew
        if delta < cfg.delta_tol:
            converged = True
            break
    total = time.perf_counter() - t0

    actions = np.zeros((n, K), dtype=np.int64)
    for k in range(K):
        tables = model.law.slot_tables(k)
        q = _backup_rows(values, tables, model.reward_table(k), gamma, rows)
        actions[rows, k] = q.argmax(axis=0)
        actions[t_mask, k] = _first_feasible(tables)[t_mask]

    return SolveResult(
        policy=Policy(actions),
        values=ValueTable(values),
        converged=converged,
        iterations=sweeps,
        timings={"total": total, "per_iteration": [total], "sweeps": sweeps},
        extras={},
    )


def solve_expected_ppt_vi(
    model: TvmdpModel,
    cfg: SolverConfig | None = None,
    iterations: int | None = None,
) -> SolveResult:
    """Value iteration over states with the law frozen at expected visit times.

    Each outer iteration runs one in-place Bellman sweep over states
    (row s evaluated at slot snap(mu[s])), extracts the greedy policy,
    then refreshes the expected passage times under that policy. Stops
    when the sweep's largest update falls below ``delta_tol`` or after
    ``iterations`` rounds when given (burn-in mode).
    """
    cfg = cfg or SolverConfig()
    gamma = _gamma(model, cfg)
    n = model.n_states
    t_mask, t_vals = _terminal_arrays(model)
    tg = model.time_grid

    v = np.zeros(n)
    v[t_mask] = t_vals[t_mask]
    mu = np.zeros(n)
    policy = None
    per_iter, bell_times, mom_times = [], [], []
    converged = False
    stop_reason = "max_iterations"
    max_rounds = iterations if iterations is not None else cfg.max_iterations
    # the (policy, frozen-slot) pair can enter a limit cycle on strongly
    # time-varying models, so delta never reaches delta_tol; stop once the
    # best delta seen has stopped improving for a stretch of iterations
    best_delta = np.inf
    stalled = 0
    patience = 25

    it = 0
    for it in range(1, max_rounds + 1):
        t0 = time.perf_counter()
        slots_u = tg.snap_array(mu)
        delta = 0.0
        for s in range(n):
            if t_mask[s]:
                continue
            tables = model.law.slot_tables(int(slots_u[s]))
            q = _backup_rows_spatial(v, tables, model.reward_table(int(slots_u[s])), gamma, np.array([s]))
            vnew = float(q.max())
            delta = max(delta, abs(vnew - v[s]))
            v[s] = vnew
        actions = np.zeros(n, dtype=np.int64)
        for s in range(n):
            tables = model.law.slot_tables(int(slots_u[s]))
            if t_mask[s]:
                actions[s] = _first_feasible(tables)[s]
                continue
            q = _backup_rows_spatial(v, tables, model.reward_table(int(slots_u[s])), gamma, np.array([s]))
            actions[s] = int(q.argmax())
        policy = Policy(actions, time_independent=True)
        t1 = time.perf_counter()
        moments = compute_ppt_moments(
            model, policy, prev_mu=mu, alpha=cfg.alpha, workers=cfg.workers, with_variance=False
        )
        # relaxed carry: the (policy, frozen-time) fixed point tends to
        # oscillate on rotating fields when the fresh estimate is carried
        # verbatim
        mu = cfg.mu_damping * moments.mu + (1.0 - cfg.mu_damping) * mu
        t2 = time.perf_counter()
        bell_times.append(t1 - t0)
        mom_times.append(t2 - t1)
        per_iter.append(t2 - t0)
        if iterations is None and delta < cfg.delta_tol:
            converged = True
            stop_reason = "converged"
            break
        if iterations is None:
            if delta < best_delta - 1e-12:
                best_delta = delta
                stalled = 0
            else:
                stalled += 1
            if stalled >= patience:
                stop_reason = "stalled"
                break

    return SolveResult(
        policy=policy,
        values=ValueTable(v),
        converged=converged,
        iterations=it,
        timings={
            "total": sum(per_iter),
            "per_iteration": per_iter,
            "bellman": bell_times,
            "moments": mom_times,
        },
        extras={"mu": mu, "stop_reason": stop_reason},
    )


class ReconstructedLaw:
    """Overlay law whose member rows target only reachable (state, slot) pairs.

    For each transition out of a reachable (s, t): successor mass arriving
    before the successor's window is pulled forward onto the window's first
    slot; mass arriving after the window is dropped and the remainder
    renormalized; if nothing remains, all successor mass is redirected to
    the successors' window entry slots. Rows outside the reachable space
    are passed through unchanged.
    """

    def __init__(self, law, rs: ReachableSpace):
        self.base = law
        self.rs = rs
        self.n_states = law.n_states
        self.n_actions = law.n_actions
        self._cache: dict[int, SlotTables] = {}
        self.rows_modified = 0
        self.mass_moved = 0.0
        self.mass_dropped = 0.0
        self.redirected_rows = 0
        self.pathological_rows = 0

    def feasible(self, s: int, k: int):
        return self.base.feasible(s, k)

    def row(self, s: int, k: int, a: int):
        t = self.slot_tables(k)
        keep = (t.succ[s] >= 0) & (t.probs[a, s] > 0.0)
        return t.succ[s][keep], t.slots[s][keep], t.probs[a, s][keep], t.local_times[s][keep]

    def slot_tables(self, k: int) -> SlotTables:
        if k in self._cache:
            return self._cache[k]
        base = self.base.slot_tables(k)
        rs = self.rs
        member_rows = rs.members_at(k)
        if member_rows.size == 0:
            self._cache[k] = base
            return base

        times = rs.time_grid.slot_times
        succ, slots0, probs0 = base.succ, base.slots, base.probs
        valid = succ >= 0
        sc = np.where(valid, succ, 0)
        tgt_member = rs.member[sc, slots0] & valid
        entry = rs.entry_slot[sc]
        window_ok = (entry >= 0) & valid
        below = valid & ~tgt_member & (times[slots0] < rs.lower[sc] - 1e-9)
        keep = tgt_member | (below & window_ok)

        slots_new = np.where(tgt_member, slots0, np.where(window_ok, entry, slots0))
        new_slots = slots0.copy()
        new_slots[member_rows] = slots_new[member_rows]

        p = probs0[:, member_rows, :]
        kp = keep[member_rows][None, :, :]
        el = window_ok[member_rows][None, :, :]
        m = (p * kp).sum(axis=-1)
        me = (p * el).sum(axis=-1)
        feas = base.feasible[member_rows].T
        normal = m > 1e-12
        fallback = ~normal & (me > 1e-12)
        denom_m = np.where(normal, m, 1.0)
        denom_e = np.where(me > 1e-12, me, 1.0)
        p_new = np.where(
            normal[:, :, None],
            p * kp / denom_m[:, :, None],
            np.where(fallback[:, :, None], p * el / denom_e[:, :, None], p),
        )
        new_probs = probs0.copy()
        new_probs[:, member_rows, :] = p_new

        self.rows_modified += int(member_rows.size)
        self.mass_moved += float((p * (below & window_ok)[member_rows][None]).sum())
        self.mass_dropped += float((p * (valid[member_rows][None] & ~kp)).sum())
        self.redirected_rows += int((fallback & feas).sum())
        self.pathological_rows += int((~normal & ~fallback & feas).sum())

        tables = SlotTables(succ, new_slots, new_probs, base.local_times, base.feasible)
        self._cache[k] = tables
        return tables


def reconstruct(model: TvmdpModel, rs: ReachableSpace) -> ReconstructedLaw:
    """Reassign transition mass so reachable rows target reachable pairs."""
    return ReconstructedLaw(model.law, rs)


def _coerce_feasible(action: int, s: int, grid) -> int:
    """Snap a copied action to state s's feasible set by angular closeness."""
    from .core import HEADING_ANGLES, wrap_angle

    if grid.neighbor_table[s, action] >= 0:
        return int(action)
    feas = grid.feasible_headings(s)
    diff = np.abs(wrap_angle(HEADING_ANGLES[feas] - HEADING_ANGLES[action]))
    return int(feas[int(np.argmin(diff))])


def map_action(policy: Policy, rs: ReachableSpace, s: int, t: int, grid=None) -> int:
    """Action for a (state, slot) outside the reachable space.

    Copies the action of the nearest member state at the same slot
    (Euclidean grid distance, ties to the lowest state index). If the
    slot has no members at all, the nearest slot with members is used,
    earlier slots winning distance ties. Copied actions that would leave
    the grid from s are snapped to s's angularly closest feasible heading.
    """
    if rs.contains(s, t):
        raise ContractViolation(f"({s}, {t}) is inside the reachable space")
    if grid is None:
        raise ContractViolation("action mapping needs the grid geometry")
    members = rs.members_at(t)
    k_src = t
    if members.size == 0:
        times = rs.time_grid.slot_times
        candidates = [k for k in range(rs.time_grid.slot_count) if rs.members_at(k).size > 0]
        if not candidates:
            raise ContractViolation("reachable space is empty")
        k_src = min(candidates, key=lambda kk: (abs(times[kk] - times[t]), kk))
        members = rs.members_at(k_src)
    rc = np.array([grid.coords(int(m)) for m in members])
    r0, c0 = grid.coords(int(s))
    d2 = (rc[:, 0] - r0) ** 2 + (rc[:, 1] - c0) ** 2
    pick = int(members[int(np.argmin(d2))])  # members sorted ascending; argmin takes first
    return _coerce_feasible(policy.lookup(pick, k_src), s, grid)


def fill_actions_outside(table: np.ndarray, rs: ReachableSpace, grid) -> None:
    """Fill non-member entries of an action table from nearest members, in place."""
    K = rs.time_grid.slot_count
    times = rs.time_grid.slot_times
    slots_with = [k for k in range(K) if rs.members_at(k).size > 0]
    if not slots_with:
        raise ContractViolation("reachable space is empty")
    all_states = np.arange(table.shape[0])
    rc = np.array([grid.coords(int(s)) for s in all_states])
    for k in range(K):
        members = rs.members_at(k)
        if members.size > 0:
            k_src = k
            outside = all_states[~rs.member[:, k]]
        else:
            k_src = min(slots_with, key=lambda kk: (abs(times[kk] - times[k]), kk))
            members = rs.members_at(k_src)
            outside = all_states
        if outside.size == 0:
            continue
        mrc = rc[members]
        d2 = (rc[outside, 0][:, None] - mrc[None, :, 0]) ** 2 + (
            rc[outside, 1][:, None] - mrc[None, :, 1]
        ) ** 2
        picks = members[np.argmin(d2, axis=1)]
        copied = table[picks, k_src]
        table[outside, k] = [_coerce_feasible(int(a), int(s), grid) for a, s in zip(copied, outside)]


def _reachable_sweeps(model, provider, rs, values, gamma, cfg, to_convergence: bool):
    """Run VI sweeps restricted to reachable rows; return greedy actions."""
    K = model.time_grid.slot_count
    t_mask, _ = _terminal_arrays(model)

    # hoist per-slot gather data out of the sweep loop
    prep = []
    for k in range(K):
        rows = rs.members_at(k)
        rows = rows[~t_mask[rows]]
        if rows.size == 0:
            prep.append(None)
            continue
        tables = provider.slot_tables(k)
        succ = tables.succ[rows]
        valid = succ >= 0
        sc = np.where(valid, succ, 0)
        sl = np.where(valid, tables.slots[rows], 0)
        pr = tables.probs[:, rows, :]
        rw = model.reward_table(k)[rows].T
        feas = tables.feasible[rows].T
        prep.append((rows, sc, sl, valid, pr, rw, feas))

    def q_at(k):
        rows, sc, sl, valid, pr, rw, feas = prep[k]
        vg = np.where(valid, values[sc, sl], 0.0)
        q = rw + gamma * (pr * vg[None, :, :]).sum(axis=-1)
        return rows, np.where(feas, q, -np.inf)

    sweeps_done = 0
    limit = cfg.max_iterations if to_convergence else cfg.inner
    while sweeps_done < limit:
        delta = 0.0
        for k in reversed(range(K)):
            if prep[k] is None:
                continue
            rows, q = q_at(k)
            vnew = q.max(axis=0)
            delta = max(delta, float(np.abs(vnew - values[rows, k]).max()))
            values[rows, k] = vnew
        sweeps_done += 1
        if to_convergence and delta < cfg.delta_tol:
            break

    greedy = np.full((model.n_states, K), -1, dtype=np.int64)
    for k in range(K):
        if prep[k] is None:
            continue
        rows, q = q_at(k)
        greedy[rows, k] = q.argmax(axis=0)
    return greedy, sweeps_done


def _full_membership(model) -> ReachableSpace:
    n, tg = model.n_states, model.time_grid
    member = np.ones((n, tg.slot_count), dtype=bool)
    return ReachableSpace(
        lower=np.zeros(n),
        upper=np.full(n, tg.horizon),
        member=member,
        m_r=1.0,
        time_grid=tg,
        entry_slot=np.zeros(n, dtype=np.int64),
        exit_slot=np.full(n, tg.slot_count - 1, dtype=np.int64),
    )


def solve_reachable_vi(model: TvmdpModel, cfg: SolverConfig | None = None, non_iterative: bool = False) -> SolveResult:
    """Reachable-space value iteration.

    Burn-in seeds a policy with the expected-time solver; each outer round
    recomputes passage-time moments under the current policy, rebuilds the
    reachable space and the reconstructed law, runs inner VI sweeps on the
    member rows, and maps actions outside. Stops early when two successive
    policies agree on the current member set.
    """
    cfg = cfg or SolverConfig()
    if model.grid is None:
        raise ContractViolation("reachable-space solver needs a grid geometry for action mapping")
    gamma = _gamma(model, cfg)
    n, K = model.n_states, model.time_grid.slot_count
    t_mask, t_vals = _terminal_arrays(model)

    burn = solve_expected_ppt_vi(model, cfg, iterations=cfg.burn_in)
    table = burn.policy.action_table(K).copy()
    mu_prev = burn.extras["mu"]

    values = np.zeros((n, K))
    values[t_mask, :] = t_vals[t_mask, None]

    visited = np.zeros((n, K), dtype=bool)
    sizes, cum_visited, per_iter = [], [], []
    phase_times = {"moments": [], "reconstruct": [], "vi": []}
    moments: PptMoments | None = None
    rs = None
    fallback_count = 0
    stopped_early = False
    outer_rounds = 1 if non_iterative else cfg.outer

    j = 0
    for j in range(outer_rounds):
        t0 = time.perf_counter()
        moments = compute_ppt_moments(
            model,
            Policy(table),
            prev_mu=mu_prev,
            alpha=cfg.alpha,
            workers=cfg.workers,
            refreeze_variance=False,
        )
        mu_prev = cfg.mu_damping * moments.mu + (1.0 - cfg.mu_damping) * mu_prev
        t1 = time.perf_counter()
        rs = build_reachable_space(moments.mu, moments.var, cfg.m_r, model.time_grid, moments.unreachable)
        if rs.size() == 0:
            rs = _full_membership(model)
            fallback_count += 1
        recon = reconstruct(model, rs)
        t2 = time.perf_counter()
        greedy, _ = _reachable_sweeps(
            model, recon, rs, values, gamma, cfg, to_convergence=non_iterative
        )
        t3 = time.perf_counter()

        new_table = table.copy()
        mask = (greedy >= 0) & rs.member
        new_table[mask] = greedy[mask]
        fill_actions_outside(new_table, rs, model.grid)

        sizes.append(rs.size())
        visited |= rs.member
        cum_visited.append(int(visited.sum()))
        phase_times["moments"].append(t1 - t0)
        phase_times["reconstruct"].append(t2 - t1)
        phase_times["vi"].append(t3 - t2)
        per_iter.append(t3 - t0)

        same = bool(np.array_equal(new_table[rs.member], table[rs.member]))
        table = new_table
        if j > 0 and same:
            stopped_early = True
            break

    return SolveResult(
        policy=Policy(table),
        values=ValueTable(values),
        converged=stopped_early or non_iterative,
        iterations=j + 1,
        timings={
            "total": sum(per_iter) + burn.timings["total"],
            "per_iteration": per_iter,
            "burn_in": burn.timings["total"],
            "phases": phase_times,
        },
        extras={
            "moments": moments,
            "reachable_space": rs,
            "reachable_sizes": sizes,
            "cumulative_visited": cum_visited,
            "fallback_full_space": fallback_count,
            "burn_in_iterations": burn.iterations,
        },
    )


def solve_non_iterative(model: TvmdpModel, cfg: SolverConfig | None = None) -> SolveResult:
    """One reachable-space pass with inner value iteration run to convergence."""
    cfg = cfg or SolverConfig()
    return solve_reachable_vi(model, replace(cfg, outer=1), non_iterative=True)
