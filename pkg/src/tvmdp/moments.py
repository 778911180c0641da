"""First and second moments of passage times, and the reachable space.

For a fixed policy, the expected travel time from the start state to
every other state satisfies one linear system per target state: condition
on the first hop, add its local travel time, and recurse. The same
conditioning gives a linear system for the variance once the expected
times are known. Row s of each system evaluates the transition law at
that state's current expected visit time (snapped to the slot grid), so
the systems are refreshed iteratively as the estimates improve.

The target's row is replaced by an identity row (its unknown is zero by
definition), which keeps every system the same size and lets all targets
share one matrix assembly. Systems are solved densely with LU up to 400
states and by sparse GMRES above that. A discount ``alpha`` slightly
below one keeps rows through absorbing or nearly-unreachable states from
blowing up the solution.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .core import ContractViolation, Policy, TimeGrid, TvmdpModel

__all__ = [
    "PptMoments",
    "expected_ppt",
    "ppt_variance",
    "compute_ppt_moments",
    "ReachableSpace",
    "build_reachable_space",
]

DENSE_LIMIT = 400
_CHUNK_DOUBLES = 3_000_000


@dataclass
class PptMoments:
    """Per-state expected passage time and variance from a fixed start."""

    mu: np.ndarray
    var: np.ndarray | None
    alpha: float
    unreachable: np.ndarray
    raw_var_min: float = 0.0
    neg_var_count: int = 0

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.var, 0.0))

    def to_csv(self, path, comment: str | None = None) -> None:
        with open(path, "w", newline="") as f:
            if comment:
                f.write(f"# {comment}\n")
            w = csv.writer(f)
            w.writerow(["s", "mu", "sigma2", "unreachable"])
            var = self.var if self.var is not None else np.zeros_like(self.mu)
            for s in range(len(self.mu)):
                w.writerow([s, f"{self.mu[s]:.12g}", f"{var[s]:.12g}", int(self.unreachable[s])])


def _frozen_rows(model: TvmdpModel, policy: Policy, ltt, times_by_state: np.ndarray):
    """Dense (T, H): transition row and hop-time row for each state.

    Row s uses the law at slot snap(times_by_state[s]) under the policy's
    action there. T is the spatial marginal (each spatial successor has a
    single arrival slot, so no mass is lost by dropping the slot index).
    """
    n = model.n_states
    tg = model.time_grid
    slots = tg.snap_array(np.asarray(times_by_state, float))
    T = np.zeros((n, n))
    H = np.zeros((n, n))
    for u in np.unique(slots):
        rows = np.nonzero(slots == u)[0]
        tables = model.law.slot_tables(int(u))
        actions = np.array([policy.lookup(int(s), int(u)) for s in rows])
        succ = tables.succ[rows]
        probs = tables.probs[actions, rows, :]
        if ltt is None:
            hvals = tables.local_times[rows]
        else:
            hvals = ltt.by_direction(int(u))[rows]
        valid = succ >= 0
        r_idx = np.repeat(rows, succ.shape[1]).reshape(succ.shape)
        T[r_idx[valid], succ[valid]] = probs[valid]
        H[r_idx[valid], succ[valid]] = hvals[valid]
    H[np.arange(n), np.arange(n)] = 0.0  # self hops take no time
    return T, H


def _chunks(targets: np.ndarray, n: int, workers: int):
    cap = max(1, _CHUNK_DOUBLES // max(1, n * n))
    per_worker = max(1, -(-len(targets) // max(1, workers)))
    size = max(1, min(cap, per_worker))
    return [targets[i : i + size] for i in range(0, len(targets), size)]


def _run_chunks(fn, chunks, workers: int):
    if workers <= 1 or len(chunks) <= 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, chunks))


def _dense_solve(A: np.ndarray, rhs_of, targets: np.ndarray, workers: int):
    """Solve the per-target systems with the target row forced to identity.

    ``rhs_of(chunk)`` returns the (m, N) right-hand sides for a chunk of
    targets. Returns the stacked solutions and a failure flag per target.
    """
    n = A.shape[0]
    sol = np.empty((len(targets), n))
    failed = np.zeros(len(targets), dtype=bool)
    chunks = _chunks(np.asarray(targets), n, workers)
    offsets = np.cumsum([0] + [len(c) for c in chunks])

    def run(chunk):
        m = len(chunk)
        Ai = np.repeat(A[None, :, :], m, axis=0)
        bi = rhs_of(chunk).copy()
        r = np.arange(m)
        Ai[r, chunk, :] = 0.0
        Ai[r, chunk, chunk] = 1.0
        bi[r, chunk] = 0.0
        try:
            return np.linalg.solve(Ai, bi[:, :, None])[:, :, 0], np.zeros(m, dtype=bool)
        except np.linalg.LinAlgError:
            out = np.full((m, n), np.nan)
            bad = np.zeros(m, dtype=bool)
            for i in range(m):
                try:
                    out[i] = np.linalg.solve(Ai[i], bi[i])
                except np.linalg.LinAlgError:
                    bad[i] = True
            return out, bad

    results = _run_chunks(run, chunks, workers)
    for i, (x, bad) in enumerate(results):
        sol[offsets[i] : offsets[i + 1]] = x
        failed[offsets[i] : offsets[i + 1]] = bad
    return sol, failed


def _sparse_solve(A_dense: np.ndarray, rhs_of, targets: np.ndarray, workers: int):
    """GMRES per target for large systems (tolerance 1e-8, 10 N iterations)."""
    n = A_dense.shape[0]
    base = sp.coo_matrix(A_dense)
    rows, cols, vals = base.row, base.col, base.data
    sol = np.empty((len(targets), n))
    failed = np.zeros(len(targets), dtype=bool)
    chunks = _chunks(np.asarray(targets), n, workers)
    offsets = np.cumsum([0] + [len(c) for c in chunks])

    def run(chunk):
        out = np.empty((len(chunk), n))
        bad = np.zeros(len(chunk), dtype=bool)
        bs = rhs_of(chunk)
        for i, t in enumerate(chunk):
            keep = rows != t
            r2 = np.concatenate([rows[keep], [t]])
            c2 = np.concatenate([cols[keep], [t]])
            v2 = np.concatenate([vals[keep], [1.0]])
            At = sp.csr_matrix((v2, (r2, c2)), shape=(n, n))
            b = bs[i].copy()
            b[t] = 0.0
            x, info = spla.gmres(At, b, rtol=1e-8, atol=0.0, maxiter=10 * n)
            out[i] = x
            bad[i] = info != 0
        return out, bad

    results = _run_chunks(run, chunks, workers)
    for i, (x, bad) in enumerate(results):
        sol[offsets[i] : offsets[i + 1]] = x
        failed[offsets[i] : offsets[i + 1]] = bad
    return sol, failed


def _solve_targets(A, rhs_of, targets, workers):
    if A.shape[0] <= DENSE_LIMIT:
        return _dense_solve(A, rhs_of, targets, workers)
    return _sparse_solve(A, rhs_of, targets, workers)


def _expected_systems(model, policy, ltt, times, alpha, workers, s0):
    """Solve all per-target expected-time systems at the given row times.

    Returns (mu, E_full, T, H, failed): E_full[i] is the full solution
    vector for targets[i], needed by the variance recursion.
    """
    n = model.n_states
    T, H = _frozen_rows(model, policy, ltt, times)
    A = np.eye(n) - alpha * T
    rhs = (T * H).sum(axis=1)
    targets = np.array([s for s in range(n) if s != s0])

    def rhs_of(chunk):
        return np.repeat(rhs[None, :], len(chunk), axis=0)

    E, failed = _solve_targets(A, rhs_of, targets, workers)
    mu = np.zeros(n)
    mu[targets] = E[:, s0]
    return mu, E, T, H, targets, failed


_SENTINEL_FACTOR = 10.0


def _apply_sentinels(mu, targets, failed, horizon):
    sentinel = _SENTINEL_FACTOR * horizon
    vals = mu[targets]
    bad = failed | ~np.isfinite(vals) | (vals < -1e-6) | (vals > sentinel)
    vals = np.where(bad, sentinel, np.maximum(vals, 0.0))
    mu[targets] = vals
    flags = np.zeros(len(mu), dtype=bool)
    flags[targets[bad]] = True
    return flags


def expected_ppt(
    model: TvmdpModel,
    policy: Policy,
    ltt=None,
    prev_mu: np.ndarray | None = None,
    alpha: float = 0.99,
    workers: int = 1,
    s0: int | None = None,
) -> np.ndarray:
    """Expected passage time from the start to every state under a policy.

    Row times come from ``prev_mu`` (the previous iteration's estimate;
    all zeros on the first pass). Targets whose system is singular or
    blows up are marked with the sentinel value 10 * horizon.
    """
    s0 = model.start if s0 is None else int(s0)
    if s0 is None:
        raise ContractViolation("expected_ppt needs a start state")
    n = model.n_states
    if prev_mu is None:
        prev_mu = np.zeros(n)
    mu, _, _, _, targets, failed = _expected_systems(model, policy, ltt, prev_mu, alpha, workers, s0)
    _apply_sentinels(mu, targets, failed, model.time_grid.horizon)
    return mu


def ppt_variance(
    model: TvmdpModel,
    policy: Policy,
    ltt=None,
    mu: np.ndarray | None = None,
    alpha: float = 0.99,
    workers: int = 1,
    s0: int | None = None,
) -> np.ndarray:
    """Variance of the passage time, given this iteration's expected times."""
    if mu is None:
        raise ContractViolation("ppt_variance needs the expected times mu")
    s0 = model.start if s0 is None else int(s0)
    moments = _variance_phase(model, policy, ltt, np.asarray(mu, float), alpha, workers, s0)
    return moments.var


def _variance_phase(model, policy, ltt, mu, alpha, workers, s0, reuse=None) -> PptMoments:
    """Solve the per-target variance systems.

    ``reuse`` may carry (E, T, H, targets, failed) from an expected-time
    phase whose rows were built at the same anchor times, skipping the
    re-freeze at mu.
    """
    n = model.n_states
    if reuse is None:
        _, E, T, H, targets, failed_e = _expected_systems(model, policy, ltt, mu, alpha, workers, s0)
    else:
        E, T, H, targets, failed_e = reuse
    A = np.eye(n) - alpha * T

    idx_of = {int(t): i for i, t in enumerate(targets)}

    def rhs_of(chunk):
        rows = np.array([idx_of[int(t)] for t in chunk])
        Ec = E[rows]
        diff = H[None, :, :] + Ec[:, None, :] - Ec[:, :, None]
        return (T[None, :, :] * diff * diff).sum(axis=2)

    V, failed_v = _solve_targets(A, rhs_of, targets, workers)
    var = np.zeros(n)
    var[targets] = V[:, s0]
    failed = failed_e | failed_v | ~np.isfinite(var[targets])
    ok_vals = var[targets[~failed]]
    raw_min = float(ok_vals.min()) if ok_vals.size else 0.0
    neg = int(np.count_nonzero(ok_vals < 0.0))
    var = np.maximum(var, 0.0)
    var[targets[failed]] = 0.0
    flags = np.zeros(n, dtype=bool)
    flags[targets[failed]] = True
    return PptMoments(mu.copy(), var, alpha, flags, raw_var_min=raw_min, neg_var_count=neg)


def compute_ppt_moments(
    model: TvmdpModel,
    policy: Policy,
    ltt=None,
    prev_mu: np.ndarray | None = None,
    alpha: float = 0.99,
    workers: int = 1,
    s0: int | None = None,
    with_variance: bool = True,
    refreeze_variance: bool = True,
) -> PptMoments:
    """Expected times (rows frozen at prev_mu) plus variances.

    With ``refreeze_variance`` the variance systems are rebuilt at the
    refreshed expected times, matching the standalone :func:`ppt_variance`
    operation. The solvers pass False to evaluate the variance at the
    same anchor rows as the expected phase, which reuses the assembled
    systems (the recursions differ only through the snapped row times).
    """
    s0 = model.start if s0 is None else int(s0)
    if s0 is None:
        raise ContractViolation("moment computation needs a start state")
    n = model.n_states
    if prev_mu is None:
        prev_mu = np.zeros(n)
    mu, E, T, H, targets, failed = _expected_systems(model, policy, ltt, prev_mu, alpha, workers, s0)
    flags_mu = _apply_sentinels(mu, targets, failed, model.time_grid.horizon)
    if not with_variance:
        return PptMoments(mu, None, alpha, flags_mu)
    reuse = None if refreeze_variance else (E, T, H, targets, failed)
    out = _variance_phase(model, policy, ltt, mu, alpha, workers, s0, reuse=reuse)
    out.unreachable |= flags_mu
    out.var[out.unreachable] = 0.0
    return out


@dataclass
class ReachableSpace:
    """Per-state time windows and the (state, slot) membership they induce."""

    lower: np.ndarray
    upper: np.ndarray
    member: np.ndarray  # (N, K) bool
    m_r: float
    time_grid: TimeGrid
    entry_slot: np.ndarray
    exit_slot: np.ndarray

    def contains(self, s: int, k: int) -> bool:
        return bool(self.member[s, k])

    def size(self) -> int:
        return int(self.member.sum())

    def members_at(self, k: int) -> np.ndarray:
        return np.nonzero(self.member[:, k])[0]

    def to_csv(self, path, comment: str | None = None) -> None:
        with open(path, "w", newline="") as f:
            if comment:
                f.write(f"# {comment}\n")
            w = csv.writer(f)
            w.writerow(["s", "t_slot"])
            for s, k in zip(*np.nonzero(self.member)):
                w.writerow([int(s), int(k)])


def build_reachable_space(
    mu: np.ndarray,
    var: np.ndarray,
    m_r: float,
    time_grid: TimeGrid,
    unreachable: np.ndarray | None = None,
) -> ReachableSpace:
    """Slots whose time lies within m_r standard deviations of each state's
    expected visit time, intersected with [0, horizon].

    A zero-width window that falls between two slot times is widened to
    the slot nearest the expected time, so every reachable state owns at
    least one slot. States flagged unreachable get an empty window, and
    so do states whose expected visit time lies beyond the horizon:
    their (often enormous) variance would otherwise let them claim slots
    across the whole mission even though they cannot be reached in time.
    """
    if m_r < 1.0:
        raise ContractViolation("regulation parameter m_r must be >= 1")
    mu = np.asarray(mu, float)
    sigma = np.sqrt(np.maximum(np.asarray(var, float), 0.0))
    lower = np.maximum(mu - m_r * sigma, 0.0)
    upper = np.minimum(mu + m_r * sigma, time_grid.horizon)
    times = time_grid.slot_times
    member = (times[None, :] >= lower[:, None] - 1e-9) & (times[None, :] <= upper[:, None] + 1e-9)
    if unreachable is None:
        unreachable = np.zeros(len(mu), dtype=bool)
    member[unreachable] = False
    member[mu > time_grid.horizon + 1e-9] = False

    empty = ~member.any(axis=1)
    widen = empty & ~unreachable & (mu <= time_grid.horizon + 1e-9)
    if widen.any():
        snap = time_grid.snap_array(mu[widen])
        member[np.nonzero(widen)[0], snap] = True

    any_row = member.any(axis=1)
    entry = np.where(any_row, member.argmax(axis=1), -1)
    exit_ = np.where(any_row, member.shape[1] - 1 - member[:, ::-1].argmax(axis=1), -1)
    return ReachableSpace(lower, upper, member, float(m_r), time_grid, entry, exit_)
