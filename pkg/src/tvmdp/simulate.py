"""Policy execution in the stochastic time-varying environment.

Rollouts always sample the original transition law (reconstruction is a
solver-internal approximation and does not alter the world). Each rollout
tracks both the slot index used for policy lookups and the exact elapsed
travel time accumulated across hops, which is the passage time of the
realized path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ContractViolation, Policy, TvmdpModel

__all__ = [
    "Rollout",
    "rollout",
    "evaluate_policy_return",
    "benchmark",
    "PolicyStats",
    "first_visit_oracle",
]


@dataclass
class Rollout:
    """One executed trajectory."""

    steps: list = field(default_factory=list)  # (state, slot, action, reward)
    outcome: str = "horizon_exhausted"
    transitions: int = 0
    elapsed_time: float = 0.0
    trajectory_length: float = 0.0
    discounted_return: float = 0.0


def _sample_index(rng, probs: np.ndarray) -> int:
    cum = np.cumsum(probs)
    u = rng.random() * cum[-1]
    return int(np.searchsorted(cum, u, side="right").clip(0, len(cum) - 1))


def rollout(model: TvmdpModel, policy: Policy, s0: int, seed, max_steps: int | None = None) -> Rollout:
    """Sample one trajectory from (s0, slot 0) under the policy.

    Terminal rewards are collected on arrival; the per-step reward is
    paid when the action is taken. Deterministic for a fixed seed.
    """
    if max_steps is None:
        max_steps = 2 * model.time_grid.slot_count
    if max_steps < 1:
        raise ContractViolation("max_steps must be >= 1")
    rng = np.random.default_rng(seed)
    out = Rollout()
    s, k = int(s0), 0
    disc = 1.0
    while True:
        if model.is_terminal(s):
            out.discounted_return += disc * model.terminal_value(s)
            out.outcome = "goal" if s == model.goal else "obstacle"
            break
        if out.transitions >= max_steps:
            out.outcome = "horizon_exhausted"
            break
        a = policy.lookup(s, k)
        r = model.reward(s, k, a)
        out.steps.append((s, k, a, r))
        out.discounted_return += disc * r
        succ, slots, probs, times = model.law.row(s, k, a)
        j = _sample_index(rng, probs)
        out.elapsed_time += float(times[j])
        if model.grid is not None:
            out.trajectory_length += model.grid.distance(s, int(succ[j]))
        s, k = int(succ[j]), int(slots[j])
        out.transitions += 1
        disc *= model.gamma
    return out


def evaluate_policy_return(
    model: TvmdpModel, policy: Policy, s0: int, n_rollouts: int, seed: int, max_steps: int | None = None
) -> float:
    """Monte Carlo estimate of the expected discounted return from s0."""
    if n_rollouts < 1:
        raise ContractViolation("n_rollouts must be >= 1")
    total = 0.0
    for r in range(n_rollouts):
        total += rollout(model, policy, s0, seed=[seed, r], max_steps=max_steps).discounted_return
    return total / n_rollouts


@dataclass
class PolicyStats:
    """Benchmark summary for one policy."""

    name: str
    n_rollouts: int
    n_success: int
    success_rate: float
    transitions_mean: float
    transitions_sd: float
    length_mean: float
    length_sd: float
    return_mean: float
    elapsed_mean: float


def _mean_sd(xs) -> tuple[float, float]:
    if len(xs) == 0:
        return float("nan"), float("nan")
    arr = np.asarray(xs, float)
    sd = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return float(arr.mean()), sd


def benchmark(
    model: TvmdpModel,
    policies: dict[str, Policy],
    n_rollouts: int,
    seed: int,
    s0: int | None = None,
    max_steps: int | None = None,
) -> dict[str, PolicyStats]:
    """Paired rollout comparison: every policy sees the same seed stream.

    Transition counts and trajectory lengths average over successful
    (goal-reaching) runs; the success rate is reported separately.
    """
    if n_rollouts < 1:
        raise ContractViolation("n_rollouts must be >= 1")
    if s0 is None:
        s0 = model.start
    if s0 is None:
        raise ContractViolation("benchmark needs a start state")
    out: dict[str, PolicyStats] = {}
    for name, pol in policies.items():
        transitions, lengths, returns, elapsed = [], [], [], []
        n_success = 0
        for r in range(n_rollouts):
            ro = rollout(model, pol, s0, seed=[seed, r], max_steps=max_steps)
            returns.append(ro.discounted_return)
            if ro.outcome == "goal":
                n_success += 1
                transitions.append(ro.transitions)
                lengths.append(ro.trajectory_length)
                elapsed.append(ro.elapsed_time)
        tm, ts = _mean_sd(transitions)
        lm, ls = _mean_sd(lengths)
        em, _ = _mean_sd(elapsed)
        out[name] = PolicyStats(
            name=name,
            n_rollouts=n_rollouts,
            n_success=n_success,
            success_rate=n_success / n_rollouts,
            transitions_mean=tm,
            transitions_sd=ts,
            length_mean=lm,
            length_sd=ls,
            return_mean=float(np.mean(returns)),
            elapsed_mean=em,
        )
    return out


def first_visit_oracle(
    trans: np.ndarray,
    times: np.ndarray,
    s0: int,
    n_rollouts: int,
    seed: int,
    max_steps: int = 2000,
) -> np.ndarray:
    """Brute-force first-visit travel times by direct chain simulation.

    Walks ``n_rollouts`` trajectories of the Markov chain ``trans`` from
    s0, accumulating the local travel time ``times[s, s']`` on every hop,
    and records the accumulated time at each state's first visit. Rows
    are rollouts, columns states; entries stay +inf for states a
    trajectory never reached. Used as an independent check of the
    linear-system passage-time moments.
    """
    trans = np.asarray(trans, float)
    times = np.asarray(times, float)
    n = trans.shape[0]
    cum = np.cumsum(trans, axis=1)
    absorbing = np.isclose(np.diag(trans), 1.0)
    rng = np.random.default_rng(seed)
    states = np.full(n_rollouts, s0, dtype=np.int64)
    t_acc = np.zeros(n_rollouts)
    fv = np.full((n_rollouts, n), np.inf)
    fv[:, s0] = 0.0
    rows = np.arange(n_rollouts)
    for _ in range(max_steps):
        active = ~absorbing[states]
        if not active.any():
            break
        u = rng.random(n_rollouts)
        nxt = (u[:, None] < cum[states]).argmax(axis=1)
        nxt = np.where(active, nxt, states)
        t_acc = t_acc + np.where(active, times[states, nxt], 0.0)
        states = nxt
        unseen = fv[rows, states] == np.inf
        fv[rows[unseen], states[unseen]] = t_acc[unseen]
    return fv
