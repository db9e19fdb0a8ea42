"""Counterfactual service probabilities under forced queue assignment.

The queue-conditional propensity pi_tilde(i, k) = P(Z_i = 1 | Q_i = k) is the
basic identifying object of the design: it conditions on unit i's own queue
draw while averaging over everyone else's queues and the arrival pattern.
Estimating it naively is expensive — forcing each (unit, queue) pair and
re-running the allocation costs n * K full passes per replication — so the
Monte Carlo here exploits the mechanism's structure to read off the entire
n x K counterfactual treatment map from a single base allocation per world:

* Units ranked below a given (queue, arrival) key are never displaced by
  anything ranked above it, so their waiting pattern is an autonomous system.
  A unit is served iff at some period the number of waiting lower-ranked
  units falls short of the budget.  Those counts come from per-period,
  per-queue sorted rank tables via binary search.

* Removing the probe unit from its realized slot frees capacity that pulls
  forward the first waiting unit, whose old slot frees again, and so on: a
  removal cascade.  The cascade depends only on the starting period, is at
  most tau long, and only ever *advances* service times, so the counts above
  need a small subtraction for cascade members during the interval between
  their new and old service periods.

Both shortcuts are verified against brute-force re-allocation in the test
suite.  For tiny single-period instances an exact oracle enumerates all queue
configurations (and optionally all arrival orders) instead of sampling.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .cohorts import Cohort
from .mechanism import (
    QueueSpec,
    _allocate_rationed,
    _allocate_strict,
    arrival_periods,
    arrival_ranks,
    rationed_shares,
    sample_queues,
    validate_policy,
)
from .propensity import PropensityTable


# ---------------------------------------------------------------------------
# forced-queue Monte Carlo
# ---------------------------------------------------------------------------


def _waiting_tables(s, ranks, queues, t_served, tau, k):
    """Sorted per-(period, queue) rank tables of waiting units.

    A unit waits at period t if it has arrived (s <= t) and has not been
    served strictly before t; units served exactly at t still occupy a slot
    at t and therefore count as competitors.
    """
    until = np.where(t_served > 0, t_served, tau)
    order = np.lexsort((ranks, queues))
    by_period = []
    for t in range(1, tau + 1):
        sel = order[(s[order] <= t) & (t <= until[order])]
        counts = np.bincount(queues[sel], minlength=k + 2)
        bounds = np.concatenate(([0], np.cumsum(counts[1 : k + 1])))
        per_queue = [ranks[sel[bounds[q] : bounds[q + 1]]] for q in range(k)]
        by_period.append((per_queue, bounds, sel))
    return by_period, until


def _removal_chains(waiting, t_served, queues, ranks, budgets, tau):
    """Cascade of pulled-forward services when one served slot is vacated.

    chain[sigma] lists (queue, rank, pull, until) for every unit whose
    service moves from its base period to an earlier one when a slot at
    period sigma frees up: the first waiting-unserved unit at sigma is pulled
    to sigma, its old slot (if any) frees next, and so on.  Entries only
    matter while pull < t <= until.
    """
    first_waiting = np.full(tau + 1, -1, dtype=int)
    for t in range(1, tau + 1):
        per_queue, bounds, sel = waiting[t - 1]
        if sel.size > budgets[t - 1]:
            first_waiting[t] = sel[budgets[t - 1]]
    chains = [[] for _ in range(tau + 1)]
    for sigma in range(1, tau + 1):
        elems = []
        cur = sigma
        while True:
            j = first_waiting[cur]
            if j < 0:
                break
            until = t_served[j] if t_served[j] > 0 else tau
            elems.append((queues[j], ranks[j], cur, until))
            if t_served[j] == 0:
                break
            cur = t_served[j]
        chains[sigma] = elems
    return chains


def _forced_map_strict(s, ranks, queues, budgets, tau, k):
    """Exact n x K counterfactual treatment map for one strict-mode world."""
    n = s.shape[0]
    t_served = _allocate_strict(s, ranks, queues, budgets)
    waiting, until = _waiting_tables(s, ranks, queues, t_served, tau, k)
    chains = _removal_chains(waiting, t_served, queues, ranks, budgets, tau)
    z = np.zeros((n, k), dtype=bool)
    served_groups = [np.nonzero(t_served == sig)[0] for sig in range(tau + 1)]
    for kk in range(1, k + 1):
        hit = np.zeros(n, dtype=bool)
        for t in range(1, tau + 1):
            b = budgets[t - 1]
            if b == 0:
                continue
            per_queue, bounds, _ = waiting[t - 1]
            count = bounds[kk - 1] + np.searchsorted(per_queue[kk - 1], ranks)
            # the probe unit leaves its own base queue: remove it from the
            # count when its base key ranks below the probe key
            self_in = (queues < kk) & (s <= t) & (t <= until)
            count = count - self_in
            # removal-cascade members are served earlier once the probe's
            # base slot frees, so they stop competing during (pull, until]
            for sigma in range(1, t):
                idx = served_groups[sigma]
                if idx.size == 0:
                    continue
                for (qj, rj, pull, uj) in chains[sigma]:
                    if pull < t <= uj and qj <= kk:
                        if qj < kk:
                            count[idx] -= 1
                        else:
                            count[idx] -= rj < ranks[idx]
            hit |= (s <= t) & (count < b)
        z[:, kk - 1] = hit
    # the realized column needs no counterfactual: it is the base world
    z[np.arange(n), queues - 1] = t_served > 0
    return z, t_served


def _forced_map_rationed(s, ranks, queues, shares, tau, k):
    """Counterfactual treatment map for one rationed-mode world.

    Queues consume only their own budget shares, so forcing a unit into
    queue k never disturbs the other queues: its counterfactual is a pure
    insertion, with no removal cascade to track.
    """
    n = s.shape[0]
    t_served = _allocate_rationed(s, ranks, queues, shares)
    waiting, _ = _waiting_tables(s, ranks, queues, t_served, tau, k)
    z = np.zeros((n, k), dtype=bool)
    for kk in range(1, k + 1):
        hit = np.zeros(n, dtype=bool)
        for t in range(1, tau + 1):
            b = shares[t - 1, kk - 1]
            if b == 0:
                continue
            per_queue, _, _ = waiting[t - 1]
            count = np.searchsorted(per_queue[kk - 1], ranks)
            hit |= (s <= t) & (count < b)
        z[:, kk - 1] = hit
    z[np.arange(n), queues - 1] = t_served > 0
    return z, t_served


def mc_propensities(
    cohort: Cohort,
    theta: np.ndarray,
    spec: QueueSpec,
    reps: int,
    seed: int = 0,
    forced: bool = True,
    arrival_resampling: bool = True,
    max_cells: int = 500_000_000,
) -> PropensityTable:
    """Monte Carlo queue-conditional propensities for one cohort and policy.

    With ``forced=True`` every replication contributes one observation to
    every (unit, queue) cell via the counterfactual treatment map; with
    ``forced=False`` only realized cells are tallied and unvisited cells are
    flagged absent (NaN).  ``arrival_resampling`` redraws arrival times
    uniformly on [0, tau] each replication, matching the exogenous-arrival
    law; switch it off to condition on the cohort's realized arrival order.
    """
    theta = validate_policy(theta, spec.k)
    n, k = theta.shape
    if reps < 1:
        raise ValueError("reps must be positive")
    cells = n * k * reps if forced else n * reps
    if cells > max_cells:
        raise ValueError(
            f"simulation would touch {cells:.2e} cells (cap {max_cells:.2e}); "
            "reduce reps or fall back to the asymptotic table"
        )
    shares = None
    if spec.mode == "rationed":
        shares = rationed_shares(spec.budgets, spec.alpha_target, spec.p)
    base_s = arrival_periods(cohort.arrival, spec.tau)
    base_ranks = arrival_ranks(cohort.arrival)
    hits = np.zeros((n, k), dtype=np.int64)
    visits = np.zeros((n, k), dtype=np.int64)
    rows = np.arange(n)
    for rep in range(reps):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), rep]))
        if arrival_resampling:
            a = rng.uniform(0.0, spec.tau, size=n)
            s = arrival_periods(a, spec.tau)
            ranks = arrival_ranks(a)
        else:
            s, ranks = base_s, base_ranks
        queues = sample_queues(theta, rng)
        if forced:
            if spec.mode == "strict":
                z, _ = _forced_map_strict(s, ranks, queues, spec.budgets, spec.tau, k)
            else:
                z, _ = _forced_map_rationed(s, ranks, queues, shares, spec.tau, k)
            hits += z
            visits += 1
        else:
            if spec.mode == "strict":
                tp = _allocate_strict(s, ranks, queues, spec.budgets)
            else:
                tp = _allocate_rationed(s, ranks, queues, shares)
            visits[rows, queues - 1] += 1
            hits[rows, queues - 1] += tp > 0
    with np.errstate(invalid="ignore"):
        qc = np.where(visits > 0, hits / np.maximum(visits, 1), np.nan)
    needed = theta > 0.0
    ok = np.all(np.isfinite(qc) | ~needed, axis=1)
    marginal = np.where(
        ok, np.einsum("ik,ik->i", np.where(needed, theta, 0.0), np.nan_to_num(qc)), np.nan
    )
    return PropensityTable(
        queue_conditional=qc, marginal=marginal, theta=theta,
        source="monte_carlo", reps=reps,
    )


# ---------------------------------------------------------------------------
# exact oracle for tiny single-period instances
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WorldTable:
    """Exhaustive counterfactual treatment maps for a tiny instance.

    World w is a (queue configuration, arrival order) pair; ``zmap[w, i, k-1]``
    is unit i's treatment were it forced into queue k with everything else in
    world w held fixed, ``probs[w]`` the world's probability under the policy
    (uniform over arrival orders), and ``configs[config_idx[w]]`` the realized
    queue labels.  Probabilities include each unit's own queue draw; any
    statistic of the forced map is unaffected because the map never depends
    on the probe unit's own draw.
    """

    zmap: np.ndarray
    probs: np.ndarray
    config_idx: np.ndarray
    configs: np.ndarray

    def __post_init__(self):
        if abs(self.probs.sum() - 1.0) > 1e-9:
            raise ValueError("world probabilities must sum to 1")

    @property
    def n_worlds(self) -> int:
        return self.probs.shape[0]

    def realized_z(self) -> np.ndarray:
        """(W, n) matrix of treatments under each world's own queue draws."""
        n = self.zmap.shape[1]
        labels = self.configs[self.config_idx]  # (W, n) in 1..K
        take = np.take_along_axis(
            self.zmap, (labels - 1)[:, :, None], axis=2
        )
        return take[:, :, 0]


@dataclass(frozen=True)
class ExactOracle:
    """Exact propensity table plus (when affordable) the full world table."""

    table: PropensityTable
    worlds: Optional[WorldTable]


def exact_oracle(
    cohort: Cohort,
    theta: np.ndarray,
    spec: QueueSpec,
    world_cap: int = 2_000_000,
) -> ExactOracle:
    """Enumerate queue-conditional propensities exactly (tau = 1 only).

    In a single review period all units compete at once and the b lowest
    (queue, arrival-rank) keys are served, so conditioning on unit i's queue
    and integrating out its uniformly random position among same-queue peers
    gives a closed form per configuration of the other units' queues:

        P(served | L ahead in higher queues, M same-queue peers)
            = clip(b - L, 0, M + 1) / (M + 1).

    The table costs K^n configuration weights.  The per-world counterfactual
    map additionally enumerates the n! arrival orders and is only built when
    K^n * n! <= world_cap; beyond that ``worlds`` is None.
    """
    theta = validate_policy(theta, spec.k)
    n, k = theta.shape
    if spec.tau != 1:
        raise ValueError("exact enumeration requires a single review period")
    if spec.mode != "strict":
        raise ValueError("exact enumeration covers strict mode only")
    if n > 8 or k > 3:
        raise ValueError(
            f"exact enumeration is limited to n <= 8 and K <= 3 (got n={n}, K={k})"
        )
    b = int(spec.budgets[0])
    # all K^n queue configurations, one row each, labels 1..K
    grids = np.meshgrid(*([np.arange(1, k + 1)] * n), indexing="ij")
    configs = np.stack([g.ravel() for g in grids], axis=1).astype(np.int8)
    m = configs.shape[0]
    # per-config count of units in each queue, and per-unit exclusions
    counts = np.zeros((m, k), dtype=np.int16)
    for q in range(1, k + 1):
        counts[:, q - 1] = (configs == q).sum(axis=1)
    # full-product config weights: the probe's own slot integrates out to
    # total weight 1 because p_serve never depends on its own draw
    probs_cells = np.empty((m, n))
    for j in range(n):
        probs_cells[:, j] = theta[j, configs[:, j] - 1]
    full_prob = probs_cells.prod(axis=1)
    qc = np.zeros((n, k))
    for i in range(n):
        w = full_prob
        counts_excl = counts.astype(np.int64).copy()
        counts_excl[np.arange(m), configs[:, i] - 1] -= 1
        ahead = np.concatenate(
            [np.zeros((m, 1), dtype=np.int64), np.cumsum(counts_excl, axis=1)[:, :-1]],
            axis=1,
        )
        for kk in range(k):
            L = ahead[:, kk]
            M = counts_excl[:, kk]
            p_serve = np.clip(b - L, 0, M + 1) / (M + 1)
            qc[i, kk] = float(w @ p_serve)
    marginal = np.einsum("ik,ik->i", theta, qc)
    table = PropensityTable(
        queue_conditional=qc, marginal=marginal, theta=theta, source="exact"
    )

    n_worlds = m * math.factorial(n)
    worlds = None
    if n_worlds <= world_cap:
        config_prob = full_prob / math.factorial(n)
        zmaps = []
        eq = [(configs == q).astype(np.int64) for q in range(1, k + 1)]
        for perm in itertools.permutations(range(n)):
            r = np.array(perm)
            below = (r[None, :] < r[:, None]).astype(np.int64)  # below[i, j] = r_j < r_i
            z = np.zeros((m, n, k), dtype=bool)
            for kk in range(1, k + 1):
                # peers of i strictly ahead of key (kk, r_i): all of queues
                # 1..kk-1 (minus i itself if it sits there) plus same-queue
                # units that arrived earlier; a unit is never below itself,
                # so the matmul needs no own-column exclusion
                same_lower = eq[kk - 1] @ below.T  # (m, n)
                if kk > 1:
                    ahead_excl = counts[:, : kk - 1].sum(axis=1, dtype=np.int64)[
                        :, None
                    ] - (configs < kk).astype(np.int64)
                else:
                    ahead_excl = np.zeros((m, n), dtype=np.int64)
                z[:, :, kk - 1] = (ahead_excl + same_lower) < b
            zmaps.append(z)
        zmap = np.concatenate(zmaps, axis=0)
        n_perm = math.factorial(n)
        probs = np.tile(config_prob, n_perm)
        config_idx = np.tile(np.arange(m, dtype=np.int64), n_perm)
        worlds = WorldTable(zmap=zmap, probs=probs, config_idx=config_idx, configs=configs)
    return ExactOracle(table=table, worlds=worlds)
