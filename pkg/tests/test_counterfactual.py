"""Counterfactual machinery vs. brute-force references.

The fast forced-queue map reads every unit's counterfactual off one base
allocation via rank counting and removal cascades; the reference here
re-runs a deliberately naive allocator once per (unit, queue) pair.  The
exact oracle is likewise checked against full enumeration written from
scratch.  Both references are independent reimplementations of the service
discipline, not calls back into the package.
"""

import itertools
import math

import numpy as np
import pytest

from queuedesign import (
    QueueSpec,
    exact_oracle,
    generate_cohort,
    mc_propensities,
)
from queuedesign.counterfactual import _forced_map_rationed, _forced_map_strict
from queuedesign.mechanism import arrival_periods, arrival_ranks, rationed_shares


# ---------------------------------------------------------------------------
# naive reference implementations
# ---------------------------------------------------------------------------


def naive_allocate_strict(s, ranks, queues, budgets):
    n = len(s)
    served = {}
    for t, b in enumerate(budgets, start=1):
        waiting = [i for i in range(n) if s[i] <= t and i not in served]
        waiting.sort(key=lambda i: (queues[i], ranks[i]))
        for i in waiting[: int(b)]:
            served[i] = t
    out = np.zeros(n, dtype=int)
    for i, t in served.items():
        out[i] = t
    return out


def naive_allocate_rationed(s, ranks, queues, shares):
    n = len(s)
    served = {}
    for t in range(1, shares.shape[0] + 1):
        for q in range(1, shares.shape[1] + 1):
            waiting = [
                i for i in range(n) if s[i] <= t and i not in served and queues[i] == q
            ]
            waiting.sort(key=lambda i: ranks[i])
            for i in waiting[: int(shares[t - 1, q - 1])]:
                served[i] = t
    out = np.zeros(n, dtype=int)
    for i, t in served.items():
        out[i] = t
    return out


def naive_forced_map(s, ranks, queues, k, budgets=None, shares=None):
    n = len(s)
    z = np.zeros((n, k), dtype=bool)
    for i in range(n):
        for q in range(1, k + 1):
            forced = queues.copy()
            forced[i] = q
            if shares is None:
                tp = naive_allocate_strict(s, ranks, forced, budgets)
            else:
                tp = naive_allocate_rationed(s, ranks, forced, shares)
            z[i, q - 1] = tp[i] > 0
    return z


def random_instance(rng, mode):
    n = int(rng.integers(2, 13))
    k = int(rng.integers(2, 4))
    tau = int(rng.integers(1, 5))
    # mix continuous arrivals with exact ties to exercise the id tie-break
    arrivals = rng.uniform(0, tau, n)
    if rng.random() < 0.4:
        dup = rng.integers(0, n, size=2)
        arrivals[dup[0]] = arrivals[dup[1]]
    s = arrival_periods(arrivals, tau)
    ranks = arrival_ranks(arrivals)
    queues = rng.integers(1, k + 1, n)
    budgets = rng.integers(0, 4, tau).astype(int)
    if mode == "strict":
        return s, ranks, queues, k, tau, budgets, None
    alpha = np.sort(rng.uniform(0.1, 0.9, k))[::-1]
    p = np.full(k, 1.0 / k)
    shares = rationed_shares(budgets, alpha, p)
    return s, ranks, queues, k, tau, budgets, shares


# ---------------------------------------------------------------------------
# forced-map equivalence
# ---------------------------------------------------------------------------


def test_forced_map_strict_matches_brute_force():
    rng = np.random.default_rng(2024)
    for trial in range(120):
        s, ranks, queues, k, tau, budgets, _ = random_instance(rng, "strict")
        fast, tp = _forced_map_strict(s, ranks, queues, budgets, tau, k)
        assert np.array_equal(tp, naive_allocate_strict(s, ranks, queues, budgets))
        slow = naive_forced_map(s, ranks, queues, k, budgets=budgets)
        assert np.array_equal(fast, slow), (
            f"trial {trial}: s={s}, q={queues}, b={budgets}, ranks={ranks}"
        )


def test_forced_map_rationed_matches_brute_force():
    rng = np.random.default_rng(77)
    for trial in range(120):
        s, ranks, queues, k, tau, budgets, shares = random_instance(rng, "rationed")
        fast, tp = _forced_map_rationed(s, ranks, queues, shares, tau, k)
        assert np.array_equal(tp, naive_allocate_rationed(s, ranks, queues, shares))
        slow = naive_forced_map(s, ranks, queues, k, shares=shares)
        assert np.array_equal(fast, slow), (
            f"trial {trial}: s={s}, q={queues}, shares={shares}, ranks={ranks}"
        )


def test_forced_map_is_monotone_in_queue():
    rng = np.random.default_rng(41)
    for _ in range(40):
        s, ranks, queues, k, tau, budgets, _ = random_instance(rng, "strict")
        fast, _ = _forced_map_strict(s, ranks, queues, budgets, tau, k)
        assert np.all(np.diff(fast.astype(int), axis=1) <= 0)


# ---------------------------------------------------------------------------
# Monte Carlo propensities
# ---------------------------------------------------------------------------


def small_spec(n=3, k=2, b=1):
    return QueueSpec(
        k=k, p=np.full(k, 1.0 / k), beta=b / n, tau=1, budgets=np.array([b])
    )


def test_forced_mc_agrees_with_exact_oracle_within_noise():
    n = 3
    cohort = generate_cohort(n, 1, psi=0.0, seed=2)
    theta = np.full((n, 2), 0.5)
    spec = small_spec()
    oracle = exact_oracle(cohort, theta, spec)
    reps = 4000
    table = mc_propensities(cohort, theta, spec, reps=reps, seed=9)
    se = np.sqrt(
        oracle.table.queue_conditional * (1 - oracle.table.queue_conditional) / reps
    )
    assert np.all(
        np.abs(table.queue_conditional - oracle.table.queue_conditional)
        <= 3 * se + 1e-12
    )


def test_saturating_budget_gives_unit_propensities():
    n = 4
    cohort = generate_cohort(n, 1, psi=0.0, seed=3)
    theta = np.full((n, 2), 0.5)
    spec = QueueSpec(k=2, p=np.array([0.5, 0.5]), beta=0.99, tau=1,
                     budgets=np.array([n]))
    table = mc_propensities(cohort, theta, spec, reps=50, seed=1)
    assert np.all(table.queue_conditional == 1.0)
    assert np.all(table.marginal == 1.0)


def test_unforced_mc_flags_unvisited_cells():
    n = 5
    cohort = generate_cohort(n, 1, psi=0.0, seed=4)
    theta = np.tile(np.array([0.995, 0.005]), (n, 1))
    spec = small_spec(n=n, k=2, b=2)
    table = mc_propensities(cohort, theta, spec, reps=40, seed=5, forced=False)
    assert table.source == "monte_carlo"
    missing = ~np.isfinite(table.queue_conditional[:, 1])
    assert missing.any()
    assert np.all(~np.isfinite(table.marginal[missing]))


def test_cell_cap_guard():
    cohort = generate_cohort(100, 1, psi=0.0, seed=6)
    theta = np.full((100, 2), 0.5)
    spec = small_spec(n=100, k=2, b=50)
    with pytest.raises(ValueError, match="cap"):
        mc_propensities(cohort, theta, spec, reps=10, max_cells=1000)


def test_forced_mc_deterministic_given_seed():
    cohort = generate_cohort(40, 2, psi=0.0, seed=8)
    theta = np.full((40, 3), 1.0 / 3)
    spec = QueueSpec(k=3, p=np.full(3, 1.0 / 3), beta=0.5, tau=2,
                     budgets=np.array([10, 10]))
    t1 = mc_propensities(cohort, theta, spec, reps=25, seed=13)
    t2 = mc_propensities(cohort, theta, spec, reps=25, seed=13)
    assert np.array_equal(t1.queue_conditional, t2.queue_conditional)


# ---------------------------------------------------------------------------
# exact oracle
# ---------------------------------------------------------------------------


class TestExactOracle:
    def test_three_unit_symmetric_instance_closed_form(self):
        # b=1, K=2, three units, uniform rows: conditioning on queue 1 the
        # unit is served unless a rival lands in queue 1 ahead of it:
        # pi_tilde(1) = 7/12, pi_tilde(2) = 1/12, marginal = 1/3 = b/n.
        cohort = generate_cohort(3, 1, psi=0.0, seed=2)
        theta = np.full((3, 2), 0.5)
        oracle = exact_oracle(cohort, theta, small_spec())
        assert np.allclose(oracle.table.queue_conditional[:, 0], 7 / 12, atol=1e-12)
        assert np.allclose(oracle.table.queue_conditional[:, 1], 1 / 12, atol=1e-12)
        assert np.allclose(oracle.table.marginal, 1 / 3, atol=1e-12)

    def test_matches_independent_enumeration_heterogeneous(self):
        rng = np.random.default_rng(15)
        n, k, b = 4, 2, 2
        cohort = generate_cohort(n, 1, psi=0.0, seed=21)
        raw = rng.uniform(0.05, 1.0, size=(n, k))
        theta = raw / raw.sum(axis=1, keepdims=True)
        spec = small_spec(n=n, k=k, b=b)
        oracle = exact_oracle(cohort, theta, spec)

        # independent enumeration: sum over the *other* units' queues and
        # all arrival orders, with the probe pinned to its forced queue
        qc = np.zeros((n, k))
        others = [[j for j in range(n) if j != i] for i in range(n)]
        for i in range(n):
            for forced_q in range(1, k + 1):
                total = 0.0
                for rest in itertools.product(range(1, k + 1), repeat=n - 1):
                    config = [0] * n
                    config[i] = forced_q
                    for j, q in zip(others[i], rest):
                        config[j] = q
                    w = math.prod(theta[j, config[j] - 1] for j in others[i])
                    if w == 0.0:
                        continue
                    hits = 0
                    for perm in itertools.permutations(range(n)):
                        order = sorted(range(n), key=lambda j: (config[j], perm[j]))
                        if i in order[:b]:
                            hits += 1
                    total += w * hits / math.factorial(n)
                qc[i, forced_q - 1] = total
        assert np.allclose(oracle.table.queue_conditional, qc, atol=1e-12)

    def test_world_table_reproduces_conditional_propensities(self):
        rng = np.random.default_rng(99)
        n, k = 4, 2
        cohort = generate_cohort(n, 1, psi=0.0, seed=33)
        raw = rng.uniform(0.05, 1.0, size=(n, k))
        theta = raw / raw.sum(axis=1, keepdims=True)
        oracle = exact_oracle(cohort, theta, small_spec(n=n, k=k, b=1))
        worlds = oracle.worlds
        qc = np.einsum("w,wik->ik", worlds.probs, worlds.zmap.astype(float))
        assert np.allclose(qc, oracle.table.queue_conditional, atol=1e-12)

    def test_world_monotonicity_exhaustive(self):
        cohort = generate_cohort(5, 1, psi=0.0, seed=35)
        theta = np.full((5, 2), 0.5)
        oracle = exact_oracle(cohort, theta, small_spec(n=5, k=2, b=2))
        z = oracle.worlds.zmap.astype(int)
        assert np.all(np.diff(z, axis=2) <= 0)

    def test_realized_z_consistent_with_marginal(self):
        cohort = generate_cohort(4, 1, psi=0.0, seed=36)
        theta = np.full((4, 2), 0.5)
        oracle = exact_oracle(cohort, theta, small_spec(n=4, k=2, b=2))
        worlds = oracle.worlds
        zr = worlds.realized_z().astype(float)
        marg = worlds.probs @ zr
        assert np.allclose(marg, oracle.table.marginal, atol=1e-12)

    def test_guards(self):
        cohort = generate_cohort(9, 1, psi=0.0, seed=37)
        theta = np.full((9, 2), 0.5)
        with pytest.raises(ValueError, match="n <= 8"):
            exact_oracle(cohort, theta, small_spec(n=9, k=2, b=2))
        cohort2 = generate_cohort(3, 2, psi=0.0, seed=38)
        theta2 = np.full((3, 2), 0.5)
        spec2 = QueueSpec(k=2, p=np.array([0.5, 0.5]), beta=0.5, tau=2,
                          budgets=np.array([1, 1]))
        with pytest.raises(ValueError, match="single review period"):
            exact_oracle(cohort2, theta2, spec2)

    def test_alpha_limit_is_exact_for_degenerate_policy(self):
        # with everyone pinned to their queue and b = n*beta the exact
        # conditional propensities collapse to the waterfilling alpha values
        n, k = 6, 3
        cohort = generate_cohort(n, 1, psi=0.0, seed=40)
        theta = np.zeros((n, k))
        theta[:2, 0] = 1.0
        theta[2:4, 1] = 1.0
        theta[4:, 2] = 1.0
        spec = QueueSpec(k=3, p=np.full(3, 1.0 / 3), beta=0.5, tau=1,
                         budgets=np.array([3]))
        oracle = exact_oracle(cohort, theta, spec)
        # every world serves exactly b = 3 of the 6 units, so the average
        # marginal propensity must equal beta = 1/2 exactly
        assert abs(oracle.table.marginal.mean() - 0.5) < 1e-12
        # queue-1 probes always beat the 3 slots; queue-3 probes never do
        assert np.all(oracle.table.queue_conditional[:, 0] == 1.0)
