"""Experiment drivers: each returns plain rows ready for CSV serialization.

Reproducibility contract: every random draw is keyed by a SeedSequence
([seed, stream, rep]) tuple, replications are reduced in index order, and
the worker function is identical whether it runs inline or in a process
pool, so the emitted rows are byte-identical for any --threads value.

Stream ids used here (0..3 are reserved by cohorts/estimation):
  100 covariate draw for the fixed-design bias study
  101/102 per-replication bias-study cohort and queue draws
  103/104/105 propensity-check cohorts, forced MC, treated-mass reps
  106 queue draw for the single-run estimate command
  107 band bootstrap seeds on the frontier
  108 treated-mass queue draws
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .cohorts import Cohort, default_h_law, generate_bias_cohort, generate_cohort
from .config import RunConfig
from .design import (
    DesignProblem,
    feasible_utility_range,
    optimize_endogenous,
    optimize_exogenous,
    pareto_sweep,
)
from .estimation import (
    SIGMA_FLOOR,
    estimate_dr_ate,
    estimate_iv_ratio,
    estimate_pliv,
    fit_nuisances,
    multiplier_bootstrap,
    oracle_nuisances,
    split_indices,
)
from .mechanism import QueueSpec, allocate, sample_queues, treated_mass_profile
from .policies import greedy_softmax_policy, rct_policy, switch_policy
from .propensity import (
    alpha_from_target,
    alpha_vector,
    instrument_residual,
    marginal_propensity,
)
from .counterfactual import mc_propensities

FRONTIER_COLUMNS = (
    "method", "c_or_param", "achieved_utility", "variance_proxy",
    "band_low", "band_high", "status",
)
BANDS_COLUMNS = ("method", "c_or_param", "band_low", "band_high")
BIAS_COLUMNS = ("alpha_config", "c_level", "estimator", "mean_bias", "mc_se", "replications")
PROPENSITY_COLUMNS = (
    "n", "k", "mc_pi_tilde", "alpha_formula", "abs_dev", "treated_mass", "mass_cap",
)
ESTIMATES_COLUMNS = ("estimator", "point", "se", "ci_low", "ci_high", "n", "seed", "status")


# ---------------------------------------------------------------------------
# shared small helpers
# ---------------------------------------------------------------------------


def _derived_seed(*entries) -> int:
    """Collapse a seed path into one 64-bit integer for APIs taking an int."""
    ss = np.random.SeedSequence([int(e) for e in entries])
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class _FixedH:
    """An h-law returning a pre-drawn covariate vector (fixed-design MC)."""

    h: np.ndarray

    def __call__(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if n != self.h.shape[0]:
            raise ValueError("fixed h vector does not match requested n")
        return self.h


def _spec_for(config: RunConfig, n: int) -> QueueSpec:
    mech = config.mechanism
    target = None if mech.alpha_target is None else np.asarray(mech.alpha_target, float)
    if mech.budgets is not None:
        return QueueSpec(
            k=int(mech.k), p=np.asarray(mech.p, float), beta=float(mech.beta),
            tau=int(config.cohort.tau), budgets=np.asarray(mech.budgets, int),
            mode=mech.mode, alpha_target=target,
        )
    return QueueSpec.auto(
        n, k=int(mech.k), p=np.asarray(mech.p, float), beta=float(mech.beta),
        tau=int(config.cohort.tau), mode=mech.mode, alpha_target=target,
    )


def _alpha_for(config: RunConfig):
    mech = config.mechanism
    if mech.mode == "rationed":
        return alpha_from_target(np.asarray(mech.alpha_target, float), np.asarray(mech.p, float))
    return alpha_vector(float(mech.beta), np.asarray(mech.p, float))


def _variance_fns(dgp: str, psi: float):
    """Oracle conditional outcome variances and the (constant) effect curve."""
    if dgp == "bernoulli":
        var1 = lambda h: np.maximum((h + psi) * (1.0 - h - psi), 0.0)
        var0 = lambda h: h * (1.0 - h)
    else:
        # U | h ~ Uniform(-0.2h, 0.2h) in both arms: Var = (0.4h)^2 / 12.
        var1 = lambda h: (0.2 * np.asarray(h)) ** 2 / 3.0
        var0 = var1
    cate = lambda h: np.full(np.shape(h), psi, dtype=float)
    return var1, var0, cate


def _sigma_fn(dgp: str, psi: float, beta: float):
    """Marginal-outcome variance proxy used by the instrument-variance lens.

    For the uniform-noise outcome model this is the exact conditional
    variance.  For bernoulli outcomes the variance depends on the realized
    treatment share, so the budget-level blend stands in: it is policy
    independent, which keeps the lens comparable across frontier rows.
    """
    if dgp == "bernoulli":
        def sigma(h):
            h = np.asarray(h, dtype=float)
            blend = beta * (h + psi) * (1.0 - h - psi) + (1.0 - beta) * h * (1.0 - h)
            return np.maximum(blend, SIGMA_FLOOR)
        return sigma
    return lambda h: np.maximum((0.2 * np.asarray(h, dtype=float)) ** 2 / 3.0, SIGMA_FLOOR)


def _map_indexed(worker, reps: int, threads: int, initargs):
    """Run worker(rep) for rep in range(reps), reducing in index order."""
    if threads <= 1:
        _set_context(initargs)
        return [worker(rep) for rep in range(reps)]
    chunk = max(1, reps // (int(threads) * 8))
    with ProcessPoolExecutor(
        max_workers=int(threads), initializer=_set_context, initargs=(initargs,)
    ) as pool:
        return list(pool.map(worker, range(reps), chunksize=chunk))


_CONTEXT: dict = {}


def _set_context(ctx: dict):
    _CONTEXT.clear()
    _CONTEXT.update(ctx)


# ---------------------------------------------------------------------------
# frontier sweep (cmd: pareto)
# ---------------------------------------------------------------------------


def _dr_contributions(h, theta, alpha, var1, var0, cate):
    pi = marginal_propensity(theta, alpha)
    if np.any(pi <= 0.0) or np.any(pi >= 1.0):
        raise ValueError("boundary propensity: variance undefined")
    effects = cate(h)
    return var1(h) / pi + var0(h) / (1.0 - pi) + (effects - effects.mean()) ** 2


def _pliv_contributions(h, theta, alpha, sigma):
    zeta = instrument_residual(theta, alpha)
    info = np.sum(theta * zeta**2, axis=1) / sigma(h)
    if info.mean() <= 0.0:
        raise ValueError("relevance failure: instrument variance is zero")
    return info


def _frontier_row(method, param, theta, h, alpha, lens, band_reps, band_seed):
    """Score one policy under the configured variance lens, with a band.

    The band is a multiplier bootstrap over per-unit contributions; for the
    instrument lens the proxy is 1/mean(info), so the interval for mean(info)
    is inverted (bounds swap sides).
    """
    utility = float(np.mean(h * marginal_propensity(theta, alpha)))
    try:
        if lens["objective"] == "exogenous":
            contrib = _dr_contributions(h, theta, alpha, lens["var1"], lens["var0"], lens["cate"])
            boot = multiplier_bootstrap(contrib, reps=band_reps, seed=band_seed)
            proxy, lo, hi = float(contrib.mean()), boot.ci_low, boot.ci_high
        else:
            info = _pliv_contributions(h, theta, alpha, lens["sigma"])
            boot = multiplier_bootstrap(info, reps=band_reps, seed=band_seed)
            proxy = 1.0 / float(info.mean())
            lo = 1.0 / boot.ci_high if boot.ci_high > 0 else float("inf")
            hi = 1.0 / boot.ci_low if boot.ci_low > 0 else float("inf")
        status = "ok"
    except ValueError as err:
        proxy, lo, hi = float("inf"), float("inf"), float("inf")
        status = "boundary_propensity" if "boundary" in str(err) else "relevance_error"
    return (method, float(param), utility, proxy, lo, hi, status)


def run_pareto(config: RunConfig):
    """Sweep the optimized design plus heuristic baselines over one cohort.

    Returns (frontier_rows, band_rows).  All methods are scored under the
    configured objective's variance formula so the frontier is comparable
    within a run: mean[v1/pi + v0/(1-pi)] + Var(effect) for the exogenous
    objective, 1 / mean[sum_k theta_k zeta_k^2 / sigma^2] for the endogenous
    one.
    """
    cfg_c, cfg_d, cfg_e = config.cohort, config.design, config.execution
    psi, beta = float(cfg_c.psi), float(config.mechanism.beta)
    p = np.asarray(config.mechanism.p, dtype=float)
    cohort = _make_cohort(config, seed=int(cfg_e.seed))
    h = cohort.h
    alpha = _alpha_for(config)

    var1, var0, cate = _variance_fns(cfg_c.dgp, psi)
    lens = {
        "objective": cfg_d.objective, "var1": var1, "var0": var0, "cate": cate,
        "sigma": _sigma_fn(cfg_c.dgp, psi, beta),
    }
    band_reps = int(config.estimation.bootstrap_reps)

    c_lo, c_hi = feasible_utility_range(h, alpha, p)
    c_rct = beta * float(h.mean())
    if cfg_d.c_grid is not None:
        c_grid = np.asarray(cfg_d.c_grid, dtype=float)
    else:
        c_grid = np.linspace(c_rct, c_hi, int(cfg_d.c_grid_size))

    problem = DesignProblem(
        utilities=h, alpha=alpha, p=p, utility_floor=c_rct,
        regularizer=cfg_d.regularizer, kappa=cfg_d.kappa, objective=cfg_d.objective,
    )
    points = pareto_sweep(
        problem, c_grid, var1=var1, var0=var0, cate=cate, sigma=lens["sigma"]
    )

    rows = []
    row_id = 0
    for c, pt in zip(c_grid, points):
        if pt.solution is None:
            rows.append(("optimized", float(c), float("nan"), float("nan"),
                         float("nan"), float("nan"), pt.status))
        else:
            rows.append(_frontier_row(
                "optimized", c, pt.solution.policy, h, alpha, lens,
                band_reps, _derived_seed(cfg_e.seed, 107, row_id),
            ))
        row_id += 1

    rows.append(_frontier_row(
        "rct", c_rct, rct_policy(cohort.n, p), h, alpha, lens,
        band_reps, _derived_seed(cfg_e.seed, 107, row_id),
    ))
    row_id += 1
    for strength in cfg_d.switch_strengths:
        theta = switch_policy(h, p, float(strength))
        rows.append(_frontier_row(
            "switch", strength, theta, h, alpha, lens,
            band_reps, _derived_seed(cfg_e.seed, 107, row_id),
        ))
        row_id += 1
    for scale in cfg_d.greedy_scales:
        theta = greedy_softmax_policy(h, p, float(scale), cap=float(cfg_d.greedy_cap))
        rows.append(_frontier_row(
            "greedy", scale, theta, h, alpha, lens,
            band_reps, _derived_seed(cfg_e.seed, 107, row_id),
        ))
        row_id += 1

    band_rows = [(m, c, lo, hi) for (m, c, _, _, lo, hi, _) in rows]
    return rows, band_rows


def _make_cohort(config: RunConfig, seed: int) -> Cohort:
    c = config.cohort
    if c.dgp == "bernoulli":
        return generate_cohort(int(c.n), int(c.tau), float(c.psi), seed=seed)
    return generate_bias_cohort(int(c.n), int(c.tau), float(c.psi), seed=seed)


# ---------------------------------------------------------------------------
# endogeneity bias study (cmd: bias)
# ---------------------------------------------------------------------------


def _bias_rep(rep: int):
    """One fixed-design replication: fresh noise and arrivals, fixed policies.

    The same confounded world is allocated twice, once under each design's
    policy, and each estimator is applied to its own design's data: the
    instrument estimator to the endogenous-design allocation, the DR
    estimator (with nuisances that omit the confounder, as an exogeneity
    believer would fit them) to the exogenous-design allocation.
    """
    ctx = _CONTEXT
    h = ctx["h"]
    n = h.shape[0]
    psi = ctx["psi"]
    alpha = alpha_from_target(ctx["alpha_target"], ctx["p"])
    spec = QueueSpec.auto(
        n, k=int(ctx["k"]), p=ctx["p"], beta=float(ctx["beta"]), tau=int(ctx["tau"]),
        mode="rationed", alpha_target=ctx["alpha_target"],
    )
    cohort = generate_bias_cohort(
        n, int(ctx["tau"]), psi, h_law=_FixedH(h),
        seed=_derived_seed(ctx["seed"], 101, ctx["arm"], rep),
    )

    def realize(theta, stream):
        rng = np.random.default_rng(
            np.random.SeedSequence([int(ctx["seed"]), stream, int(ctx["arm"]), int(rep)])
        )
        queues = sample_queues(theta, rng)
        trace = allocate(cohort, queues, spec)
        z = trace.z.astype(float)
        y = np.where(trace.z, cohort.y1, cohort.y0)
        return queues, z, y

    theta_endo = ctx["theta_endo"]
    queues, z, y = realize(theta_endo, 102)
    pi = marginal_propensity(theta_endo, alpha)
    nuis = oracle_nuisances(cohort, psi, marginal_pi=lambda _h: pi)
    try:
        pliv = estimate_pliv(
            cohort.h, z, y, queues, theta_endo, alpha, nuis,
            relevance_floor=float(ctx["relevance_floor"]),
        ).point
    except ValueError:
        pliv = float("nan")

    theta_exo = ctx["theta_exo"]
    _, z, y = realize(theta_exo, 109)
    pi = marginal_propensity(theta_exo, alpha)
    nuis = oracle_nuisances(cohort, psi, marginal_pi=lambda _h: pi)
    try:
        dr = estimate_dr_ate(cohort.h, z, y, pi, nuis, gamma=float(ctx["gamma"])).point
    except ValueError:
        dr = float("nan")
    return pliv, dr


def run_bias(config: RunConfig):
    """Fixed-design endogeneity study over (alpha target, utility floor) arms.

    Covariates are drawn once; every replication redraws the confounded
    noise and arrival order, samples queues from the arm's optimized policy,
    allocates under rationing, and runs both estimators on the same data.
    The instrument-based estimator is the one designed for this regime; the
    exogeneity-assuming DR estimator is evaluated on the same draws to
    measure how endogeneity hits it.

    Utility floors are parameterized as fractions of the span between the
    RCT utility and the smallest maximum utility across the configured
    alpha targets, so arms with different targets are compared at the same
    absolute floor and every floor is feasible for every arm.
    """
    cfg_c, cfg_d, cfg_e = config.cohort, config.design, config.execution
    mech = config.mechanism
    if int(mech.k) != 2:
        raise ValueError("the bias study is defined for k=2 queues")
    n, tau, psi = int(cfg_c.n), int(cfg_c.tau), float(cfg_c.psi)
    p = np.asarray(mech.p, dtype=float)
    beta = float(mech.beta)
    reps = int(cfg_e.bias_replications)

    rng = np.random.default_rng(np.random.SeedSequence([int(cfg_e.seed), 100]))
    h = default_h_law(rng, n)
    c_rct = beta * float(h.mean())

    if cfg_d.bias_arms is not None:
        arms = [(float(a), float(f)) for a, f in cfg_d.bias_arms]
    else:
        arms = [(float(a), float(f)) for a in cfg_d.bias_alpha_tops
                for f in cfg_d.bias_c_fracs]

    targets = {}
    for top, _ in arms:
        second = (beta - top * p[0]) / p[1]
        if not 0.0 <= second <= 1.0:
            raise ValueError(
                f"alpha top {top} cannot satisfy the budget identity with beta={beta}"
            )
        targets[top] = np.array([top, second])
    c_end = min(
        feasible_utility_range(h, alpha_from_target(t, p), p)[1]
        for t in targets.values()
    )

    rows = []
    for arm_id, (top, frac) in enumerate(arms):
        alpha_target = targets[top]
        alpha = alpha_from_target(alpha_target, p)
        c = c_rct + frac * (c_end - c_rct)
        problem = DesignProblem(
            utilities=h, alpha=alpha, p=p, utility_floor=c,
            regularizer=cfg_d.regularizer, kappa=cfg_d.kappa, objective="endogenous",
        )
        theta_endo = optimize_endogenous(problem).policy
        theta_exo = optimize_exogenous(problem).policy

        ctx = {
            "h": h, "theta_endo": theta_endo, "theta_exo": theta_exo,
            "p": p, "beta": beta, "k": int(mech.k),
            "alpha_target": alpha_target, "tau": tau, "psi": psi,
            "gamma": float(config.estimation.gamma),
            "relevance_floor": float(config.estimation.relevance_floor),
            "seed": int(cfg_e.seed), "arm": arm_id,
        }
        results = _map_indexed(_bias_rep, reps, int(cfg_e.threads), ctx)
        points = np.asarray(results, dtype=float)  # (reps, 2): pliv, dr

        label = "/".join(f"{a:g}" for a in alpha_target)
        for col, name in ((0, "pliv_endogenous"), (1, "dr_exogenous")):
            vals = points[:, col]
            ok = vals[np.isfinite(vals)]
            if ok.size >= 2:
                mean_bias = float(ok.mean() - psi)
                mc_se = float(ok.std(ddof=1) / np.sqrt(ok.size))
            else:
                mean_bias, mc_se = float("nan"), float("nan")
            rows.append((label, float(c), name, mean_bias, mc_se, int(ok.size)))
    return rows


# ---------------------------------------------------------------------------
# propensity convergence check (cmd: check-propensity)
# ---------------------------------------------------------------------------


def run_propensity_check(config: RunConfig):
    """Forced-assignment MC propensities against the closed-form limits.

    For each n in the grid: draw an exogenous cohort, run the forced MC
    under the RCT policy, and report per-queue conditional propensities next
    to the water-filling values, plus cumulative treated mass by priority
    tier against its capacity limit.
    """
    cfg_c, cfg_e = config.cohort, config.execution
    mech = config.mechanism
    p = np.asarray(mech.p, dtype=float)
    beta = float(mech.beta)
    alpha = _alpha_for(config)
    if mech.mode == "rationed":
        mass_limit = np.cumsum(alpha.alpha * p)
    else:
        mass_limit = np.minimum(beta, np.cumsum(p))

    rows = []
    for n in cfg_e.n_grid:
        n = int(n)
        spec = _spec_for(config, n)
        cohort = generate_cohort(
            n, int(cfg_c.tau), float(cfg_c.psi), seed=_derived_seed(cfg_e.seed, 103, n)
        )
        theta = rct_policy(n, p)
        table = mc_propensities(
            cohort, theta, spec, reps=int(cfg_e.propensity_reps),
            seed=_derived_seed(cfg_e.seed, 104, n), forced=True,
            arrival_resampling=True,
        )
        pi_tilde = table.queue_conditional.mean(axis=0)

        mass_acc = np.zeros(int(mech.k))
        for rep in range(int(cfg_e.treated_mass_reps)):
            rep_cohort = generate_cohort(
                n, int(cfg_c.tau), float(cfg_c.psi),
                seed=_derived_seed(cfg_e.seed, 105, n, rep),
            )
            qrng = np.random.default_rng(
                np.random.SeedSequence([int(cfg_e.seed), 108, n, rep])
            )
            trace = allocate(rep_cohort, sample_queues(theta, qrng), spec)
            mass_acc += treated_mass_profile(trace, int(mech.k))[:, -1]
        mass = mass_acc / int(cfg_e.treated_mass_reps)

        for k in range(int(mech.k)):
            rows.append((
                n, k + 1, float(pi_tilde[k]), float(alpha.alpha[k]),
                float(abs(pi_tilde[k] - alpha.alpha[k])),
                float(mass[k]), float(mass_limit[k]),
            ))
    return rows


# ---------------------------------------------------------------------------
# single-run estimates (cmd: estimate)
# ---------------------------------------------------------------------------


_STATUS_KEYWORDS = (
    ("relevance", "relevance_error"),
    ("positivity", "positivity_error"),
    ("denominator", "relevance_error"),
    ("degenerate", "degenerate_design"),
)


def _status_for(err: ValueError) -> str:
    text = str(err)
    for key, status in _STATUS_KEYWORDS:
        if key in text:
            return status
    return "precondition_error"


def run_estimate(config: RunConfig):
    """One allocation under the RCT policy, then every configured estimator.

    Estimator preconditions (positivity, instrument relevance) are reported
    as a status column with NaN numbers rather than as hard failures: a
    degenerate design is a finding, not a crash.
    """
    cfg_c, cfg_e, est = config.cohort, config.execution, config.estimation
    mech = config.mechanism
    n = int(cfg_c.n)
    psi = float(cfg_c.psi)
    p = np.asarray(mech.p, dtype=float)
    seed = int(cfg_e.seed)

    cohort = _make_cohort(config, seed=seed)
    spec = _spec_for(config, n)
    alpha = _alpha_for(config)
    theta = rct_policy(n, p)
    qrng = np.random.default_rng(np.random.SeedSequence([seed, 106]))
    queues = sample_queues(theta, qrng)
    trace = allocate(cohort, queues, spec)
    z = trace.z.astype(float)
    y = np.where(trace.z, cohort.y1, cohort.y0)
    pi = marginal_propensity(theta, alpha)

    if est.nuisance_method == "oracle":
        fit_idx = np.arange(n)
        eval_idx = np.arange(n)
        nuis = oracle_nuisances(cohort, psi, marginal_pi=lambda _h: pi[eval_idx])
    else:
        # Split fit: nuisances learned on one half, estimates on the other,
        # so estimation errors stay first-order orthogonal to fitting noise.
        fit_idx, eval_idx = split_indices(n, seed)
        nuis = fit_nuisances(
            cohort.h[fit_idx], z[fit_idx], y[fit_idx],
            method=est.nuisance_method, bins=int(est.bins), degree=int(est.degree),
        )
    he, ze, ye = cohort.h[eval_idx], z[eval_idx], y[eval_idx]
    qe, te, pe = queues[eval_idx], theta[eval_idx], pi[eval_idx]

    rows = []
    for name in est.estimators:
        try:
            if name == "dr_ate":
                report = estimate_dr_ate(
                    he, ze, ye, pe, nuis, gamma=float(est.gamma),
                    bootstrap_reps=int(est.bootstrap_reps), seed=seed,
                )
            elif name == "pliv":
                report = estimate_pliv(
                    he, ze, ye, qe, te, alpha, nuis,
                    relevance_floor=float(est.relevance_floor),
                )
            else:
                zeta = instrument_residual(theta, alpha)
                r = zeta[np.arange(n), queues - 1][eval_idx]
                report = estimate_iv_ratio(ye, ze, r)
            rows.append((
                name, report.point, report.se, report.ci_low, report.ci_high,
                int(report.n), seed, "ok",
            ))
        except ValueError as err:
            rows.append((
                name, float("nan"), float("nan"), float("nan"), float("nan"),
                int(eval_idx.size), seed, _status_for(err),
            ))
    return rows
