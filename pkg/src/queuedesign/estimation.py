"""Treatment-effect estimators for queue-randomized allocation.

Three estimators share the queue-induced randomization:

* ``estimate_dr_ate`` — the doubly robust ATE estimator built from outcome
  regressions and the marginal treatment propensity.  Requires overlap
  (propensities bounded away from 0 and 1) and exogenous arrivals.
* ``estimate_pliv`` — the partially linear IV estimator using the centered
  queue residual alpha_Q - pi(theta), inverse-weighted by the conditional
  residual variance sigma(X).  Robust to arrival-order confounding because
  the queue draw is independent of everything given X.
* ``estimate_iv_ratio`` — the raw instrument ratio E_n[rY] / E_n[rZ], whose
  population value is a nonnegatively weighted average of pairwise local
  effects across queue margins; ``late_decomposition`` verifies that
  identity exhaustively on enumerable instances.

Nuisance functions (outcome means, E[Y|X], and sigma) are either analytic
(oracle) or fit on an explicit independent split — never on the estimation
sample itself.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .cohorts import Cohort, EstimateReport, wald_report
from .counterfactual import ExactOracle
from .propensity import AlphaVector, finite_instrument, marginal_propensity

SIGMA_FLOOR = 1e-6

Fn = Callable[[np.ndarray], np.ndarray]


# ---------------------------------------------------------------------------
# nuisance functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NuisanceSet:
    """Conditional-mean and residual-variance functions of the risk score.

    ``mu0``/``mu1`` are E[Y | Z=z, X], ``m`` is E[Y | X], and ``sigma`` is
    the conditional residual variance E[U^2 | X], floored away from zero so
    the inverse-variance instrument weighting stays finite.
    """

    mu0: Fn
    mu1: Fn
    m: Fn
    sigma: Fn
    fit_tag: str

    def __post_init__(self):
        if self.fit_tag not in ("oracle", "binned", "polynomial"):
            raise ValueError("fit_tag must be oracle, binned, or polynomial")


def oracle_nuisances(
    cohort: Cohort, psi: float, marginal_pi: Fn, sigma_floor: float = SIGMA_FLOOR
) -> NuisanceSet:
    """Analytic nuisance functions for the synthetic data generating processes.

    ``marginal_pi`` maps the risk score to the design's marginal treatment
    probability pi(X); it enters E[Y|X] = mu0 + pi*psi.  For the bernoulli
    DGP the residual variance is the propensity-weighted binomial variance;
    for the partially linear DGP it is Var(U | h) = (0.4h)^2 / 12.
    """
    if cohort.dgp_tag == "bernoulli":
        mu0 = lambda h: np.asarray(h, dtype=float)
        mu1 = lambda h: np.asarray(h, dtype=float) + psi

        def m(h):
            h = np.asarray(h, dtype=float)
            return h + psi * marginal_pi(h)

        def sigma(h):
            h = np.asarray(h, dtype=float)
            pi = marginal_pi(h)
            v = pi * (h + psi) * (1 - h - psi) + (1 - pi) * h * (1 - h)
            return np.maximum(v, sigma_floor)

    else:
        mu0 = lambda h: np.asarray(h, dtype=float)
        mu1 = lambda h: np.asarray(h, dtype=float) + psi

        def m(h):
            h = np.asarray(h, dtype=float)
            return h + psi * marginal_pi(h)

        def sigma(h):
            h = np.asarray(h, dtype=float)
            return np.maximum((0.2 * h) ** 2 / 3.0, sigma_floor)

    return NuisanceSet(mu0=mu0, mu1=mu1, m=m, sigma=sigma, fit_tag="oracle")


def _binned_mean(train_h, train_y, edges):
    idx = np.clip(np.digitize(train_h, edges[1:-1]), 0, len(edges) - 2)
    sums = np.bincount(idx, weights=train_y, minlength=len(edges) - 1)
    counts = np.bincount(idx, minlength=len(edges) - 1)
    return sums, counts


def fit_nuisances(
    h: np.ndarray,
    z: np.ndarray,
    y: np.ndarray,
    method: str = "binned",
    bins: int = 20,
    degree: int = 3,
    sigma_floor: float = SIGMA_FLOOR,
) -> NuisanceSet:
    """Fit nuisance functions on an independent sample.

    The caller is responsible for passing a split disjoint from the
    estimation sample.  ``binned`` uses quantile bins of h with per-arm bin
    means, automatically coarsening (halving the bin count) until every bin
    contains both treatment arms; ``polynomial`` fits least-squares
    polynomials in h per arm.  sigma is fit by the same method applied to
    squared residuals against the pooled fit m-hat, then floored.
    """
    h = np.asarray(h, dtype=float)
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float)
    if not (h.shape == z.shape == y.shape):
        raise ValueError("h, z, y must have matching shapes")
    if method == "binned":
        b = int(bins)
        while b >= 1:
            edges = np.unique(np.quantile(h, np.linspace(0, 1, b + 1)))
            if len(edges) < 2:
                # all h identical: a single bin covering the line
                edges = np.array([-np.inf, np.inf])
            s1, c1 = _binned_mean(h[z == 1], y[z == 1], edges)
            s0, c0 = _binned_mean(h[z == 0], y[z == 0], edges)
            sp, cp = _binned_mean(h, y, edges)
            if np.all(c1 > 0) and np.all(c0 > 0):
                mu1_vals = s1 / c1
                mu0_vals = s0 / c0
                m_vals = sp / cp

                def lookup(vals, edges=edges):
                    def f(hq):
                        hq = np.asarray(hq, dtype=float)
                        idx = np.clip(np.digitize(hq, edges[1:-1]), 0, len(edges) - 2)
                        return vals[idx]

                    return f

                m_fn = lookup(m_vals)
                resid2 = (y - m_fn(h)) ** 2
                sr, _ = _binned_mean(h, resid2, edges)
                sig_vals = np.maximum(sr / cp, sigma_floor)
                return NuisanceSet(
                    mu0=lookup(mu0_vals),
                    mu1=lookup(mu1_vals),
                    m=m_fn,
                    sigma=lookup(sig_vals),
                    fit_tag="binned",
                )
            b //= 2
        raise ValueError(
            "cannot fit binned nuisances: some bin has an empty treatment arm "
            "even with a single bin"
        )
    if method == "polynomial":
        deg = int(degree)
        if (z == 1).sum() <= deg or (z == 0).sum() <= deg:
            raise ValueError("too few observations per arm for the polynomial degree")

        def polyfit(xs, ys):
            coeffs = np.polynomial.polynomial.polyfit(xs, ys, deg)
            return lambda hq: np.polynomial.polynomial.polyval(
                np.asarray(hq, dtype=float), coeffs
            )

        mu1 = polyfit(h[z == 1], y[z == 1])
        mu0 = polyfit(h[z == 0], y[z == 0])
        m_fn = polyfit(h, y)
        resid2 = (y - m_fn(h)) ** 2
        sig_raw = polyfit(h, resid2)
        sigma = lambda hq: np.maximum(sig_raw(hq), sigma_floor)
        return NuisanceSet(mu0=mu0, mu1=mu1, m=m_fn, sigma=sigma, fit_tag="polynomial")
    raise ValueError("method must be 'binned' or 'polynomial'")


def split_indices(n: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Random 50/50 partition into (nuisance, estimation) index sets."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 2]))
    perm = rng.permutation(n)
    half = n // 2
    return np.sort(perm[:half]), np.sort(perm[half:])


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------


def dr_influence(
    h: np.ndarray,
    z: np.ndarray,
    y: np.ndarray,
    propensities: np.ndarray,
    nuisances: NuisanceSet,
) -> np.ndarray:
    """Per-unit efficient-influence contributions for the DR ATE."""
    m1 = nuisances.mu1(h)
    m0 = nuisances.mu0(h)
    pi = np.asarray(propensities, dtype=float)
    return m1 - m0 + z * (y - m1) / pi - (1 - z) * (y - m0) / (1 - pi)


def estimate_dr_ate(
    h: np.ndarray,
    z: np.ndarray,
    y: np.ndarray,
    propensities: np.ndarray,
    nuisances: NuisanceSet,
    gamma: float = 0.01,
    bootstrap_reps: Optional[int] = None,
    seed: int = 0,
) -> EstimateReport:
    """Doubly robust ATE with augmented inverse-propensity weighting.

    Positivity gamma <= pi_i <= 1 - gamma must hold for every unit: a
    violation means the design treats some units (almost) deterministically
    and the ATE is not identified from it, so the error names the offenders
    rather than returning an arbitrarily noisy number.
    """
    h = np.asarray(h, dtype=float)
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float)
    pi = np.asarray(propensities, dtype=float)
    n = h.shape[0]
    if not (0.0 <= gamma < 0.5):
        raise ValueError("gamma must lie in [0, 0.5)")
    bad = np.nonzero((pi < gamma) | (pi > 1 - gamma))[0]
    if bad.size:
        shown = ", ".join(str(int(b)) for b in bad[:10])
        more = "" if bad.size <= 10 else f" (+{bad.size - 10} more)"
        raise ValueError(
            f"positivity violated at gamma={gamma}: units [{shown}]{more} have "
            "propensities outside [gamma, 1-gamma]; the design is too "
            "deterministic for ATE estimation"
        )
    phi = dr_influence(h, z, y, pi, nuisances)
    point = float(phi.mean())
    if bootstrap_reps is None:
        se = float(phi.std(ddof=1) / np.sqrt(n))
        return wald_report(point, se, n, "dr_ate")
    boot = multiplier_bootstrap(phi, reps=bootstrap_reps, seed=seed)
    return EstimateReport(
        point=point,
        se=boot.se,
        ci_low=boot.ci_low,
        ci_high=boot.ci_high,
        n=n,
        method="dr_ate",
        bootstrap_reps=int(bootstrap_reps),
    )


def estimate_pliv(
    h: np.ndarray,
    z: np.ndarray,
    y: np.ndarray,
    queues: np.ndarray,
    theta: np.ndarray,
    alpha: AlphaVector,
    nuisances: NuisanceSet,
    relevance_floor: float = 1e-8,
) -> EstimateReport:
    """Partially linear IV estimate using the variance-weighted queue residual.

    The instrument is zeta_i = alpha_{Q_i} - pi(theta_i), centered by
    construction given X, and weighted by 1/sigma(X).  Identification only
    needs the queue draw to be independent of the disturbance given X, so
    the estimate is consistent even when arrival order is confounded.
    """
    h = np.asarray(h, dtype=float)
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float)
    queues = np.asarray(queues, dtype=int)
    theta = np.asarray(theta, dtype=float)
    n = h.shape[0]
    a = alpha.alpha
    pi = theta @ a
    resid = a[None, :] - pi[:, None]
    expected_sq = float(np.einsum("ik,ik->", theta, resid**2) / n)
    if expected_sq < relevance_floor:
        raise ValueError(
            f"instrument relevance failure: mean expected squared residual "
            f"{expected_sq:.3e} < floor {relevance_floor:.3e}; the design has "
            "no usable queue randomization"
        )
    zeta = a[queues - 1] - pi
    sig = nuisances.sigma(h)
    f = zeta / sig
    den = float(np.mean(f * (z - pi)))
    if den == 0.0:
        raise ValueError("realized instrument-treatment covariance is zero")
    num = float(np.mean(f * (y - nuisances.m(h))))
    point = num / den
    # asymptotic variance: inverse of the design-expected information
    info = float(np.einsum("ik,ik->", theta, resid**2 / sig[:, None]) / n)
    se = float(np.sqrt(1.0 / info / n))
    return wald_report(point, se, n, "pliv")


def estimate_iv_ratio(
    y: np.ndarray, z: np.ndarray, r: np.ndarray
) -> EstimateReport:
    """Raw instrument ratio E_n[rY] / E_n[rZ] with a delta-method SE."""
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    r = np.asarray(r, dtype=float)
    n = y.shape[0]
    den = float(np.mean(r * z))
    if den == 0.0:
        raise ValueError(
            "instrument relevance failure: sum of r_i Z_i is zero"
        )
    point = float(np.mean(r * y)) / den
    phi = r * (y - point * z) / den
    se = float(phi.std(ddof=1) / np.sqrt(n))
    return wald_report(point, se, n, "iv_ratio")


# ---------------------------------------------------------------------------
# LATE decomposition on enumerable instances
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LateDecomposition:
    """Pairwise complier decomposition of the population IV ratio.

    Row (k, l) with k < l holds, per unit: the probability of being a
    (k, l)-complier (served in queue k, not in queue l), the conditional
    effect among those compliers, and the weight theta_k * theta_l *
    (pi_tilde_k - pi_tilde_l)^2.  The weighted average over pairs and units
    reproduces the population IV ratio exactly.
    """

    pairs: tuple
    complier_prob: np.ndarray
    effects: np.ndarray
    weights: np.ndarray
    weighted_average: float
    iv_ratio: float

    def __post_init__(self):
        if np.any(self.weights < -1e-15):
            raise ValueError("decomposition weights must be nonnegative")


def late_decomposition(oracle: ExactOracle, cohort: Cohort) -> LateDecomposition:
    """Decompose the population IV ratio into pairwise local effects.

    Uses the exhaustive world table: every (unit, world) is classified as a
    (k, l) complier iff forcing queue k serves it and forcing queue l does
    not.  Any world where a higher-priority queue serves *less* is a
    mechanism bug and raises immediately.  The IV ratio is computed from the
    same joint law (realized queues and treatments world by world) and must
    match the weighted average to 1e-10.
    """
    worlds = oracle.worlds
    if worlds is None:
        raise ValueError(
            "the exact oracle was built without a world table (instance too "
            "large); the decomposition needs exhaustive worlds"
        )
    table = oracle.table
    theta = table.theta
    qc = table.queue_conditional
    n, k = qc.shape
    zmap = worlds.zmap
    if np.any(np.diff(zmap.astype(np.int8), axis=2) > 0):
        raise ValueError(
            "monotonicity violated: some world treats a unit under a lower "
            "priority but not a higher one — allocator bug"
        )
    delta = cohort.y1 - cohort.y0
    pairs = tuple((a + 1, b + 1) for a in range(k) for b in range(a + 1, k))
    complier = np.zeros((len(pairs), n))
    weights = np.zeros((len(pairs), n))
    effects = np.tile(delta, (len(pairs), 1))
    for idx, (ka, kb) in enumerate(pairs):
        comp = zmap[:, :, ka - 1] & ~zmap[:, :, kb - 1]
        complier[idx] = worlds.probs @ comp
        weights[idx] = (
            theta[:, ka - 1] * theta[:, kb - 1] * (qc[:, ka - 1] - qc[:, kb - 1]) ** 2
        )
    total_weight = weights.sum()
    if total_weight <= 0:
        raise ValueError(
            "degenerate design: no pair of queues produces complier mass"
        )
    weighted_average = float((weights * effects).sum() / total_weight)

    # IV ratio from the same joint law: average rY and rZ over every world
    r = finite_instrument(table)
    labels = worlds.configs[worlds.config_idx]  # (W, n)
    r_realized = np.take_along_axis(
        np.broadcast_to(r, (worlds.n_worlds, n, k)), (labels - 1)[:, :, None], axis=2
    )[:, :, 0]
    z_realized = worlds.realized_z().astype(float)
    y_realized = cohort.y0[None, :] + z_realized * delta[None, :]
    e_rz = float(worlds.probs @ (r_realized * z_realized).mean(axis=1))
    e_ry = float(worlds.probs @ (r_realized * y_realized).mean(axis=1))
    if e_rz == 0.0:
        raise ValueError("population instrument-treatment covariance is zero")
    iv_ratio = e_ry / e_rz
    if abs(iv_ratio - weighted_average) > 1e-10:
        raise ValueError(
            f"decomposition identity violated: IV ratio {iv_ratio!r} vs "
            f"weighted average {weighted_average!r}"
        )
    return LateDecomposition(
        pairs=pairs,
        complier_prob=complier,
        effects=effects,
        weights=weights,
        weighted_average=weighted_average,
        iv_ratio=iv_ratio,
    )


# ---------------------------------------------------------------------------
# asymptotic variance formulas
# ---------------------------------------------------------------------------


def variance_dr_formula(
    h: np.ndarray,
    theta: np.ndarray,
    alpha: AlphaVector,
    var1: Fn,
    var0: Fn,
    cate: Fn,
) -> float:
    """Asymptotic variance of the DR ATE under the design (theta, alpha).

    E[Var(Y|1,X)/pi + Var(Y|0,X)/(1-pi)] + Var(E[Y|1,X] - E[Y|0,X]),
    evaluated over the cohort's empirical risk scores.
    """
    h = np.asarray(h, dtype=float)
    pi = marginal_propensity(theta, alpha)
    pi = np.broadcast_to(np.asarray(pi, dtype=float), h.shape)
    if np.any(pi <= 0.0) or np.any(pi >= 1.0):
        raise ValueError("propensities on the boundary: DR variance undefined")
    tau_x = cate(h)
    return float(
        np.mean(var1(h) / pi + var0(h) / (1 - pi)) + np.var(tau_x)
    )


def variance_pliv_formula(
    h: np.ndarray, theta: np.ndarray, alpha: AlphaVector, sigma: Fn
) -> float:
    """Asymptotic variance of the weighted-IV estimator.

    Inverse of the expected information E[(alpha_Q - pi)^2 / sigma(X)], with
    Q drawn row-wise from theta and X over the empirical risk scores.
    """
    h = np.asarray(h, dtype=float)
    theta = np.asarray(theta, dtype=float)
    a = alpha.alpha
    pi = theta @ a
    resid = a[None, :] - pi[:, None]
    info = float(np.einsum("ik,ik->", theta, resid**2 / sigma(h)[:, None]) / h.shape[0])
    if info <= 0.0:
        raise ValueError(
            "instrument relevance failure: expected squared residual is zero "
            "(deterministic policy)"
        )
    return 1.0 / info


# ---------------------------------------------------------------------------
# multiplier bootstrap
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BootstrapResult:
    point: float
    se: float
    ci_low: float
    ci_high: float
    reps: int


def _perturbed_means(centered: np.ndarray, reps: int, seed: int) -> np.ndarray:
    """mean(xi * phi_centered) per replicate, chunked to bound memory."""
    n = centered.shape[0]
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 3]))
    out = np.empty(reps)
    chunk = max(1, int(2_000_000 // max(n, 1)))
    done = 0
    while done < reps:
        take = min(chunk, reps - done)
        xi = rng.standard_normal((take, n))
        out[done : done + take] = xi @ centered / n
        done += take
    return out


def multiplier_bootstrap(
    influence: np.ndarray, reps: int = 10_000, seed: int = 0
) -> BootstrapResult:
    """Gaussian-multiplier bootstrap for a sample-mean statistic.

    Each replicate perturbs the centered influence values with iid standard
    normal multipliers; the 2.5%/97.5% quantiles of the perturbations are
    anchored at the point estimate.  Degenerate influence (all equal) gives
    a zero-width interval.
    """
    influence = np.asarray(influence, dtype=float)
    if reps < 1:
        raise ValueError("reps must be positive")
    point = float(influence.mean())
    centered = influence - point
    perturbed = _perturbed_means(centered, reps, seed)
    lo, hi = np.quantile(perturbed, [0.025, 0.975])
    return BootstrapResult(
        point=point,
        se=float(perturbed.std(ddof=1)),
        ci_low=point + float(lo),
        ci_high=point + float(hi),
        reps=int(reps),
    )


def multiplier_band(
    columns: np.ndarray, reps: int = 10_000, seed: int = 0
) -> np.ndarray:
    """Pointwise 95% bands for several mean statistics sharing multipliers.

    ``columns`` is (n, G): one column of influence values per grid point.
    Returns (G, 2) low/high bands.  Sharing the multiplier draws across the
    grid keeps neighboring band points positively coupled, as a frontier
    band should be.
    """
    columns = np.asarray(columns, dtype=float)
    n, g = columns.shape
    points = columns.mean(axis=0)
    centered = columns - points[None, :]
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 3]))
    perturbed = np.empty((reps, g))
    chunk = max(1, int(2_000_000 // max(n, 1)))
    done = 0
    while done < reps:
        take = min(chunk, reps - done)
        xi = rng.standard_normal((take, n))
        perturbed[done : done + take] = xi @ centered / n
        done += take
    qs = np.quantile(perturbed, [0.025, 0.975], axis=0)
    lo = points + qs[0]
    hi = points + qs[1]
    return np.stack([lo, hi], axis=1)
