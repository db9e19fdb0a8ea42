"""Synthetic cohorts for queue-based allocation experiments.

Two data generating processes are provided.  In both, each unit carries a
risk score h in (0, 1) that plays the role of the observable covariate: the
decision maker's utility for treating a unit is u(X) = h, and all outcome
regressions are functions of h alone.

``bernoulli``
    Outcomes are independent coin flips: Y(0) ~ Bern(h), Y(1) ~ Bern(h + psi).
    Arrival times are i.i.d. uniform on [0, tau], so arrival order carries no
    information about outcomes (the exogenous-arrival regime).

``partially_linear``
    Y(z) = psi * z + h + U with a uniform disturbance U | h ~ U(-0.2h, 0.2h),
    and units arrive in *descending* order of U on a fixed time grid.  Early
    arrivals are therefore the high-U units, which breaks the exogeneity of
    queue position and is the worst case for estimators that treat arrival
    order as noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

ESTIMATOR_METHODS = ("dr_ate", "pliv", "iv_ratio")

# h law: maps (rng, n) -> array of risk scores in (0, 1)
HLaw = Callable[[np.random.Generator, int], np.ndarray]


def default_h_law(rng: np.random.Generator, n: int) -> np.ndarray:
    """Beta(2, 5) risk scores rescaled to [0.1, 0.9].

    Keeps h bounded away from 0 and 1 so that Bern(h + psi) is well defined
    for moderate effect sizes and inverse-variance weights stay finite.
    """
    return 0.1 + 0.8 * rng.beta(2.0, 5.0, size=n)


@dataclass(frozen=True)
class Unit:
    """Single-unit view of a cohort row."""

    id: int
    h: float
    arrival: float
    y0: float
    y1: float
    confounder: Optional[float] = None


@dataclass(frozen=True)
class Cohort:
    """A fixed population of n units awaiting allocation over tau periods.

    Units are identified by their position: unit i is row i of each array.
    ``confounder`` holds the disturbance U for the partially linear DGP and
    is None for the bernoulli DGP (there is no hidden variable to record).
    """

    h: np.ndarray
    arrival: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    tau: int
    dgp_tag: str
    confounder: Optional[np.ndarray] = None

    def __post_init__(self):
        h = np.asarray(self.h, dtype=float)
        arrival = np.asarray(self.arrival, dtype=float)
        y0 = np.asarray(self.y0, dtype=float)
        y1 = np.asarray(self.y1, dtype=float)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "arrival", arrival)
        object.__setattr__(self, "y0", y0)
        object.__setattr__(self, "y1", y1)
        n = h.shape[0]
        for name, arr in (("arrival", arrival), ("y0", y0), ("y1", y1)):
            if arr.shape != (n,):
                raise ValueError(f"{name} must have shape ({n},), got {arr.shape}")
        if self.dgp_tag not in ("bernoulli", "partially_linear"):
            raise ValueError(f"unknown dgp_tag {self.dgp_tag!r}")
        if not (isinstance(self.tau, (int, np.integer)) and self.tau >= 1):
            raise ValueError("tau must be a positive integer number of periods")
        if np.any(h <= 0.0) or np.any(h >= 1.0):
            raise ValueError("risk scores h must lie strictly inside (0, 1)")
        if np.any(arrival < 0.0) or np.any(arrival > self.tau):
            raise ValueError("arrival times must lie in [0, tau]")
        if self.confounder is not None:
            conf = np.asarray(self.confounder, dtype=float)
            if conf.shape != (n,):
                raise ValueError("confounder must match cohort length")
            object.__setattr__(self, "confounder", conf)

    @property
    def n(self) -> int:
        return self.h.shape[0]

    @property
    def ids(self) -> np.ndarray:
        return np.arange(self.n)

    def unit(self, i: int) -> Unit:
        conf = None if self.confounder is None else float(self.confounder[i])
        return Unit(
            id=int(i),
            h=float(self.h[i]),
            arrival=float(self.arrival[i]),
            y0=float(self.y0[i]),
            y1=float(self.y1[i]),
            confounder=conf,
        )


def generate_cohort(
    n: int,
    tau: int,
    psi: float,
    h_law: Optional[HLaw] = None,
    seed: int = 0,
) -> Cohort:
    """Draw a bernoulli-outcome cohort with exogenous uniform arrivals.

    Potential outcomes are independent draws Y(0) ~ Bern(h) and
    Y(1) ~ Bern(h + psi); both success probabilities must land in [0, 1]
    for every unit, otherwise the draw is refused.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))
    law = h_law if h_law is not None else default_h_law
    h = np.asarray(law(rng, n), dtype=float)
    if h.shape != (n,):
        raise ValueError("h_law must return an array of shape (n,)")
    p1 = h + psi
    if np.any(p1 < 0.0) or np.any(p1 > 1.0):
        bad = int(np.argmax((p1 < 0.0) | (p1 > 1.0)))
        raise ValueError(
            f"h + psi must lie in [0, 1]; unit {bad} has h={h[bad]:.4f}, psi={psi}"
        )
    arrival = rng.uniform(0.0, tau, size=n)
    y0 = (rng.uniform(size=n) < h).astype(float)
    y1 = (rng.uniform(size=n) < p1).astype(float)
    return Cohort(h=h, arrival=arrival, y0=y0, y1=y1, tau=int(tau), dgp_tag="bernoulli")


def generate_bias_cohort(
    n: int,
    tau: int,
    psi: float,
    h_law: Optional[HLaw] = None,
    seed: int = 0,
) -> Cohort:
    """Draw a partially linear cohort whose arrival order is confounded.

    Y(z) = psi*z + h + U with U | h ~ Uniform(-0.2h, 0.2h), so E[U | h] = 0
    and the treatment effect is exactly psi for every unit.  Arrival times
    are the deterministic grid tau*(r - 0.5)/n assigned in descending order
    of U: the highest-U unit arrives first.  Any allocation rule that serves
    earlier arrivals first will thus treat units with systematically higher
    outcomes, which is invisible to regressions on h alone.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
    law = h_law if h_law is not None else default_h_law
    h = np.asarray(law(rng, n), dtype=float)
    if h.shape != (n,):
        raise ValueError("h_law must return an array of shape (n,)")
    u = rng.uniform(-0.2 * h, 0.2 * h)
    # Rank 0 = largest U. ties are measure-zero for continuous U; argsort is stable.
    order = np.argsort(-u, kind="stable")
    ranks = np.empty(n, dtype=int)
    ranks[order] = np.arange(n)
    arrival = tau * (ranks + 0.5) / n
    y0 = h + u
    y1 = psi + h + u
    return Cohort(
        h=h,
        arrival=arrival,
        y0=y0,
        y1=y1,
        tau=int(tau),
        dgp_tag="partially_linear",
        confounder=u,
    )


@dataclass(frozen=True)
class EstimateReport:
    """Point estimate with a standard error and a two-sided 95% interval."""

    point: float
    se: float
    ci_low: float
    ci_high: float
    n: int
    method: str
    bootstrap_reps: Optional[int] = None

    def __post_init__(self):
        if self.method not in ESTIMATOR_METHODS:
            raise ValueError(f"method must be one of {ESTIMATOR_METHODS}")
        if not np.isfinite(self.point):
            raise ValueError("point estimate must be finite")
        if not (np.isfinite(self.se) and self.se >= 0.0):
            raise ValueError("se must be finite and nonnegative")
        if self.ci_low > self.ci_high:
            raise ValueError("ci_low must not exceed ci_high")
        if self.n < 1:
            raise ValueError("n must be positive")
        if self.bootstrap_reps is not None and self.bootstrap_reps < 1:
            raise ValueError("bootstrap_reps must be positive when given")


def wald_report(point: float, se: float, n: int, method: str) -> EstimateReport:
    """Package a point estimate with the normal-approximation 95% interval."""
    point = float(point)
    se = float(se)
    return EstimateReport(
        point=point,
        se=se,
        ci_low=point - 1.96 * se,
        ci_high=point + 1.96 * se,
        n=int(n),
        method=method,
    )
