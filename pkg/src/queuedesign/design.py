"""Constrained policy design: variance objectives under utility floors.

Two convex programs over row-stochastic policies theta with column means
pinned to the queue shares p and a floor on decision-maker utility
(1/n) sum_i u_i * pi_i >= c, where pi_i = alpha . theta_i:

* exogenous:  minimize (1/n) sum_i [1/pi_i + 1/(1-pi_i)] + kappa*R(theta)
  (the overlap penalty driving the doubly robust variance), convex in theta;
* endogenous: maximize (1/n) sum_i [sum_k alpha_k^2 theta_ik - pi_i^2]
  - kappa*R(theta) (the expected conditional instrument variance), concave.

Both are solved in the dual: for fixed multipliers (lambda for the utility
floor, nu for the column constraints) the Lagrangian separates across units,
and each per-unit subproblem reduces to a one-dimensional monotone root
find along the regularizer's mirror path (softmax for negative entropy,
a simplex projection for the quadratic).  The dual is maximized with
L-BFGS-B and polished by a damped Newton step on the KKT residuals.

The reported ``objective_value`` is always the *unregularized* objective of
the returned policy; kappa only selects among near-optimal policies.  Any
constant rescaling of the nuisance uncertainty bound multiplies the
objective but never moves the argmin, so no such bound appears here.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np
import scipy.optimize

from .propensity import AlphaVector
from .estimation import variance_dr_formula, variance_pliv_formula
from .policies import assortative_policy

REGULARIZERS = ("neg_entropy", "l2_to_p")
OBJECTIVES = ("exogenous", "endogenous")

_PI_EPS = 1e-8  # clamp for 1/pi + 1/(1-pi) when alpha touches {0, 1}


# ---------------------------------------------------------------------------
# problem statement
# ---------------------------------------------------------------------------


def feasible_utility_range(
    utilities: np.ndarray, alpha: AlphaVector, p: np.ndarray
) -> tuple[float, float]:
    """Extremal achievable utilities over policies with column means p.

    The utility functional is linear with a rank-one coefficient u_i*alpha_k,
    so its extrema over the transportation polytope are the two assortative
    assignments (rearrangement inequality): matching high u to high alpha
    maximizes, matching high u to low alpha minimizes.
    """
    u = np.asarray(utilities, dtype=float)
    p = np.asarray(p, dtype=float)
    a = alpha.alpha
    hi = assortative_policy(u, p, best_first=True)
    lo = assortative_policy(u, p, best_first=False)
    return float(np.mean(u * (lo @ a))), float(np.mean(u * (hi @ a)))


@dataclass(frozen=True)
class DesignProblem:
    """One instance of the constrained design program."""

    utilities: np.ndarray
    alpha: AlphaVector
    p: np.ndarray
    utility_floor: float
    regularizer: str = "neg_entropy"
    kappa: Optional[float] = None
    objective: str = "exogenous"
    constraint_tol: float = 1e-6
    dual_tol: float = 1e-6
    max_iters: int = 500

    def __post_init__(self):
        u = np.asarray(self.utilities, dtype=float)
        p = np.asarray(self.p, dtype=float)
        object.__setattr__(self, "utilities", u)
        object.__setattr__(self, "p", p)
        if u.ndim != 1 or u.shape[0] < 1:
            raise ValueError("utilities must be a nonempty vector")
        if np.any(u <= 0.0) or np.any(u >= 1.0):
            raise ValueError("utilities must lie strictly inside (0, 1)")
        if self.regularizer not in REGULARIZERS:
            raise ValueError(f"regularizer must be one of {REGULARIZERS}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if p.shape != self.alpha.p.shape or np.max(np.abs(p - self.alpha.p)) > 1e-9:
            raise ValueError("p must match the shares the alpha vector was built from")
        if self.kappa is None:
            object.__setattr__(self, "kappa", default_kappa(self))
        if not (self.kappa > 0.0):
            raise ValueError("kappa must be positive (strict convexity)")
        for name in ("constraint_tol", "dual_tol"):
            if not (getattr(self, name) > 0.0):
                raise ValueError(f"{name} must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")

    @property
    def n(self) -> int:
        return self.utilities.shape[0]

    @property
    def k(self) -> int:
        return self.p.shape[0]

    @property
    def beta(self) -> float:
        return self.alpha.beta

    @property
    def c_rct(self) -> float:
        """Utility of the uniform policy: beta * mean(u)."""
        return float(self.beta * self.utilities.mean())

    def utility_range(self) -> tuple[float, float]:
        return feasible_utility_range(self.utilities, self.alpha, self.p)

    @property
    def feasible(self) -> bool:
        return self.utility_floor <= self.utility_range()[1] + self.constraint_tol


def default_kappa(problem: DesignProblem) -> float:
    """1e-3 times the objective scale at the uniform policy theta = p.

    Small enough not to move the frontier visibly, large enough that the
    regularized inner problems are strictly convex with a unique optimum.
    """
    a = problem.alpha.alpha
    p = problem.p
    beta = float(a @ p)
    if problem.objective == "exogenous":
        scale = 1.0 / max(beta, _PI_EPS) + 1.0 / max(1.0 - beta, _PI_EPS)
    else:
        scale = float(p @ a**2 - beta**2)
    return 1e-3 * max(scale, 1e-3)


@dataclass(frozen=True)
class DesignSolution:
    """Optimized policy with duals and convergence diagnostics."""

    problem: DesignProblem
    policy: np.ndarray
    objective_value: float
    achieved_utility: float
    lam: float
    nu: np.ndarray
    converged: bool
    iterations: int

    def __post_init__(self):
        prob = self.problem
        tol = prob.constraint_tol
        col_dev = np.max(np.abs(self.policy.mean(axis=0) - prob.p))
        if col_dev > tol:
            raise ValueError(f"column means deviate from p by {col_dev:.2e} > {tol:.0e}")
        if self.achieved_utility < prob.utility_floor - tol:
            raise ValueError("solution violates its utility floor")
        if self.lam < -1e-12:
            raise ValueError("utility multiplier must be nonnegative")
        slack = abs(self.lam * (prob.utility_floor - self.achieved_utility))
        if slack > max(prob.dual_tol, 10 * tol):
            raise ValueError(f"complementary slackness violated: {slack:.2e}")

    @property
    def kkt_residual(self) -> float:
        prob = self.problem
        col_dev = float(np.max(np.abs(self.policy.mean(axis=0) - prob.p)))
        floor_violation = max(0.0, prob.utility_floor - self.achieved_utility)
        slack = abs(self.lam * (prob.utility_floor - self.achieved_utility))
        return max(col_dev, floor_violation, slack, -min(self.lam, 0.0))


# ---------------------------------------------------------------------------
# per-unit inner problems
# ---------------------------------------------------------------------------


def _project_simplex(x: np.ndarray) -> np.ndarray:
    """Row-wise Euclidean projection onto the probability simplex."""
    srt = np.sort(x, axis=1)[:, ::-1]
    cs = np.cumsum(srt, axis=1) - 1.0
    idx = np.arange(1, x.shape[1] + 1)
    cond = srt - cs / idx > 0
    rho = np.count_nonzero(cond, axis=1)
    tau = cs[np.arange(x.shape[0]), rho - 1] / rho
    return np.maximum(x - tau[:, None], 0.0)


def _mirror_policy(v: np.ndarray, p: np.ndarray, kappa: float, regularizer: str):
    """argmin over simplex rows of kappa*R(theta) - v.theta (closed form)."""
    if regularizer == "neg_entropy":
        x = v / kappa
        x = x - x.max(axis=1, keepdims=True)
        e = np.exp(x)
        return e / e.sum(axis=1, keepdims=True)
    return _project_simplex(p[None, :] + v / kappa)


def _inner_solve(
    w: np.ndarray,
    alpha: np.ndarray,
    p: np.ndarray,
    kappa: float,
    phi_prime: Callable[[np.ndarray], np.ndarray],
    regularizer: str,
):
    """Minimize phi(alpha.theta) + kappa*R(theta) - w.theta per row.

    Substituting theta(eta) = argmin kappa*R - (w + eta*alpha).theta turns
    the first-order condition into the scalar equation eta + phi'(s(eta))=0
    with s(eta) = alpha.theta(eta) nondecreasing, so the left side is
    strictly increasing and a vectorized bisection is exact and safe.
    """
    n = w.shape[0]

    def s_of(eta):
        theta = _mirror_policy(w + eta[:, None] * alpha[None, :], p, kappa, regularizer)
        return theta, theta @ alpha

    def g(eta):
        _, s = s_of(eta)
        return eta + phi_prime(s)

    lo = np.full(n, -4.0)
    hi = np.full(n, 4.0)
    for _ in range(40):
        need = g(lo) > 0.0
        if not need.any():
            break
        lo[need] *= 4.0
    for _ in range(40):
        need = g(hi) < 0.0
        if not need.any():
            break
        hi[need] *= 4.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        pos = g(mid) > 0.0
        hi = np.where(pos, mid, hi)
        lo = np.where(pos, lo, mid)
    eta = 0.5 * (lo + hi)
    theta, s = s_of(eta)
    return theta, s


def _regularizer_value(theta: np.ndarray, p: np.ndarray, regularizer: str) -> np.ndarray:
    if regularizer == "neg_entropy":
        t = np.clip(theta, 1e-300, None)
        return np.sum(theta * np.log(t), axis=1)
    return 0.5 * np.sum((theta - p[None, :]) ** 2, axis=1)


def _phi_functions(objective: str, alpha: np.ndarray):
    """(phi, phi', linear offset) for the scalarized channel s = alpha.theta."""
    if objective == "exogenous":

        def phi(s):
            sc = np.clip(s, _PI_EPS, 1.0 - _PI_EPS)
            return 1.0 / sc + 1.0 / (1.0 - sc)

        def phi_prime(s):
            sc = np.clip(s, _PI_EPS, 1.0 - _PI_EPS)
            return -1.0 / sc**2 + 1.0 / (1.0 - sc) ** 2

        offset = np.zeros_like(alpha)
    else:
        # maximize sum alpha^2 theta - s^2  ==  minimize s^2 - (alpha^2).theta
        phi = lambda s: s**2
        phi_prime = lambda s: 2.0 * s
        offset = alpha**2
    return phi, phi_prime, offset


# ---------------------------------------------------------------------------
# dual solver
# ---------------------------------------------------------------------------


def _dual_state(x: np.ndarray, problem: DesignProblem, phi, phi_prime, offset):
    """Dual value, gradient, and the minimizing policy at multipliers x."""
    u = problem.utilities
    a = problem.alpha.alpha
    p = problem.p
    c = problem.utility_floor
    lam = x[0]
    nu = np.concatenate([x[1:], [0.0]])
    w = lam * u[:, None] * a[None, :] + nu[None, :] + offset[None, :]
    theta, s = _inner_solve(w, a, p, problem.kappa, phi_prime, problem.regularizer)
    inner = (
        phi(s)
        + problem.kappa * _regularizer_value(theta, p, problem.regularizer)
        - np.sum(w * theta, axis=1)
    )
    value = float(inner.mean() + lam * c + nu @ p)
    grad = np.empty(problem.k)
    grad[0] = c - float(np.mean(u * s))
    grad[1:] = p[:-1] - theta.mean(axis=0)[:-1]
    return value, grad, theta, s


def exogenous_objective(theta: np.ndarray, alpha: AlphaVector) -> float:
    """Mean overlap penalty E_n[1/pi + 1/(1-pi)], pi clamped to (0, 1)."""
    s = np.asarray(theta, dtype=float) @ alpha.alpha
    sc = np.clip(s, _PI_EPS, 1.0 - _PI_EPS)
    return float(np.mean(1.0 / sc + 1.0 / (1.0 - sc)))


def endogenous_objective(theta: np.ndarray, alpha: AlphaVector) -> float:
    """Mean conditional instrument variance E_n[Var(alpha_Q | X)]."""
    theta = np.asarray(theta, dtype=float)
    a = alpha.alpha
    s = theta @ a
    return float(np.mean(theta @ a**2 - s**2))


def _primal_from(theta: np.ndarray, s: np.ndarray, problem: DesignProblem):
    if problem.objective == "exogenous":
        obj = exogenous_objective(theta, problem.alpha)
    else:
        obj = endogenous_objective(theta, problem.alpha)
    utility = float(np.mean(problem.utilities * s))
    return obj, utility


def _solve(problem: DesignProblem, x0: Optional[np.ndarray]) -> DesignSolution:
    c_min, c_max = problem.utility_range()
    c = problem.utility_floor
    tol = problem.constraint_tol
    if c > c_max + tol:
        raise ValueError(
            f"infeasible utility floor {c:.6g}: the achievable range is "
            f"[{c_min:.6g}, {c_max:.6g}]"
        )
    if c >= c_max - 1e-12 * max(1.0, abs(c_max)):
        # the feasible set has collapsed to the assortative extreme point;
        # return it directly rather than chasing an unbounded dual
        theta = assortative_policy(problem.utilities, problem.p, best_first=True)
        s = theta @ problem.alpha.alpha
        obj, utility = _primal_from(theta, s, problem)
        return DesignSolution(
            problem=problem,
            policy=theta,
            objective_value=obj,
            achieved_utility=utility,
            lam=0.0,
            nu=np.zeros(problem.k - 1),
            converged=True,
            iterations=0,
        )

    phi, phi_prime, offset = _phi_functions(problem.objective, problem.alpha.alpha)
    if x0 is None:
        x0 = np.zeros(problem.k)
    bounds = [(0.0, None)] + [(None, None)] * (problem.k - 1)

    def neg_dual(x):
        value, grad, _, _ = _dual_state(x, problem, phi, phi_prime, offset)
        return -value, -grad

    res = scipy.optimize.minimize(
        neg_dual,
        x0,
        jac=True,
        method="L-BFGS-B",
        bounds=bounds,
        options={"maxiter": problem.max_iters, "ftol": 1e-14, "gtol": 1e-10},
    )
    x = res.x
    iterations = int(res.nit)

    # Newton polish on the KKT system: drive the dual gradient to zero,
    # holding lambda at zero when the utility constraint is slack
    def residual(x):
        _, grad, theta, s = _dual_state(x, problem, phi, phi_prime, offset)
        r = -grad  # primal residuals: (utility slack, column deviations)
        if x[0] <= 0.0 and r[0] >= 0.0:
            r = r.copy()
            r[0] = 0.0  # lambda = 0 with slack constraint satisfies KKT
        return r, theta, s

    r, theta, s = residual(x)
    for _ in range(40):
        if np.max(np.abs(r)) <= problem.dual_tol * 0.1:
            break
        jac = np.zeros((problem.k, problem.k))
        h = 1e-7 * np.maximum(1.0, np.abs(x))
        for j in range(problem.k):
            xp = x.copy()
            xp[j] += h[j]
            rp, _, _ = residual(xp)
            jac[:, j] = (rp - r) / h[j]
        try:
            step = np.linalg.solve(jac + 1e-12 * np.eye(problem.k), -r)
        except np.linalg.LinAlgError:
            break
        best = None
        t = 1.0
        for _ in range(20):
            xn = x.copy() + t * step
            xn[0] = max(xn[0], 0.0)
            rn, tn, sn = residual(xn)
            if np.max(np.abs(rn)) < np.max(np.abs(r)):
                best = (xn, rn, tn, sn)
                break
            t *= 0.5
        if best is None:
            break
        x, r, theta, s = best
        iterations += 1

    obj, utility = _primal_from(theta, s, problem)
    converged = bool(np.max(np.abs(r)) <= problem.dual_tol)
    return DesignSolution(
        problem=problem,
        policy=theta,
        objective_value=obj,
        achieved_utility=utility,
        lam=float(max(x[0], 0.0)),
        nu=x[1:].copy(),
        converged=converged,
        iterations=iterations,
    )


def optimize_exogenous(
    problem: DesignProblem, x0: Optional[np.ndarray] = None
) -> DesignSolution:
    """Minimize the overlap penalty E[1/pi + 1/(1-pi)] under the constraints."""
    if problem.objective != "exogenous":
        problem = replace(problem, objective="exogenous")
    a = problem.alpha.alpha
    if np.max(a) - np.min(a) <= 1e-12:
        raise ValueError(
            "all queue propensities are equal: pi does not depend on the "
            "policy and the overlap objective is constant"
        )
    return _solve(problem, x0)


def optimize_endogenous(
    problem: DesignProblem, x0: Optional[np.ndarray] = None
) -> DesignSolution:
    """Maximize the expected conditional instrument variance."""
    if problem.objective != "endogenous":
        problem = replace(problem, objective="endogenous")
    a = problem.alpha.alpha
    if problem.k < 2 or np.max(a) - np.min(a) <= 1e-12:
        raise ValueError(
            "degenerate design: at least two distinct queue propensities are "
            "needed for the instrument to vary"
        )
    return _solve(problem, x0)


# ---------------------------------------------------------------------------
# Pareto sweep
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParetoPoint:
    c: float
    status: str  # "ok" or "infeasible"
    solution: Optional[DesignSolution]
    dr_variance: float = float("nan")
    pliv_variance: float = float("nan")


def pareto_sweep(
    problem: DesignProblem,
    c_grid: np.ndarray,
    var1: Optional[Callable] = None,
    var0: Optional[Callable] = None,
    cate: Optional[Callable] = None,
    sigma: Optional[Callable] = None,
) -> list[ParetoPoint]:
    """Solve the design problem along a grid of utility floors.

    Each solve is warm-started from the previous point's multipliers.  For
    every solution the plug-in variances of both estimators are evaluated
    when their nuisance-variance functions are supplied; a policy whose
    propensities pin to {0, 1} (or whose instrument degenerates) gets an
    infinite variance rather than an error, since the frontier must extend
    to the deterministic extreme.  Infeasible floors are recorded and the
    sweep continues.
    """
    points: list[ParetoPoint] = []
    solver = optimize_exogenous if problem.objective == "exogenous" else optimize_endogenous
    x0 = None
    for c in np.asarray(c_grid, dtype=float):
        prob_c = replace(problem, utility_floor=float(c))
        try:
            sol = solver(prob_c, x0)
        except ValueError as err:
            if "infeasible" not in str(err):
                raise
            points.append(ParetoPoint(c=float(c), status="infeasible", solution=None))
            continue
        x0 = np.concatenate([[sol.lam], sol.nu])
        dr_v = float("nan")
        pliv_v = float("nan")
        if var1 is not None and var0 is not None and cate is not None:
            try:
                dr_v = variance_dr_formula(
                    problem.utilities, sol.policy, problem.alpha, var1, var0, cate
                )
            except ValueError:
                dr_v = float("inf")
        if sigma is not None:
            try:
                pliv_v = variance_pliv_formula(
                    problem.utilities, sol.policy, problem.alpha, sigma
                )
            except ValueError:
                pliv_v = float("inf")
        points.append(
            ParetoPoint(
                c=float(c),
                status="ok",
                solution=sol,
                dr_variance=dr_v,
                pliv_variance=pliv_v,
            )
        )
    return points
