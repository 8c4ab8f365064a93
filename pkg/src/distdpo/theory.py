"""Discrete check of the closed-form optimum of the KL-minus-reward objective.

For a teacher PMF ``p``, reward ``r`` and weight ``omega`` the objective

    J(q) = KL(q || p) - omega * E_q[r]

is minimised by the tilted distribution ``p * exp(omega * r) / Z``, and
``J(q) - J(p*) = KL(q || p*)``. The brute-force grid search is an
independent oracle for that claim.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize


class TheoryError(ValueError):
    pass


@dataclass(frozen=True)
class DiscretePreferenceProblem:
    p_theta: np.ndarray
    r: np.ndarray
    omega: float = 1.0

    def __post_init__(self):
        p = np.asarray(self.p_theta, dtype=np.float64)
        r = np.asarray(self.r, dtype=np.float64)
        if p.ndim != 1 or r.shape != p.shape:
            raise TheoryError("p_theta and r must be vectors of the same length")
        if np.any(p <= 0) or abs(math.fsum(p.tolist()) - 1.0) > 1e-12:
            raise TheoryError("p_theta must be strictly positive and sum to 1")
        if not np.all(np.isfinite(r)):
            raise TheoryError("reward must be finite")
        if self.omega < 0:
            raise TheoryError("omega must be >= 0")
        object.__setattr__(self, "p_theta", p)
        object.__setattr__(self, "r", r)

    @property
    def n(self) -> int:
        return self.p_theta.shape[0]


def _check_pmf(q, n):
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (n,) or np.any(q < 0) or abs(math.fsum(q.tolist()) - 1.0) > 1e-9:
        raise TheoryError("q must be a probability vector over the problem's states")
    return q


def kl(q, p) -> float:
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    nz = q > 0
    if np.any(p[nz] <= 0):
        return math.inf
    return math.fsum((q[nz] * np.log(q[nz] / p[nz])).tolist())


def objective(problem: DiscretePreferenceProblem, q) -> float:
    """``sum q log(q / p_theta) - omega * sum q r`` with ``0 log 0 = 0``."""
    q = _check_pmf(q, problem.n)
    return kl(q, problem.p_theta) - problem.omega * math.fsum((q * problem.r).tolist())


def log_partition(problem: DiscretePreferenceProblem) -> float:
    z = np.log(problem.p_theta) + problem.omega * problem.r
    m = float(z.max())
    return m + math.log(math.fsum(np.exp(z - m).tolist()))


def closed_form_optimum(problem: DiscretePreferenceProblem) -> np.ndarray:
    z = np.log(problem.p_theta) + problem.omega * problem.r
    z = z - z.max()
    w = np.exp(z)
    return w / math.fsum(w.tolist())


def simplex_grid(n: int, step: float):
    """All points of the probability simplex on a grid of the given step."""
    m = int(round(1.0 / step))
    if abs(m * step - 1.0) > 1e-9:
        raise TheoryError("grid step must divide 1")
    for head in itertools.product(range(m + 1), repeat=n - 1):
        s = sum(head)
        if s <= m:
            yield np.array([*head, m - s], dtype=np.float64) / m


def brute_force_optimum(problem: DiscretePreferenceProblem, grid_step: float = 0.01):
    """Exhaustive argmin of the objective over the simplex grid (``n <= 4``)."""
    if problem.n > 4:
        raise TheoryError("brute force is limited to n <= 4 states")
    if not 0 < grid_step <= 0.1:
        raise TheoryError("grid_step must lie in (0, 0.1]")
    grid = np.array(list(simplex_grid(problem.n, grid_step)))
    return grid[int(np.argmin(grid_objectives(problem, grid)))]


def refined_optimum(problem: DiscretePreferenceProblem, grid_step: float = 0.01) -> np.ndarray:
    """Grid argmin polished by a numerical minimiser over softmax logits.

    Uses only the objective and its gradient, never the tilted form, so it
    stays an independent check at tolerances finer than the grid.
    """
    q0 = brute_force_optimum(problem, grid_step)
    x0 = np.log(np.maximum(q0, grid_step / 10))
    p, r, w = problem.p_theta, problem.r, problem.omega

    def fun(x):
        z = x - x.max()
        q = np.exp(z) / np.exp(z).sum()
        val = float(np.sum(q * (np.log(q) - np.log(p))) - w * q @ r)
        dq = np.log(q) - np.log(p) + 1.0 - w * r
        return val, q * (dq - q @ dq)

    res = minimize(fun, x0, jac=True, method="BFGS", options={"gtol": 1e-14, "maxiter": 500})
    z = res.x - res.x.max()
    return np.exp(z) / np.exp(z).sum()


def grid_objectives(problem: DiscretePreferenceProblem, grid: np.ndarray) -> np.ndarray:
    """Vectorised objective over rows of ``grid`` (same ``0 log 0`` convention)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(grid > 0, grid * np.log(grid / problem.p_theta), 0.0)
    return terms.sum(axis=1) - problem.omega * grid @ problem.r


@dataclass
class SweepResult:
    n_problems: int
    n_grid_points: int
    max_optimality_violation: float
    max_gibbs_error: float
    worked_example_error: float  # closed form vs refined numerical minimiser

    @property
    def passed(self) -> bool:
        return (self.max_optimality_violation <= 1e-12 and self.max_gibbs_error <= 1e-10
                and self.worked_example_error <= 1e-6)


def random_problem(rng: np.random.Generator, n: int = 3) -> DiscretePreferenceProblem:
    p = rng.dirichlet(np.ones(n))
    p = p / math.fsum(p.tolist())
    return DiscretePreferenceProblem(p, rng.normal(0.0, 1.0, n), float(rng.uniform(0.1, 3.0)))


def worked_example() -> DiscretePreferenceProblem:
    return DiscretePreferenceProblem(np.full(3, 1.0 / 3.0), np.array([1.0, 0.0, 0.0]), 1.0)


def theory_sweep(n_problems: int = 50, grid_step: float = 0.01, seed: int = 0) -> SweepResult:
    """Global-optimality and Gibbs-identity checks over random 3-state problems."""
    rng = np.random.default_rng(seed)
    grid = np.array(list(simplex_grid(3, grid_step)))
    worst_opt = -math.inf
    worst_gibbs = 0.0
    for _ in range(n_problems):
        prob = random_problem(rng)
        p_star = closed_form_optimum(prob)
        j_star = objective(prob, p_star)
        worst_opt = max(worst_opt, float(j_star - grid_objectives(prob, grid).min()))
        for q in grid[rng.choice(len(grid), size=25, replace=False)]:
            gap = objective(prob, q) - j_star
            worst_gibbs = max(worst_gibbs, abs(gap - kl(q, p_star)))
    ex = worked_example()
    ex_err = float(np.max(np.abs(closed_form_optimum(ex) - refined_optimum(ex, grid_step))))
    return SweepResult(n_problems, len(grid), max(worst_opt, 0.0), worst_gibbs, ex_err)
