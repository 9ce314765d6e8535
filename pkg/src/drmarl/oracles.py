"""Independent reference computations used to cross-check the solvers.

These are deliberately naive: a generic LP solver over the simplex, dense grid
search over the dual variable, and exhaustive enumeration of stitched kernels.
"""

from __future__ import annotations

import itertools

import numpy as np
from scipy.optimize import linprog

from .decpomdp import TabularDecPomdp
from .uncertainty import Contamination, TotalVariation, UncertaintySet, eta_upper, tv_dual_objective


def lp_worst_expectation(values, nominal, uset: UncertaintySet) -> float:
    """min_q E_q[values] over the ball around ``nominal`` by linear programming.

    TV ball: variables (q, t) with t >= |q - p| and sum t <= 2 rho.
    Contamination: q = (1 - rho) p + rho nu with nu on the simplex.
    """
    v = np.asarray(values, dtype=np.float64)
    p = np.asarray(nominal, dtype=np.float64)
    n = len(v)
    if isinstance(uset, Contamination):
        res = linprog(uset.rho * v, A_eq=np.ones((1, n)), b_eq=[1.0], bounds=[(0, None)] * n, method="highs")
        return float((1.0 - uset.rho) * p @ v + res.fun)
    if isinstance(uset, TotalVariation):
        eye = np.eye(n)
        c = np.concatenate([v, np.zeros(n)])
        A_ub = np.block([[eye, -eye], [-eye, -eye], [np.zeros((1, n)), np.ones((1, n))]])
        b_ub = np.concatenate([p, -p, [2.0 * uset.rho]])
        A_eq = np.concatenate([np.ones(n), np.zeros(n)])[None]
        res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=[1.0],
                      bounds=[(0, None)] * (2 * n), method="highs")
        if res.status != 0:
            raise RuntimeError(f"LP failed: {res.message}")
        return float(res.fun)
    raise TypeError(f"no LP oracle for {uset!r}")


def grid_dual_minimize(values, nominal, rho: float, gamma: float, general: bool = False,
                       points: int = 20001) -> tuple[float, float]:
    """(eta, value) minimising the TV dual objective over a dense grid plus every kink."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = 0.0, eta_upper(rho, gamma)
    if general:
        lo = min(lo, float(v.min()))
    grid = np.concatenate([np.linspace(lo, hi, points), v[(v >= lo) & (v <= hi)]])
    g = tv_dual_objective(grid, v, nominal, rho, general)
    k = int(np.argmin(g))
    return float(grid[k]), float(g[k])


def stitched_kernels(model: TabularDecPomdp, kernels, cells=None):
    """Yield every kernel whose (state, joint action) rows are drawn from ``kernels``.

    Only ``cells`` (default: all cells where the candidates differ) are varied.
    """
    ks = [np.asarray(k, dtype=np.float64) for k in kernels]
    S, A = model.reward.shape
    if cells is None:
        cells = [(s, a) for s in range(S) for a in range(A)
                 if any(not np.array_equal(k[s, a], ks[0][s, a]) for k in ks[1:])]
    for choice in itertools.product(range(len(ks)), repeat=len(cells)):
        out = ks[0].copy()
        for (s, a), c in zip(cells, choice):
            out[s, a] = ks[c][s, a]
        yield out


def optimal_q(model: TabularDecPomdp, kernel: np.ndarray, tol: float = 1e-13, max_iter: int = 100_000) -> np.ndarray:
    """Optimal Q under a fixed kernel by plain value iteration (no shared solver code)."""
    q = np.zeros_like(model.reward)
    for _ in range(max_iter):
        nq = model.reward + model.gamma * kernel @ q.max(axis=1)
        if np.max(np.abs(nq - q)) <= tol:
            return nq
        q = nq
    raise RuntimeError("value iteration did not converge")


def brute_force_finite_robust(model: TabularDecPomdp, kernels, max_models: int = 100_000) -> np.ndarray:
    """Entrywise minimum of optimal Q over all stitched kernels of a finite set."""
    ks = [np.asarray(k, dtype=np.float64) for k in kernels]
    S, A = model.reward.shape
    cells = [(s, a) for s in range(S) for a in range(A)
             if any(not np.array_equal(k[s, a], ks[0][s, a]) for k in ks[1:])]
    if len(ks) ** len(cells) > max_models:
        raise ValueError(f"{len(ks) ** len(cells)} stitched models exceed the enumeration cap")
    best = None
    for k in stitched_kernels(model, ks, cells):
        q = optimal_q(model, k)
        best = q if best is None else np.minimum(best, q)
    return best


def sample_tv_member(nominal_row: np.ndarray, rho: float, rng: np.random.Generator,
                     max_tries: int = 10_000) -> np.ndarray:
    """Rejection-sample a distribution within TV radius ``rho`` of ``nominal_row``."""
    p = np.asarray(nominal_row, dtype=np.float64)
    for _ in range(max_tries):
        q = rng.dirichlet(np.ones(len(p)))
        lam = rng.random()
        cand = (1 - lam) * p + lam * q
        if 0.5 * np.abs(cand - p).sum() <= rho:
            return cand
    return p.copy()


def sample_contamination_member(nominal_row: np.ndarray, rho: float, rng: np.random.Generator) -> np.ndarray:
    p = np.asarray(nominal_row, dtype=np.float64)
    return (1.0 - rho) * p + rho * rng.dirichlet(np.ones(len(p)))
