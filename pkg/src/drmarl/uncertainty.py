"""Rectangular uncertainty sets and their worst-case responses.

Total variation is taken as half the L1 distance. The contamination and TV
closed forms assume a zero-valued fail state (``min(values) == 0``); pass
``general=True`` to keep the minimum-value terms for models without one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

MIN_VALUE_TOL = 1e-9
TERNARY_ITERS = 200


class AssumptionViolation(ValueError):
    """The vanishing-minimal-value precondition of the simplified operators failed."""


@dataclass(frozen=True)
class Contamination:
    rho: float

    def __post_init__(self) -> None:
        _check_rho(self.rho, allow_zero=True)

    def describe(self) -> str:
        return f"contamination(rho={self.rho})"


@dataclass(frozen=True)
class TotalVariation:
    rho: float

    def __post_init__(self) -> None:
        _check_rho(self.rho, allow_zero=True)

    def describe(self) -> str:
        return f"tv(rho={self.rho})"


@dataclass(frozen=True, eq=False)
class FiniteSet:
    """Rectangular hull of whole kernels: each (state, joint action) cell picks any of them."""

    kernels: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        if not self.kernels:
            raise ValueError("FiniteSet needs at least one kernel")
        ks = tuple(np.asarray(k, dtype=np.float64) for k in self.kernels)
        if any(k.shape != ks[0].shape for k in ks):
            raise ValueError("FiniteSet kernels must share a shape")
        object.__setattr__(self, "kernels", ks)

    def describe(self) -> str:
        return f"finite({len(self.kernels)} kernels)"


UncertaintySet = Union[Contamination, TotalVariation, FiniteSet]


def _check_rho(rho: float, allow_zero: bool = False) -> None:
    lo_ok = rho >= 0 if allow_zero else rho > 0
    if not (lo_ok and rho <= 1):
        raise ValueError(f"rho={rho} outside {'[0,1]' if allow_zero else '(0,1]'}")


def parse_set(text: str, kernels: Sequence[np.ndarray] = ()) -> UncertaintySet:
    """Parse ``contamination:0.2``, ``tv:0.1`` or ``finite`` (uses ``kernels``)."""
    name, _, arg = text.partition(":")
    name = name.strip().lower()
    if name in ("contamination", "rho", "contam"):
        return Contamination(float(arg))
    if name in ("tv", "total_variation"):
        return TotalVariation(float(arg))
    if name == "finite":
        return FiniteSet(tuple(kernels))
    raise ValueError(f"unknown uncertainty set {text!r}")


def tv_distance(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    return 0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum(axis=-1)


def eta_upper(rho: float, gamma: float) -> float:
    return 2.0 / (rho * (1.0 - gamma))


def _require_vanishing_min(values: np.ndarray) -> None:
    m = float(np.min(values))
    if abs(m) > MIN_VALUE_TOL:
        raise AssumptionViolation(
            f"min(values)={m:.3g} != 0: the simplified operator needs a zero-valued "
            "fail state (vanishing minimal value); use general=True")


# TV dual ---------------------------------------------------------------------


@dataclass(frozen=True)
class DualSolveResult:
    eta_star: float
    value: float
    iterations: int


def tv_dual_objective(eta, values, nominal, rho, general: bool = False):
    """g(eta) = E_nominal[(eta - values)_+] - (1 - rho) eta, vectorised over eta.

    With ``general`` the pre-simplification form
    E[(eta - v)_+] - eta + rho (eta - min v)_+ is used instead.
    """
    eta = np.asarray(eta, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    p = np.asarray(nominal, dtype=np.float64)
    hinge = np.maximum(eta[..., None] - v, 0.0) @ p
    if general:
        return hinge - eta + rho * np.maximum(eta - v.min(), 0.0)
    return hinge - (1.0 - rho) * eta


def tv_dual_minimize(values, nominal, rho: float, gamma: float,
                     general: bool = False, iterations: int = TERNARY_ITERS) -> DualSolveResult:
    """Minimise the convex TV dual objective over eta in [0, 2/(rho(1-gamma))] by ternary search."""
    _check_rho(rho)
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma={gamma} not in (0,1)")
    v = np.asarray(values, dtype=np.float64)
    lo, hi = 0.0, eta_upper(rho, gamma)
    if general:
        lo = min(lo, float(v.min()))

    def g(x: float) -> float:
        return float(tv_dual_objective(x, v, nominal, rho, general))

    for _ in range(iterations):
        m1 = lo + (hi - lo) / 3.0
        m2 = hi - (hi - lo) / 3.0
        if g(m1) <= g(m2):
            hi = m2
        else:
            lo = m1
    eta = 0.5 * (lo + hi)
    # the objective is piecewise linear; snap to the nearest kink if that is no worse
    kinks = v[(v >= lo - 1e-6) & (v <= hi + 1e-6)]
    best_eta, best = eta, g(eta)
    for k in kinks:
        gk = g(float(k))
        if gk <= best:
            best_eta, best = float(k), gk
    return DualSolveResult(eta_star=best_eta, value=best, iterations=iterations)


# worst-case responses ------------------------------------------------------------


def worst_case_expectation(values, nominal, uset: UncertaintySet, gamma: float = 0.9,
                           general: bool = False, candidates: Sequence[np.ndarray] | None = None) -> float:
    """Infimum of E_q[values] over the set's ball around ``nominal``.

    For FiniteSet the candidate rows must be given through ``candidates``.
    """
    v = np.asarray(values, dtype=np.float64)
    p = np.asarray(nominal, dtype=np.float64)
    if isinstance(uset, Contamination):
        base = (1.0 - uset.rho) * float(p @ v)
        if general:
            return base + uset.rho * float(v.min())
        if uset.rho > 0:
            _require_vanishing_min(v)
        return base
    if isinstance(uset, TotalVariation):
        if uset.rho == 0:
            return float(p @ v)
        if not general:
            _require_vanishing_min(v)
        return -tv_dual_minimize(v, p, uset.rho, gamma, general=general).value
    if isinstance(uset, FiniteSet):
        if candidates is None:
            raise ValueError("FiniteSet needs the candidate rows for this cell")
        return float(min(np.asarray(c) @ v for c in candidates))
    raise TypeError(f"unknown uncertainty set {uset!r}")


def _argmin_smallest(v: np.ndarray) -> int:
    return int(np.flatnonzero(v == v.min())[0])


def tv_worst_row(values: np.ndarray, nominal: np.ndarray, rho: float) -> np.ndarray:
    """Move up to ``rho`` mass from the highest-valued states onto the lowest one."""
    v = np.asarray(values, dtype=np.float64)
    q = np.array(nominal, dtype=np.float64)
    target = _argmin_smallest(v)
    budget = rho
    # stable sort on -v keeps smaller ids first among ties
    for j in np.argsort(-v, kind="stable"):
        if budget <= 0 or v[j] <= v[target]:
            break
        take = min(budget, q[j])
        q[j] -= take
        q[target] += take
        budget -= take
    return q


def worst_case_distribution(values, nominal, uset: UncertaintySet,
                            candidates: Sequence[np.ndarray] | None = None) -> np.ndarray:
    """A distribution in the set attaining the infimum of E_q[values]."""
    v = np.asarray(values, dtype=np.float64)
    p = np.asarray(nominal, dtype=np.float64)
    if isinstance(uset, Contamination):
        q = (1.0 - uset.rho) * p
        q[_argmin_smallest(v)] += uset.rho
        return q
    if isinstance(uset, TotalVariation):
        return tv_worst_row(v, p, uset.rho)
    if isinstance(uset, FiniteSet):
        if candidates is None:
            raise ValueError("FiniteSet needs the candidate rows for this cell")
        exps = [float(np.asarray(c) @ v) for c in candidates]
        return np.array(candidates[int(np.argmin(exps))], dtype=np.float64)
    raise TypeError(f"unknown uncertainty set {uset!r}")


# membership ------------------------------------------------------------------------


def in_contamination_ball(q, nominal, rho: float, tol: float = 1e-12) -> bool:
    """q = (1-rho) p + rho nu for some distribution nu."""
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(nominal, dtype=np.float64)
    if abs(q.sum() - 1.0) > tol or np.any(q < -tol):
        return False
    if rho == 0:
        return bool(np.max(np.abs(q - p)) <= tol)
    nu = (q - (1.0 - rho) * p) / rho
    return bool(np.all(nu >= -tol / rho))


def in_tv_ball(q, nominal, rho: float, tol: float = 1e-12) -> bool:
    q = np.asarray(q, dtype=np.float64)
    if abs(q.sum() - 1.0) > tol or np.any(q < -tol):
        return False
    return bool(tv_distance(q, nominal) <= rho + tol)


def contains(uset: UncertaintySet, q, nominal, candidates: Sequence[np.ndarray] | None = None,
             tol: float = 1e-12) -> bool:
    if isinstance(uset, Contamination):
        return in_contamination_ball(q, nominal, uset.rho, tol)
    if isinstance(uset, TotalVariation):
        return in_tv_ball(q, nominal, uset.rho, tol)
    if isinstance(uset, FiniteSet):
        if candidates is None:
            raise ValueError("FiniteSet needs the candidate rows for this cell")
        return any(np.max(np.abs(np.asarray(q) - c)) <= tol for c in candidates)
    raise TypeError(f"unknown uncertainty set {uset!r}")
