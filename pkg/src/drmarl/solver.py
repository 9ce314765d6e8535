"""Exact robust dynamic programming and IGM/DrIGM checkers on tabular models."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Hashable, Mapping, Optional, Sequence

import numpy as np

from .decpomdp import TabularDecPomdp, validate
from .uncertainty import (
    MIN_VALUE_TOL,
    AssumptionViolation,
    Contamination,
    FiniteSet,
    TotalVariation,
    UncertaintySet,
    contains,
)

TIE_TOL = 1e-9
EXACT_TOL = 1e-9


@dataclass
class JointQTable:
    values: np.ndarray                    # (n_states, n_joint_actions)
    gamma: float
    actions_per_agent: tuple[int, ...]
    provenance: str = "nominal"
    iterations: int = 0
    residual: float = 0.0

    def normalized(self) -> np.ndarray:
        """Values with the gamma/(1-gamma) factor divided out (golden-example convention)."""
        return self.values * (1.0 - self.gamma) / self.gamma

    def row(self, state: int) -> np.ndarray:
        return self.values[state].reshape(self.actions_per_agent)

    def state_values(self) -> np.ndarray:
        return self.values.max(axis=1)

    def greedy(self) -> np.ndarray:
        """Joint greedy action index per state; ties go to the smallest index."""
        v = self.values
        return np.argmax(v >= v.max(axis=1, keepdims=True) - TIE_TOL, axis=1)


@dataclass
class IndividualQTables:
    """Per-agent tables indexed by (state, own action)."""

    tables: list[np.ndarray]
    v_tot: Optional[np.ndarray] = None

    @property
    def actions_per_agent(self) -> tuple[int, ...]:
        return tuple(t.shape[1] for t in self.tables)

    def rows(self, state: int) -> list[np.ndarray]:
        return [t[state] for t in self.tables]

    def greedy(self, state: int) -> tuple[int, ...]:
        return tuple(int(np.argmax(r >= r.max() - TIE_TOL)) for r in self.rows(state))

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]], n_states: int = 1, state: int = 0) -> "IndividualQTables":
        tables = []
        for r in rows:
            t = np.zeros((n_states, len(r)))
            t[state] = r
            tables.append(t)
        return cls(tables)


# robust Bellman operator ------------------------------------------------------------


class _SparseRows:
    """Nonzero entries of a (S, A, S) kernel, flattened over (S, A) rows."""

    def __init__(self, kernel: np.ndarray):
        flat = kernel.reshape(-1, kernel.shape[-1])
        self.n_rows = flat.shape[0]
        self.shape = kernel.shape[:-1]
        self.rows, self.cols = np.nonzero(flat)
        self.data = flat[self.rows, self.cols]


_SPARSE_CACHE: dict[int, tuple[np.ndarray, _SparseRows]] = {}


def _sparse(kernel: np.ndarray) -> _SparseRows:
    hit = _SPARSE_CACHE.get(id(kernel))
    if hit is not None and hit[0] is kernel:
        return hit[1]
    sp = _SparseRows(kernel)
    if len(_SPARSE_CACHE) > 8:
        _SPARSE_CACHE.clear()
    _SPARSE_CACHE[id(kernel)] = (kernel, sp)
    return sp


def _tv_worst_expectation(kernel: np.ndarray, v: np.ndarray, rho: float) -> np.ndarray:
    """Per row: move up to rho mass from the highest-valued successors onto argmin v."""
    sp = _sparse(kernel)
    vc = v[sp.cols]
    order = np.lexsort((-vc, sp.rows))
    rows, ps, vs = sp.rows[order], sp.data[order], vc[order]
    cum = np.cumsum(ps)
    starts = np.searchsorted(rows, np.arange(sp.n_rows))
    offset = np.concatenate(([0.0], cum))[starts]
    before = cum - ps - offset[rows]
    removed = np.clip(rho - before, 0.0, ps)
    contrib = ps * vs - removed * (vs - v.min())
    return np.bincount(rows, weights=contrib, minlength=sp.n_rows).reshape(sp.shape)


def worst_case_backup(model: TabularDecPomdp, uset: UncertaintySet, v: np.ndarray,
                      general: bool = False) -> np.ndarray:
    """inf over the set of E[v(next)] for every (state, joint action) cell."""
    if isinstance(uset, FiniteSet):
        return np.min(np.stack([k @ v for k in uset.kernels]), axis=0)
    vmin = float(v.min())
    if not general and uset.rho > 0 and abs(vmin) > MIN_VALUE_TOL:
        raise AssumptionViolation(
            f"min state value {vmin:.3g} != 0 (vanishing minimal value); "
            "model needs a zero-valued fail state or general=True")
    if isinstance(uset, Contamination):
        out = (1.0 - uset.rho) * (model.kernel @ v)
        return out + uset.rho * vmin if general else out
    if isinstance(uset, TotalVariation):
        return _tv_worst_expectation(model.kernel, v, uset.rho)
    raise TypeError(f"unknown uncertainty set {uset!r}")


def bellman(model: TabularDecPomdp, uset: UncertaintySet, q: np.ndarray,
            general: bool = False) -> np.ndarray:
    return model.reward + model.gamma * worst_case_backup(model, uset, q.max(axis=1), general)


def robust_value_iteration(model: TabularDecPomdp, uset: UncertaintySet, tol: float = 1e-8,
                           general: bool = False, max_iter: int = 100_000,
                           q0: Optional[np.ndarray] = None) -> JointQTable:
    """Iterate the robust Bellman operator until the fixed point is ``tol``-accurate."""
    if not 0.0 < model.gamma < 1.0:
        raise ValueError(f"gamma={model.gamma} must lie in (0,1)")
    if tol <= 0:
        raise ValueError("tol must be positive")
    g = model.gamma
    stop = tol * (1.0 - g) / (2.0 * g)
    q = np.zeros_like(model.reward) if q0 is None else np.array(q0, dtype=np.float64)
    residual = np.inf
    for it in range(1, max_iter + 1):
        nq = bellman(model, uset, q, general)
        residual = float(np.max(np.abs(nq - q)))
        q = nq
        if residual <= stop:
            break
    else:
        raise RuntimeError(f"value iteration did not converge (residual {residual:.3g})")
    prov = "nominal" if isinstance(uset, FiniteSet) and len(uset.kernels) == 1 else f"robust({uset.describe()})"
    return JointQTable(q, g, model.actions_per_agent, prov, it, residual)


def solve_nominal(model: TabularDecPomdp, kernel: Optional[np.ndarray] = None, tol: float = 1e-8) -> JointQTable:
    k = model.kernel if kernel is None else kernel
    return robust_value_iteration(model, FiniteSet((k,)), tol=tol)


def extract_worst_model(q: JointQTable, model: TabularDecPomdp, uset: UncertaintySet) -> np.ndarray:
    """Stitch the per-cell minimizing rows into one kernel (valid by rectangularity)."""
    v = q.state_values()
    S, A = model.reward.shape
    if isinstance(uset, FiniteSet):
        exps = np.stack([k @ v for k in uset.kernels])           # (K, S, A)
        best = exps.min(axis=0)
        choice = np.argmax(exps <= best + 1e-12, axis=0)         # first model among ties
        out = np.empty_like(uset.kernels[0])
        for idx, k in enumerate(uset.kernels):
            mask = choice == idx
            out[mask] = k[mask]
        return out
    target = int(np.flatnonzero(v == v.min())[0])
    if isinstance(uset, Contamination):
        out = (1.0 - uset.rho) * model.kernel
        out[..., target] += uset.rho
        return out
    if isinstance(uset, TotalVariation):
        order = np.argsort(-v, kind="stable")
        out = model.kernel.copy()
        ps = out[..., order]
        before = np.cumsum(ps, axis=-1) - ps
        removed = np.clip(uset.rho - before, 0.0, ps)
        removed[..., v[order] <= v[target]] = 0.0
        out[..., order] -= removed
        out[..., target] += removed.sum(axis=-1)
        return out
    raise TypeError(f"unknown uncertainty set {uset!r}")


def in_set(uset: UncertaintySet, model: TabularDecPomdp, kernel: np.ndarray, tol: float = 1e-12) -> bool:
    """Cell-wise membership of a whole kernel in the rectangular set."""
    S, A = model.reward.shape
    for s in range(S):
        for k in range(A):
            cands = [kk[s, k] for kk in uset.kernels] if isinstance(uset, FiniteSet) else None
            if not contains(uset, kernel[s, k], model.kernel[s, k], cands, tol):
                return False
    return True


# IGM / DrIGM ----------------------------------------------------------------------------


@dataclass
class CheckResult:
    ok: bool
    witness: Optional[tuple[int, ...]] = None
    detail: str = ""
    extra: dict = field(default_factory=dict)

    def __bool__(self) -> bool:
        return self.ok


def _argmax_set(x: np.ndarray, tol: float = TIE_TOL) -> list[int]:
    return [int(i) for i in np.flatnonzero(x >= x.max() - tol)]


def check_igm(q_row: np.ndarray, individual_rows: Sequence[np.ndarray], tol: float = TIE_TOL) -> CheckResult:
    """Is the product of per-agent argmax sets inside the joint argmax set?

    ``q_row`` is the joint row at one history, shaped per agent or flat.
    """
    rows = [np.asarray(r, dtype=np.float64) for r in individual_rows]
    shape = tuple(len(r) for r in rows)
    q = np.asarray(q_row, dtype=np.float64).reshape(shape)
    qmax = q.max()
    for a in itertools.product(*(_argmax_set(r, tol) for r in rows)):
        if q[a] < qmax - tol:
            best = [tuple(int(x) for x in idx) for idx in np.argwhere(q >= qmax - tol)]
            return CheckResult(False, a, f"greedy {_one_based(a)} not in joint argmax "
                                         f"{[_one_based(b) for b in best]}")
    greedy = tuple(int(np.argmax(r >= r.max() - tol)) for r in rows)
    return CheckResult(True, greedy, f"greedy {_one_based(greedy)}")


def check_drigm(robust_q_row: np.ndarray, robust_rows: Sequence[np.ndarray], tol: float = TIE_TOL) -> CheckResult:
    """IGM checked against the robust joint table."""
    return check_igm(robust_q_row, robust_rows, tol)


def _one_based(a: Sequence[int]) -> tuple[int, ...]:
    return tuple(int(x) + 1 for x in a)


def check_igm_all(q: JointQTable, ind: IndividualQTables, tol: float = TIE_TOL,
                  states: Optional[Sequence[int]] = None) -> CheckResult:
    for s in (range(q.values.shape[0]) if states is None else states):
        res = check_igm(q.row(s), ind.rows(s), tol)
        if not res:
            res.extra["state"] = s
            res.detail = f"state {s}: {res.detail}"
            return res
    return CheckResult(True)


def igm_tables(q: JointQTable) -> IndividualQTables:
    """Some per-agent tables satisfying IGM for ``q`` at every state.

    Uses an exact additive fit when one exists, max-marginals when those satisfy
    IGM, and a greedy indicator otherwise.
    """
    S = q.values.shape[0]
    tables = [np.zeros((S, n)) for n in q.actions_per_agent]
    for s in range(S):
        row = q.row(s)
        fit = fit_vdn_decomposition(row)
        if fit is not None:
            rows = fit
        else:
            rows = [row.max(axis=tuple(j for j in range(row.ndim) if j != i)) for i in range(row.ndim)]
            if not check_igm(row, rows):
                g = np.unravel_index(int(q.greedy()[s]), q.actions_per_agent)
                rows = [np.eye(n)[g[i]] for i, n in enumerate(q.actions_per_agent)]
        for i, r in enumerate(rows):
            tables[i][s] = r
    return IndividualQTables(tables)


def naive_robust_individual(per_model: Mapping[Hashable, IndividualQTables]) -> IndividualQTables:
    """Elementwise infimum over models, the single-agent robustification."""
    models = list(per_model.values())
    return IndividualQTables([np.minimum.reduce([m.tables[i] for m in models])
                              for i in range(len(models[0].tables))])


class IGMPreconditionError(ValueError):
    pass


def finite_worst_selector(per_model_q: Mapping[Hashable, JointQTable]) -> Callable[[int, int], Hashable]:
    """P^worst(s, a): the first listed model attaining min_P Q^P(s, a)."""
    keys = list(per_model_q)

    def select(state: int, joint: int) -> Hashable:
        vals = np.array([per_model_q[k].values[state, joint] for k in keys])
        return keys[int(np.argmax(vals <= vals.min() + 1e-12))]
    return select


def build_robust_individual_q(per_model_individual: Mapping[Hashable, IndividualQTables],
                              worst_model_selector: Callable[[int, int], Hashable],
                              robust_joint_greedy: Sequence[int],
                              per_model_q: Optional[Mapping[Hashable, JointQTable]] = None,
                              states: Optional[Sequence[int]] = None) -> IndividualQTables:
    """Anchor each state's individual tables to the worst model at the robust greedy action.

    ``robust_joint_greedy[s]`` is the flat joint-action index of the robust greedy
    action at state ``s``.
    """
    first = next(iter(per_model_individual.values()))
    S = first.tables[0].shape[0]
    states = range(S) if states is None else states
    if per_model_q is not None:
        for key, tabs in per_model_individual.items():
            res = check_igm_all(per_model_q[key], tabs, states=states)
            if not res:
                raise IGMPreconditionError(f"model {key!r} violates IGM: {res.detail}")
    out = [t.copy() for t in first.tables]
    for s in states:
        key = worst_model_selector(s, int(robust_joint_greedy[s]))
        for i, t in enumerate(per_model_individual[key].tables):
            out[i][s] = t[s]
    return IndividualQTables(out)


# factorization structure ---------------------------------------------------------------


def fit_vdn_decomposition(q_row: np.ndarray, tol: float = EXACT_TOL) -> Optional[list[np.ndarray]]:
    """Least-squares additive fit; returns per-agent rows only if the fit is exact."""
    q = np.asarray(q_row, dtype=np.float64)
    shape = q.shape
    joint = list(itertools.product(*(range(n) for n in shape)))
    offsets = np.cumsum((0,) + shape[:-1])
    X = np.zeros((len(joint), sum(shape)))
    for r, a in enumerate(joint):
        X[r, offsets + np.array(a)] = 1.0
    y = np.array([q[a] for a in joint])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    if np.max(np.abs(X @ coef - y)) > tol:
        return None
    return [coef[o:o + n] for o, n in zip(offsets, shape)]


def qtran_v_tot(q_row: np.ndarray, individual_rows: Sequence[np.ndarray]) -> float:
    rows = [np.asarray(r) for r in individual_rows]
    greedy = tuple(int(np.argmax(r >= r.max() - TIE_TOL)) for r in rows)
    return float(np.max(q_row) - sum(r[g] for r, g in zip(rows, greedy)))


def check_factorization_conditions(kind: str, q_row: np.ndarray, individual_rows: Sequence[np.ndarray],
                                   v_tot: Optional[float] = None, tol: float = EXACT_TOL) -> CheckResult:
    rows = [np.asarray(r, dtype=np.float64) for r in individual_rows]
    shape = tuple(len(r) for r in rows)
    q = np.asarray(q_row, dtype=np.float64).reshape(shape)
    grids = np.meshgrid(*rows, indexing="ij")
    total = np.sum(grids, axis=0)
    kind = kind.lower()
    if kind == "vdn":
        resid = np.abs(total - q)
        worst = tuple(int(x) for x in np.unravel_index(int(np.argmax(resid)), shape))
        ok = bool(resid.max() <= tol)
        return CheckResult(ok, None if ok else worst,
                           f"max additivity residual {resid.max():.3g} at {_one_based(worst)}",
                           {"max_residual": float(resid.max())})
    if kind == "qmix":
        # a monotone mixer exists iff componentwise-dominating utility vectors never score lower
        joint = list(itertools.product(*(range(n) for n in shape)))
        util = {a: np.array([rows[i][a[i]] for i in range(len(rows))]) for a in joint}
        for a, b in itertools.permutations(joint, 2):
            if np.all(util[a] >= util[b]) and q[a] < q[b] - tol:
                return CheckResult(False, a, f"{_one_based(a)} dominates {_one_based(b)} "
                                             f"but Q_tot drops by {q[b] - q[a]:.3g}")
        return CheckResult(True, None, "monotone")
    if kind == "qtran":
        if v_tot is None:
            v_tot = qtran_v_tot(q, rows)
        slack = total - q + v_tot
        greedy = tuple(int(np.argmax(r >= r.max() - TIE_TOL)) for r in rows)
        if abs(slack[greedy]) > tol:
            return CheckResult(False, greedy, f"slack {slack[greedy]:.3g} at greedy {_one_based(greedy)}")
        mask = slack < -tol
        if mask.any():
            bad = tuple(int(x) for x in np.argwhere(mask)[0])
            return CheckResult(False, bad, f"negative slack {slack[bad]:.3g} at {_one_based(bad)}")
        return CheckResult(True, greedy, "qtran conditions hold", {"v_tot": v_tot})
    raise ValueError(f"unknown factorization kind {kind!r}")


# out-of-sample lower bound -------------------------------------------------------------


def lower_bound_check(robust_q: JointQTable, model: TabularDecPomdp, uset: UncertaintySet,
                      test_kernel: np.ndarray, tol: float = 1e-9,
                      solve_tol: float = 1e-11) -> CheckResult:
    """Check Q^P(s,a) <= Q^{P_test}(s,a) for a test kernel inside the set."""
    if not in_set(uset, model, test_kernel):
        raise ValueError("test kernel is not a member of the uncertainty set")
    q_test = solve_nominal(model, test_kernel, tol=solve_tol)
    gap = robust_q.values - q_test.values
    viol = float(gap.max())
    s, k = np.unravel_index(int(np.argmax(gap)), gap.shape)
    return CheckResult(viol <= tol, (int(s), int(k)) if viol > tol else None,
                       f"max violation {viol:.3g}", {"max_violation": viol})


def model_checks(model: TabularDecPomdp) -> None:
    err = validate(model)
    if err is not None:
        raise ValueError(str(err))


def evaluate_policy(model: TabularDecPomdp, policy: Sequence[int], kernel: Optional[np.ndarray] = None,
                    horizon: Optional[int] = None, init: Optional[np.ndarray] = None) -> np.ndarray:
    """State values of a deterministic joint policy (flat joint index per state).

    With ``horizon`` the finite-horizon return is computed by backward induction;
    ``init`` then collapses the result to the expected return from that distribution.
    """
    k = model.kernel if kernel is None else kernel
    S = model.n_states
    idx = np.asarray(policy, dtype=np.int64)
    P = k[np.arange(S), idx]
    r = model.reward[np.arange(S), idx]
    if horizon is None:
        v = np.linalg.solve(np.eye(S) - model.gamma * P, r)
    else:
        v = np.zeros(S)
        for _ in range(horizon):
            v = r + model.gamma * P @ v
    return v if init is None else float(np.asarray(init) @ v)
