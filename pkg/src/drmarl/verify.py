"""Self-check suites behind ``drmarl verify``: golden examples, operator properties,
dual-vs-LP agreement, gradient checks and the out-of-sample lower bound."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import envs, oracles, solver
from .autodiff import ParamStore, Tensor, grad_check
from .factorization import (AgentNets, AgentNetSpec, DualNet, QMixer, QTranHeads, VDNMixer, dual_loss,
                            qtran_losses, robust_td_target_contamination, robust_td_target_tv, td_loss)
from .uncertainty import Contamination, FiniteSet, TotalVariation, tv_dual_minimize


@dataclass
class CheckRow:
    suite: str
    module: str
    check: str
    passed: bool
    detail: str = ""


def _row(suite, module, check, ok, detail="") -> CheckRow:
    return CheckRow(suite, module, check, bool(ok), detail)


# golden examples --------------------------------------------------------------------------------------------


B1_GOLDEN = {"P1": (0.7, 0.4, 1.0, 0.7), "P2": (0.7, 0.8, 0.6, 0.7), "robust": (0.7, 0.4, 0.6, 0.7)}


def example_b1_tables():
    p1, p2 = envs.example_b1("P1"), envs.example_b1("P2")
    q1, q2 = solver.solve_nominal(p1, tol=1e-12), solver.solve_nominal(p2, tol=1e-12)
    qr = solver.robust_value_iteration(p1, FiniteSet((p1.kernel, p2.kernel)), tol=1e-12)
    return p1, p2, q1, q2, qr


def suite_example_b1() -> list[CheckRow]:
    S, M = "example_b1", "exact-solver"
    p1, p2, q1, q2, qr = example_b1_tables()
    rows = []
    for key, q in (("P1", q1), ("P2", q2), ("robust", qr)):
        got = q.normalized()[0]
        err = float(np.max(np.abs(got - B1_GOLDEN[key])))
        rows.append(_row(S, M, f"normalized Q_{key}(s0)", err <= 1e-9, f"{np.round(got, 12).tolist()} err {err:.2e}"))
    ind = {"P1": solver.igm_tables(q1), "P2": solver.igm_tables(q2)}
    naive = solver.naive_robust_individual(ind)
    res = solver.check_drigm(qr.values[0], naive.rows(0))
    rows.append(_row(S, M, "naive robustification greedy (2,1)", naive.greedy(0) == (1, 0), f"greedy {naive.greedy(0)}"))
    rows.append(_row(S, M, "naive robustification fails DrIGM", not res.ok, res.detail))
    for tables, expect in ((([0.2, 0.1], [0.7, 0.4]), (0, 0)), (([0.0, 0.3], [0.5, 0.6]), (1, 1))):
        r = solver.check_drigm(qr.values[0], [np.array(t) for t in tables])
        rows.append(_row(S, M, f"robust tables {tables} satisfy DrIGM", r.ok and r.witness == expect, r.detail))
    worst = solver.extract_worst_model(qr, p1, FiniteSet((p1.kernel, p2.kernel)))
    k21 = p1.joint_index((1, 0))
    rows.append(_row(S, M, "worst model at (s0,(2,1)) is P2", np.allclose(worst[0, k21], p2.kernel[0, k21]), ""))
    return rows


def suite_example_b2() -> list[CheckRow]:
    S, M = "example_b2", "exact-solver"
    rows = []
    for variant, expect in (("P1", False), ("P2", True)):
        q = solver.solve_nominal(envs.example_b2(variant), tol=1e-12)
        fit = solver.fit_vdn_decomposition(q.normalized()[0].reshape(2, 2))
        rows.append(_row(S, M, f"{variant} additive decomposition {'exists' if expect else 'absent'}",
                         (fit is not None) == expect, f"normalized row {np.round(q.normalized()[0], 12).tolist()}"))
    return rows


# operator properties --------------------------------------------------------------------------------------


def operator_sets(model, rng) -> list:
    other = envs.random_decpomdp(int(rng.integers(1 << 30)), model.n_states, model.n_agents,
                                 model.actions_per_agent[0], model.gamma)
    return [Contamination(0.2), TotalVariation(0.15), FiniteSet((model.kernel, other.kernel))]


def suite_contraction(pairs: int = 100, seed: int = 0) -> list[CheckRow]:
    S, M = "contraction", "exact-solver"
    rng = np.random.default_rng(seed)
    model = envs.random_decpomdp(seed, n_states=6)
    rows = []
    for uset in operator_sets(model, rng):
        worst = -np.inf
        for _ in range(pairs):
            q, q2 = rng.uniform(-5, 5, size=(2,) + model.reward.shape)
            lhs = np.max(np.abs(solver.bellman(model, uset, q, general=True) - solver.bellman(model, uset, q2, general=True)))
            worst = max(worst, lhs - model.gamma * np.max(np.abs(q - q2)))
        rows.append(_row(S, M, f"gamma-contraction {uset.describe()}", worst <= 1e-9, f"max excess {worst:.2e}"))
    nominal = solver.solve_nominal(model, tol=1e-11).values
    for make in (Contamination, TotalVariation):
        prev, worst_order, worst_step = nominal, -np.inf, -np.inf
        for rho in np.round(np.arange(0.0, 0.501, 0.05), 10):
            q = solver.robust_value_iteration(model, make(float(rho)), tol=1e-11).values
            worst_order = max(worst_order, float(np.max(q - nominal)))
            worst_step = max(worst_step, float(np.max(q - prev)))
            prev = q
        name = make.__name__
        rows.append(_row(S, M, f"{name} robust <= nominal on rho grid", worst_order <= 1e-9,
                         f"max excess {worst_order:.2e}"))
        rows.append(_row(S, M, f"{name} robust values nonincreasing in rho", worst_step <= 1e-9,
                         f"max increase {worst_step:.2e}"))
    return rows


# TV dual vs LP ------------------------------------------------------------------------------------------------


def suite_dual_lp(instances: int = 200, seed: int = 0, minimize=tv_dual_minimize) -> list[CheckRow]:
    S, M = "dual_lp", "uncertainty"
    rng = np.random.default_rng(seed)
    worst, where = 0.0, None
    for k in range(instances):
        n = int(rng.integers(2, 7))
        gamma = float(rng.uniform(0.5, 0.99))
        v = rng.uniform(0, 1.0 / (1.0 - gamma), n)   # values of rewards in [0, 1]
        v[rng.integers(n)] = 0.0                     # zero-valued fail state
        p = rng.dirichlet(np.ones(n))
        rho = float(rng.uniform(0.01, 1.0))
        dual = -minimize(v, p, rho, gamma).value
        lp = oracles.lp_worst_expectation(v, p, TotalVariation(rho))
        err = abs(dual - lp)
        if err > worst:
            worst, where = err, k
    return [_row(S, M, f"TV dual equals LP on {instances} instances", worst <= 1e-6,
                 f"max |dual - LP| {worst:.2e} (instance {where})")]


# gradient checks -------------------------------------------------------------------------------------------


LOSS_CASES = ("td_contamination", "td_tv", "dual", "qtran_opt", "qtran_nopt", "qmix")


def loss_case(name: str, rng: np.random.Generator) -> tuple[ParamStore, Callable[[], Tensor]]:
    """A small randomly initialised network plus a closure evaluating one training loss."""
    B, n_in, hidden, acts, sdim = 4, 2, 3, (3, 2), 2
    store = ParamStore()
    agents = AgentNets(store, AgentNetSpec((n_in, n_in), acts, hidden), rng)
    X = [rng.normal(size=(B, n_in)) for _ in acts]
    A = np.stack([rng.integers(0, n, B) for n in acts], axis=1)
    state = rng.normal(size=(B, sdim))
    r = rng.normal(size=B)
    q_next = rng.normal(size=B)
    gamma, rho = 0.9, float(rng.uniform(0.05, 0.5))

    def chosen():
        _, qs = agents.forward(store, X)
        return [q.gather(A[:, i]) for i, q in enumerate(qs)]

    if name in ("td_contamination", "td_tv"):
        if name == "td_contamination":
            y = robust_td_target_contamination(r, gamma, rho, q_next)
        else:
            y = robust_td_target_tv(r, gamma, rho, rng.uniform(0, 3, B), q_next)
        return store, lambda: td_loss(VDNMixer()(store, chosen()), y)
    if name == "qmix":
        mixer = QMixer(store, len(acts), sdim, rng, embed=3, hyper_hidden=3)
        y = robust_td_target_contamination(r, gamma, rho, q_next)
        return store, lambda: td_loss(mixer(store, chosen(), state), y)
    if name == "dual":
        dstore = ParamStore()
        dual = DualNet(dstore, sdim, acts, rho, gamma, rng, hidden=3)
        dstore["dual.out.b"].data[:] = rng.normal(size=1)      # move off the flat initial region
        q = rng.uniform(0, 3, B)
        return dstore, lambda: dual_loss(dual(dstore, state, A), q, rho)
    if name in ("qtran_opt", "qtran_nopt"):
        heads = QTranHeads(store, len(acts), hidden, acts, rng, width=3)
        # the joint value enters detached and the greedy action is piecewise constant,
        # so both are frozen at the draw point for finite differencing
        hid0, qs0 = agents.forward(store, X)
        bar = np.stack([np.argmax(q.data, axis=1) for q in qs0], axis=1)
        acts_used = bar if name == "qtran_opt" else A
        joint = heads.joint(store, hid0, acts_used).data.copy()
        flag = np.ones(B) if name == "qtran_opt" else np.zeros(B)
        shift = 0.0 if name == "qtran_opt" else 0.5   # make some slacks negative so L_nopt is active

        def loss():
            hid, qs = agents.forward(store, X)
            s = sum(q.gather(acts_used[:, i]) for i, q in enumerate(qs))
            pair = qtran_losses(s, joint, heads.value(store, hid) - shift, flag)
            return pair[0] if name == "qtran_opt" else pair[1]
        return store, loss
    raise ValueError(f"unknown loss case {name!r}")


def check_loss_gradient(name: str, rng: np.random.Generator, tol: float = 1e-4,
                        kink_margin: float = 2e-4, max_redraws: int = 50):
    """Grad-check one freshly drawn case, redrawing inputs that sit too close to a kink."""
    for _ in range(max_redraws):
        store, fn = loss_case(name, rng)
        report = grad_check(fn, store, h=1e-5, tol=tol)
        if report.kink_distance >= kink_margin:
            return report
    raise RuntimeError(f"{name}: could not draw inputs away from kinks")


def suite_gradcheck(draws: int = 5, seed: int = 0, cases: Sequence[str] = LOSS_CASES) -> list[CheckRow]:
    S, M = "gradcheck", "factorization"
    rng = np.random.default_rng(seed)
    rows = []
    for name in cases:
        worst, wname = 0.0, ""
        for _ in range(draws):
            rep = check_loss_gradient(name, rng)
            n, e = rep.worst
            if e > worst or not wname:
                worst, wname = e, n
        rows.append(_row(S, M, f"{name} gradient", worst <= 1e-4, f"max rel err {worst:.2e} ({wname})"))
    return rows


# lower bound ------------------------------------------------------------------------------------------------


def sample_member_kernel(model, uset, rng) -> np.ndarray:
    """A kernel inside the set, drawn row by row; the fail row stays absorbing."""
    out = model.kernel.copy()
    S, A = model.reward.shape
    for s in range(S):
        if s == model.fail_state:
            continue
        for a in range(A):
            if isinstance(uset, TotalVariation):
                out[s, a] = oracles.sample_tv_member(model.kernel[s, a], uset.rho, rng)
            else:
                out[s, a] = oracles.sample_contamination_member(model.kernel[s, a], uset.rho, rng)
    return out


def suite_lower_bound(members: int = 20, seed: int = 0) -> list[CheckRow]:
    S, M = "lower_bound", "exact-solver"
    rng = np.random.default_rng(seed)
    model = envs.random_decpomdp(seed + 1, n_states=5)
    rows = []
    for uset in (Contamination(0.2), TotalVariation(0.2)):
        robust = solver.robust_value_iteration(model, uset, tol=1e-11)
        worst = -np.inf
        for _ in range(members):
            res = solver.lower_bound_check(robust, model, uset, sample_member_kernel(model, uset, rng))
            worst = max(worst, res.extra["max_violation"])
        rows.append(_row(S, M, f"lower bound over {members} members of {uset.describe()}", worst <= 1e-9,
                         f"max violation {worst:.2e}"))
        wk = solver.extract_worst_model(robust, model, uset)
        res = solver.lower_bound_check(robust, model, uset, wk)
        tight = abs(res.extra["max_violation"]) <= 1e-8
        rows.append(_row(S, M, f"worst model attains the bound for {uset.describe()}", res.ok and tight,
                         res.detail))
    return rows


SUITES: dict[str, Callable[[], list[CheckRow]]] = {
    "example_b1": suite_example_b1,
    "example_b2": suite_example_b2,
    "contraction": suite_contraction,
    "dual_lp": suite_dual_lp,
    "gradcheck": suite_gradcheck,
    "lower_bound": suite_lower_bound,
}


def run_suites(filter_: Optional[str] = None) -> list[CheckRow]:
    rows = []
    for name, fn in SUITES.items():
        if filter_ and filter_ not in name:
            continue
        t = time.perf_counter()
        try:
            got = fn()
        except Exception as exc:   # a crash is a failure of that suite, not of the runner
            got = [_row(name, "harness", "suite raised", False, f"{type(exc).__name__}: {exc}")]
        for r in got:
            r.detail = f"{r.detail} [{time.perf_counter() - t:.2f}s]".strip()
        rows.extend(got)
    return rows


def write_report(rows: Sequence[CheckRow], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["suite", "module", "check", "passed", "detail"])
        for r in rows:
            w.writerow([r.suite, r.module, r.check, r.passed, r.detail])
    return path
