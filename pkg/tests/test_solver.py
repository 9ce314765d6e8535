import numpy as np
import pytest
from hypothesis import given, strategies as st

from drmarl import envs, oracles, solver
from drmarl.uncertainty import AssumptionViolation, Contamination, FiniteSet, TotalVariation

B1_GOLDEN = {"P1": (0.7, 0.4, 1.0, 0.7), "P2": (0.7, 0.8, 0.6, 0.7), "robust": (0.7, 0.4, 0.6, 0.7)}


@pytest.fixture(scope="module")
def b1():
    p1, p2 = envs.example_b1("P1"), envs.example_b1("P2")
    uset = FiniteSet((p1.kernel, p2.kernel))
    return p1, p2, uset, solver.robust_value_iteration(p1, uset, tol=1e-12)


def lp_robust_q(model, uset, tol=1e-11):
    """Robust value iteration with every inner infimum solved by a generic LP."""
    q = np.zeros_like(model.reward)
    S, A = q.shape
    while True:
        v = q.max(axis=1)
        nq = np.array([[model.reward[s, a] + model.gamma * oracles.lp_worst_expectation(v, model.kernel[s, a], uset)
                        for a in range(A)] for s in range(S)])
        if np.max(np.abs(nq - q)) < tol:
            return nq
        q = nq


# golden examples -------------------------------------------------------------------------


@pytest.mark.parametrize("key", ["P1", "P2"])
def test_b1_nominal_goldens(key):
    # [PAPER] normalized tables at s0
    q = solver.solve_nominal(envs.example_b1(key), tol=1e-12)
    assert np.max(np.abs(q.normalized()[0] - B1_GOLDEN[key])) <= 1e-9


def test_b1_robust_golden(b1):
    _, _, _, qr = b1
    assert np.max(np.abs(qr.normalized()[0] - B1_GOLDEN["robust"])) <= 1e-9


def test_b1_robust_equals_brute_force_enumeration(b1):
    # [DERIVED] entrywise min over all 2^k stitched kernels
    p1, p2, _, qr = b1
    brute = oracles.brute_force_finite_robust(p1, [p1.kernel, p2.kernel])
    assert np.max(np.abs(brute - qr.values)) <= 1e-9


def test_b1_naive_robustification_violates_drigm(b1):
    p1, p2, _, qr = b1
    ind = {k: solver.igm_tables(solver.solve_nominal(m, tol=1e-12)) for k, m in (("P1", p1), ("P2", p2))}
    naive = solver.naive_robust_individual(ind)
    assert naive.greedy(0) == (1, 0)                 # (2,1) in 1-based ids
    res = solver.check_drigm(qr.values[0], naive.rows(0))
    assert not res.ok and res.witness == (1, 0)
    assert "(2, 1)" in res.detail


@pytest.mark.parametrize("tables, greedy", [(([0.2, 0.1], [0.7, 0.4]), (0, 0)),
                                            (([0.0, 0.3], [0.5, 0.6]), (1, 1))])
def test_b1_robust_tables_satisfy_drigm(b1, tables, greedy):
    res = solver.check_drigm(b1[3].values[0], [np.array(t) for t in tables])
    assert res.ok and res.witness == greedy


def test_b1_worst_model_per_cell(b1):
    p1, p2, uset, qr = b1
    worst = solver.extract_worst_model(qr, p1, uset)
    assert np.allclose(worst[0, p1.joint_index((1, 0))], p2.kernel[0, p1.joint_index((1, 0))])
    assert np.allclose(worst[0, p1.joint_index((1, 1))], p1.kernel[0, p1.joint_index((1, 1))])
    assert solver.in_set(uset, p1, worst)


def test_b2_decomposition():
    rows = {v: solver.solve_nominal(envs.example_b2(v), tol=1e-12).normalized()[0].reshape(2, 2)
            for v in ("P1", "P2")}
    assert solver.fit_vdn_decomposition(rows["P1"]) is None
    fit = solver.fit_vdn_decomposition(rows["P2"])
    assert fit is not None
    assert np.allclose(fit[0][:, None] + fit[1][None], rows["P2"], atol=1e-9)


def test_b1_simplified_tv_requires_fail_state():
    with pytest.raises(AssumptionViolation):
        solver.robust_value_iteration(envs.example_b1(), TotalVariation(0.1))
    q = solver.robust_value_iteration(envs.example_b1(), TotalVariation(0.1), general=True)
    assert np.all(q.values <= solver.solve_nominal(envs.example_b1()).values + 1e-9)


# robust dynamic programming against independent oracles ----------------------------------------


@pytest.mark.parametrize("uset", [TotalVariation(0.2), Contamination(0.3)])
def test_robust_vi_matches_lp_value_iteration(uset):
    model = envs.random_decpomdp(5, n_states=3, n_agents=1, actions=2, gamma=0.7)
    q = solver.robust_value_iteration(model, uset, tol=1e-11)
    assert np.max(np.abs(q.values - lp_robust_q(model, uset))) <= 1e-9


def test_robust_vi_matches_lp_in_general_form():
    model = envs.random_decpomdp(6, n_states=3, n_agents=1, actions=2, gamma=0.7, fail_state=False)
    for uset in (TotalVariation(0.2), Contamination(0.3)):
        q = solver.robust_value_iteration(model, uset, tol=1e-11, general=True)
        assert np.max(np.abs(q.values - lp_robust_q(model, uset))) <= 1e-9


def test_nominal_matches_plain_value_iteration():
    model = envs.random_decpomdp(2, n_states=6)
    q = solver.solve_nominal(model, tol=1e-12)
    assert np.max(np.abs(q.values - oracles.optimal_q(model, model.kernel))) <= 1e-10


def test_stopping_rule_accuracy():
    model = envs.random_decpomdp(3, n_states=6, gamma=0.95)
    coarse = solver.solve_nominal(model, tol=1e-4)
    assert np.max(np.abs(coarse.values - oracles.optimal_q(model, model.kernel))) <= 1e-4


@given(st.integers(0, 10_000), st.sampled_from(["tv", "contamination", "finite"]))
def test_bellman_is_gamma_contraction(seed, kind):
    r = np.random.default_rng(seed)
    model = envs.random_decpomdp(seed, n_states=5)
    uset = {"tv": TotalVariation(0.25), "contamination": Contamination(0.25),
            "finite": FiniteSet((model.kernel, envs.random_decpomdp(seed + 1, n_states=5).kernel))}[kind]
    q1, q2 = r.uniform(-3, 3, (2,) + model.reward.shape)
    lhs = np.max(np.abs(solver.bellman(model, uset, q1, True) - solver.bellman(model, uset, q2, True)))
    assert lhs <= model.gamma * np.max(np.abs(q1 - q2)) + 1e-9


@given(st.integers(0, 10_000), st.floats(0.0, 0.45), st.floats(0.0, 0.05))
def test_robust_values_order_and_monotone_in_rho(seed, rho, d):
    model = envs.random_decpomdp(seed, n_states=5)
    nominal = solver.solve_nominal(model, tol=1e-11).values
    lo = solver.robust_value_iteration(model, TotalVariation(rho + d + 1e-3), tol=1e-11).values
    hi = solver.robust_value_iteration(model, TotalVariation(rho + 1e-3), tol=1e-11).values
    assert np.all(hi <= nominal + 1e-9)
    assert np.all(lo <= hi + 1e-9)


@given(st.integers(0, 10_000), st.sampled_from(["tv", "contamination"]))
def test_lower_bound_on_sampled_members(seed, kind):
    from drmarl.verify import sample_member_kernel
    model = envs.random_decpomdp(seed, n_states=4)
    uset = TotalVariation(0.2) if kind == "tv" else Contamination(0.2)
    robust = solver.robust_value_iteration(model, uset, tol=1e-11)
    member = sample_member_kernel(model, uset, np.random.default_rng(seed))
    assert solver.lower_bound_check(robust, model, uset, member).ok


@pytest.mark.parametrize("uset", [TotalVariation(0.3), Contamination(0.3)])
def test_worst_model_attains_bound(uset):
    model = envs.random_decpomdp(11, n_states=5)
    robust = solver.robust_value_iteration(model, uset, tol=1e-12)
    worst = solver.extract_worst_model(robust, model, uset)
    assert solver.in_set(uset, model, worst)
    q_worst = solver.solve_nominal(model, worst, tol=1e-12)
    assert np.max(np.abs(q_worst.values - robust.values)) <= 1e-8


def test_lower_bound_rejects_non_member():
    model = envs.random_decpomdp(1, n_states=4)
    robust = solver.robust_value_iteration(model, TotalVariation(0.01))
    far = envs.random_decpomdp(99, n_states=4).kernel
    with pytest.raises(ValueError, match="not a member"):
        solver.lower_bound_check(robust, model, TotalVariation(0.01), far)


# IGM checks and factorization structure ---------------------------------------------------------


def test_check_igm_ties():
    q = np.array([[1.0, 1.0], [0.0, 0.0]])
    assert solver.check_igm(q, [np.array([1.0, 0.0]), np.array([0.5, 0.5])]).ok
    res = solver.check_igm(np.array([[1.0, 0.0], [0.0, 0.0]]), [np.array([1.0, 0.0]), np.array([0.5, 0.5])])
    assert not res.ok and res.witness == (0, 1)


@given(st.integers(0, 10_000))
def test_igm_tables_satisfy_igm(seed):
    model = envs.random_decpomdp(seed, n_states=4, actions=(2, 3))
    q = solver.solve_nominal(model)
    assert solver.check_igm_all(q, solver.igm_tables(q)).ok


@given(st.lists(st.floats(-5, 5), min_size=2, max_size=4), st.lists(st.floats(-5, 5), min_size=2, max_size=4))
def test_vdn_fit_recovers_additive_rows(a, b):
    a, b = np.array(a), np.array(b)
    q = a[:, None] + b[None]
    fit = solver.fit_vdn_decomposition(q)
    assert fit is not None and np.allclose(fit[0][:, None] + fit[1][None], q, atol=1e-9)
    assert solver.check_factorization_conditions("vdn", q, fit).ok
    assert solver.check_factorization_conditions("qtran", q, fit).ok


def test_factorization_conditions_negative_cases():
    q = np.array([[1.0, 0.0], [0.0, 2.0]])
    rows = [np.array([1.0, 0.0]), np.array([1.0, 0.0])]
    assert not solver.check_factorization_conditions("vdn", q, rows).ok
    # (1,1) dominates every other utility vector but is not the best joint action
    assert not solver.check_factorization_conditions("qmix", q, rows).ok
    assert solver.check_factorization_conditions("qmix", np.array([[0.0, 1.0], [1.0, 3.0]]),
                                                 [np.array([0.0, 1.0]), np.array([0.0, 1.0])]).ok
    assert not solver.check_factorization_conditions("qtran", q, rows).ok
    with pytest.raises(ValueError):
        solver.check_factorization_conditions("mixture", q, rows)


def test_build_robust_individual_q_anchors_to_worst_model(b1):
    p1, p2, _, qr = b1
    per_q = {"P1": solver.solve_nominal(p1, tol=1e-12), "P2": solver.solve_nominal(p2, tol=1e-12)}
    ind = {k: solver.igm_tables(q) for k, q in per_q.items()}
    sel = solver.finite_worst_selector(per_q)
    out = solver.build_robust_individual_q(ind, sel, qr.greedy(), per_model_q=per_q)
    key = sel(0, int(qr.greedy()[0]))
    assert [list(r) for r in out.rows(0)] == [list(r) for r in ind[key].rows(0)]


def test_build_robust_individual_q_checks_precondition(b1):
    p1, p2, _, qr = b1
    per_q = {"P1": solver.solve_nominal(p1, tol=1e-12), "P2": solver.solve_nominal(p2, tol=1e-12)}
    bad = solver.IndividualQTables.from_rows([[0.0, 1.0], [0.0, 1.0]], n_states=5)
    ind = {"P1": bad, "P2": solver.igm_tables(per_q["P2"])}
    with pytest.raises(solver.IGMPreconditionError):
        solver.build_robust_individual_q(ind, solver.finite_worst_selector(per_q), qr.greedy(), per_model_q=per_q)


def test_evaluate_policy_of_greedy_equals_optimal_values():
    model = envs.random_decpomdp(4, n_states=6)
    q = solver.solve_nominal(model, tol=1e-12)
    v = solver.evaluate_policy(model, q.greedy())
    assert np.allclose(v, q.values.max(axis=1), atol=1e-9)
    # [TRIVIAL] one-step horizon is the immediate reward
    init = np.eye(model.n_states)[0]
    assert solver.evaluate_policy(model, q.greedy(), horizon=1, init=init) == pytest.approx(
        model.reward[0, q.greedy()[0]])


def test_greedy_ties_break_lexicographically():
    q = solver.JointQTable(np.array([[1.0, 1.0 + 1e-12, 0.5, 1.0]]), 0.9, (2, 2), "test", 1, 0.0)
    assert int(q.greedy()[0]) == 0
