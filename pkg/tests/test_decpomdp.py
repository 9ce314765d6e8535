import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from drmarl import envs
from drmarl.decpomdp import History, ModelError, NotInImageError, TabularDecPomdp, Transition, validate


def small_model(**kw):
    return envs.random_decpomdp(3, n_states=4, actions=(2, 3), **kw)


@given(st.lists(st.integers(1, 4), min_size=1, max_size=3).flatmap(
    lambda acts: st.tuples(st.just(tuple(acts)), st.tuples(*(st.integers(0, n - 1) for n in acts)))))
def test_joint_index_roundtrip_row_major(case):
    acts, joint = case
    m = envs.random_decpomdp(0, n_states=3, n_agents=len(acts), actions=acts)
    k = m.joint_index(joint)
    assert m.joint_action(k) == joint
    # row-major: the last agent is the fastest-moving index
    expect = 0
    for a, n in zip(joint, acts):
        expect = expect * n + a
    assert k == expect


def test_joint_index_rejects_bad_actions():
    m = small_model()
    with pytest.raises(ModelError, match="invalid action"):
        m.joint_index((0, 3))
    with pytest.raises(ModelError, match="wrong length"):
        m.joint_index((0,))
    with pytest.raises(ModelError):
        m.joint_action(m.n_joint_actions)


def test_valid_model_passes():
    assert validate(small_model()) is None
    assert validate(envs.example_b1("P2")) is None
    assert validate(envs.coop_grid()) is None


def test_validate_reports_first_bad_row_in_order():
    m = small_model()
    k = m.kernel.copy()
    k[2, 1, 0] += 0.5          # later cell
    k[1, 4, 1] = -0.1          # earlier cell, negative entry
    v = validate(m.with_kernel(k))
    assert v is not None and v.invariant == "stochastic kernel"
    assert v.location == "row (s1,(2, 2))"
    assert "negative" in v.message
    k = m.kernel.copy()
    k[2, 1, 0] += 0.5
    v = validate(m.with_kernel(k))
    assert v.location == "row (s2,(1, 2))" and v.message == "row sums to 1.5"


def test_validate_catches_other_invariants():
    m = small_model()
    bad = TabularDecPomdp(m.kernel, m.reward, m.actions_per_agent, (np.zeros(4, int), np.zeros(4, int)), 0.9)
    assert validate(bad).invariant == "injective observation"
    r = m.reward.copy()
    r[m.fail_state, 0] = 1.0
    assert validate(TabularDecPomdp(m.kernel, r, m.actions_per_agent, m.obs_map, 0.9, m.fail_state)).invariant == "fail state"
    assert validate(TabularDecPomdp(m.kernel, m.reward, m.actions_per_agent, m.obs_map, 1.0)).invariant == "discount"
    r = m.reward.copy()
    r[0, 0] = np.nan
    assert validate(TabularDecPomdp(m.kernel, r, m.actions_per_agent, m.obs_map, 0.9)).invariant == "bounded reward"


def test_observe_and_decode():
    m = small_model()
    for s in range(m.n_states):
        assert m.decode(m.observe(s)) == s
    with pytest.raises(NotInImageError):
        m.decode((99, 99))
    with pytest.raises(ModelError):
        m.observe(m.n_states)


def test_step_samples_kernel_rows():
    m = small_model()
    rng = np.random.default_rng(0)
    n = 20000
    counts = np.zeros(m.n_states)
    for _ in range(n):
        s2, r = m.step(0, (1, 2), rng)
        counts[s2] += 1
    p = m.kernel[0, m.joint_index((1, 2))]
    assert r == m.reward[0, m.joint_index((1, 2))]
    # five binomial standard errors
    assert np.all(np.abs(counts / n - p) <= 5 * np.sqrt(p * (1 - p) / n) + 1e-12)


def test_serialization_roundtrip(tmp_path):
    m = envs.example_b1("P2")
    path = tmp_path / "m.json"
    m.save(path)
    back = TabularDecPomdp.load(path)
    assert np.array_equal(back.kernel, m.kernel) and np.array_equal(back.reward, m.reward)
    assert back.actions_per_agent == m.actions_per_agent and back.gamma == m.gamma
    assert json.loads(path.read_text())["format"] == "tabular-decpomdp"


def test_history_window():
    h = History(3, (0, 1))
    assert h.filled == 1 and h.agent_view(1) == [(1, None)]
    for t in range(4):
        h.push((t, t + 1), (1, 0))
    assert h.filled == 3
    assert h.agent_view(0) == [(1, 1), (2, 1), (3, 1)]
    c = h.copy()
    c.push((9, 9), (0, 0))
    assert h.agent_view(0)[-1] == (3, 1)
    with pytest.raises(ValueError):
        History(0, (0,))


def test_transition_rejects_non_finite_reward():
    x = (np.zeros(2),)
    with pytest.raises(ModelError):
        Transition(x, 0, (0,), float("inf"), x, 1, False)
