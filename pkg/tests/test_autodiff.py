import numpy as np
import pytest
from hypothesis import given, strategies as st

from drmarl.autodiff import (Adam, NonFiniteError, ParamStore, RMSprop, ShapeError, Tensor, add_dense,
                             clip_grad_norm, concat, dense, grad_check, stack_sum, track_kinks)


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def away_from_zero(x, margin=1e-3):
    return np.where(np.abs(x) < margin, margin, x)


UNARY = {
    "relu": lambda t: t.relu(),
    "neg_part": lambda t: t.neg_part(),
    "abs": lambda t: t.abs(),
    "elu": lambda t: t.elu(),
    "softplus": lambda t: t.softplus(),
    "sigmoid": lambda t: t.sigmoid(),
    "square": lambda t: t.square(),
    "clip": lambda t: t.clip(-0.5, 0.5),
    "max": lambda t: t.max(axis=1),
    "sum0": lambda t: t.sum(axis=0),
    "mean": lambda t: t.mean(),
    "reshape": lambda t: t.reshape(-1) * Tensor(np.arange(12.0)),
    "gather": lambda t: t.gather(np.array([0, 3, 1])),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@given(seed=st.integers(0, 10_000))
def test_unary_op_gradients(name, seed):
    x = away_from_zero(np.random.default_rng(seed).normal(size=(3, 4)))
    if name == "clip":
        x = np.where(np.abs(np.abs(x) - 0.5) < 1e-3, 0.3, x)
    w = np.random.default_rng(seed + 1).normal(size=UNARY[name](Tensor(x)).shape)
    f = lambda a: float(np.sum(UNARY[name](Tensor(a)).data * w))
    t = Tensor(x.copy(), requires_grad=True)
    (UNARY[name](t) * Tensor(w)).sum().backward()
    assert np.allclose(t.grad, numeric_grad(f, x), atol=1e-6)


@given(seed=st.integers(0, 10_000))
def test_binary_ops_with_broadcasting(seed):
    r = np.random.default_rng(seed)
    a, b, m = r.normal(size=(3, 4)), r.normal(size=(1, 4)), r.normal(size=(4, 2))

    def f(a_, b_, m_):
        A, B, M = Tensor(a_, True), Tensor(b_, True), Tensor(m_, True)
        out = ((A * B - B + 2.0) @ M).sum() + (3.0 - A).sum() - (-B).sum()
        return A, B, M, out

    A, B, M, out = f(a, b, m)
    out.backward()
    assert np.allclose(A.grad, numeric_grad(lambda x: f(x, b, m)[3].item(), a), atol=1e-6)
    assert np.allclose(B.grad, numeric_grad(lambda x: f(a, x, m)[3].item(), b), atol=1e-6)
    assert np.allclose(M.grad, numeric_grad(lambda x: f(a, b, x)[3].item(), m), atol=1e-6)


def test_concat_and_stack_sum():
    a, b = Tensor(np.ones((2, 2)), True), Tensor(np.full((2, 3), 2.0), True)
    out = concat([a, b], axis=1)
    assert out.shape == (2, 5)
    (out * Tensor(np.arange(10.0).reshape(2, 5))).sum().backward()
    assert np.array_equal(a.grad, [[0, 1], [5, 6]])
    c = stack_sum([a, a, a])
    c.sum().backward()
    assert np.all(a.grad == np.array([[0, 1], [5, 6]]) + 3)


def test_gradients_accumulate_through_shared_nodes():
    x = Tensor(np.array([3.0]), True)
    y = x * x + x
    y.sum().backward()
    assert x.grad[0] == pytest.approx(7.0)


def test_max_routes_gradient_to_first_maximiser():
    t = Tensor(np.array([[1.0, 2.0, 2.0]]), True)
    t.max(axis=1).sum().backward()
    assert np.array_equal(t.grad, [[0.0, 1.0, 0.0]])


def test_detach_blocks_gradient():
    x = Tensor(np.array([2.0]), True)
    (x * x.detach()).sum().backward()
    assert x.grad[0] == pytest.approx(2.0)


def test_non_finite_values_raise():
    x = Tensor(np.array([1e308]), True)
    with pytest.raises(NonFiniteError) as exc:
        x * 10.0
    assert exc.value.op == "mul"


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_kink_tracking():
    with track_kinks() as log:
        Tensor(np.array([0.3, -0.01])).relu()
        Tensor(np.array([[1.0, 1.05]])).max(axis=1)
    assert log == pytest.approx([0.01, 0.05])
    Tensor(np.array([0.0])).relu()        # outside the context: not recorded
    assert len(log) == 2


def test_param_store_roundtrip_is_bitwise(tmp_path, rng):
    store = ParamStore()
    add_dense(store, "fc", 3, 4, rng)
    store.add("odd", np.array([np.pi, -1e-300, 1 / 3]))
    path = tmp_path / "p.json"
    store.save(path)
    back = ParamStore.load(path)
    assert back.names() == store.names() and back.checksum() == store.checksum()
    for n in store.names():
        assert np.array_equal(back[n].data, store[n].data)


def test_snapshot_is_independent(rng):
    store = ParamStore()
    add_dense(store, "fc", 2, 2, rng)
    snap = store.snapshot()
    store["fc.w"].data += 1.0
    assert not np.array_equal(snap["fc.w"].data, store["fc.w"].data)
    assert not snap["fc.w"].requires_grad
    store.load_from(snap)
    assert np.array_equal(snap["fc.w"].data, store["fc.w"].data)
    assert store.subset(["fc."]) == ["fc.b", "fc.w"] or set(store.subset(["fc."])) == {"fc.w", "fc.b"}


def test_dense_layer_values(rng):
    store = ParamStore()
    add_dense(store, "fc", 3, 2, rng)
    x = rng.normal(size=(5, 3))
    out = dense(store, "fc", Tensor(x))
    assert np.allclose(out.data, x @ store["fc.w"].data + store["fc.b"].data)


def test_rmsprop_single_step_formula():
    store = ParamStore()
    p = store.add("p", np.array([1.0, -2.0]))
    p.grad = np.array([0.5, -1.0])
    RMSprop(lr=0.1, decay=0.9, eps=1e-5).step(store)
    v = 0.1 * np.array([0.25, 1.0])
    assert np.allclose(p.data, np.array([1.0, -2.0]) - 0.1 * np.array([0.5, -1.0]) / (np.sqrt(v) + 1e-5))


def test_adam_first_step_moves_by_lr():
    store = ParamStore()
    p = store.add("p", np.array([1.0, -2.0]))
    p.grad = np.array([0.5, -3.0])
    Adam(lr=0.01).step(store)
    # bias correction makes the first step lr * sign(grad)
    assert np.allclose(p.data, [0.99, -1.99], atol=1e-7)


@pytest.mark.parametrize("opt", [RMSprop(lr=0.05), Adam(lr=0.05)])
def test_optimizers_minimise_quadratic(opt):
    store = ParamStore()
    p = store.add("p", np.array([3.0, -4.0]))
    for _ in range(500):
        store.zero_grad()
        (p - Tensor(np.array([1.0, 1.0]))).square().sum().backward()
        opt.step(store)
    assert np.allclose(p.data, [1.0, 1.0], atol=0.05)


def test_optimizer_shape_mismatch():
    store = ParamStore()
    p = store.add("p", np.zeros(2))
    p.grad = np.zeros(3)
    with pytest.raises(ShapeError):
        Adam().step(store)


def test_clip_grad_norm():
    store = ParamStore()
    a, b = store.add("a", np.zeros(1)), store.add("b", np.zeros(1))
    a.grad, b.grad = np.array([3.0]), np.array([4.0])
    assert clip_grad_norm(store, ["a", "b"], 1.0) == pytest.approx(5.0)
    assert np.hypot(a.grad[0], b.grad[0]) == pytest.approx(1.0)


def test_grad_check_detects_wrong_gradient(rng):
    store = ParamStore()
    add_dense(store, "fc", 3, 2, rng)
    x = Tensor(rng.normal(size=(4, 3)))
    assert grad_check(lambda: dense(store, "fc", x).softplus().sum(), store).passed

    class Wrong(Tensor):
        pass

    def bad():
        y = dense(store, "fc", x)
        # forward says square, backward says identity
        return y._make(y.data ** 2, (y,), "bad", lambda g: ((y, g),)).sum()
    rep = grad_check(bad, store)
    assert not rep.passed and rep.worst[1] > 1e-2
