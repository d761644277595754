import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import numeric_grad, rel_err
from nvf import autodiff as ad
from nvf.nn import bind, init_mlp, mlp


def check(build, *shapes, seed=0, positive=False, tol=1e-6):
    """Compare tape gradients of ``sum(w * build(*xs))`` with central differences."""
    rng = np.random.default_rng(seed)
    xs = [rng.uniform(0.5, 1.5, s) if positive else rng.standard_normal(s) for s in shapes]
    w = None

    def value():
        t = ad.Tape()
        out = build(*[t.const(x) for x in xs])
        return float((out.value * w).sum())

    t = ad.Tape()
    leaves = [t.leaf(x) for x in xs]
    out = build(*leaves)
    w = np.random.default_rng(seed + 1).standard_normal(out.shape)
    grads = t.grad(ad.sum(out * w), leaves)
    for x, g in zip(xs, grads):
        assert g.shape == x.shape
        assert rel_err(g, numeric_grad(value, x, 1e-6)) < tol


@pytest.mark.parametrize(
    "name,build,shapes,positive",
    [
        ("add", ad.add, [(4, 3), (4, 3)], False),
        ("add_bcast", ad.add, [(4, 3), (3,)], False),
        ("sub", ad.sub, [(2, 5), (1, 5)], False),
        ("mul", ad.mul, [(4, 3), (4, 1)], False),
        ("div", ad.div, [(3, 3), (3, 3)], True),
        ("scale", lambda a: ad.scale(a, -2.5), [(5,)], False),
        ("abs", ad.abs, [(6, 2)], False),
        ("relu", ad.relu, [(6, 2)], False),
        ("softplus", lambda a: ad.softplus(a, 3.0), [(6, 2)], False),
        ("sum_axis", lambda a: ad.sum(a, axis=1), [(3, 4)], False),
        ("sum_keep", lambda a: ad.sum(a, axis=0, keepdims=True), [(3, 4)], False),
        ("mean", lambda a: ad.mean(a, axis=-1), [(3, 4)], False),
        ("l2norm", lambda a: ad.l2norm(a, axis=-1), [(5, 3)], False),
        ("softmax", ad.softmax, [(2, 3, 5)], False),
        ("matmul", ad.matmul, [(4, 3), (3, 2)], False),
        ("matmul_batched", ad.matmul, [(2, 4, 3), (2, 3, 5)], False),
        ("matmul_bcast_rhs", ad.matmul, [(2, 4, 3), (3, 5)], False),
        ("concat", lambda a, b: ad.concat([a, b], axis=-1), [(3, 2), (3, 4)], False),
        ("reshape", lambda a: ad.reshape(a, (6, 2)), [(3, 4)], False),
        ("transpose", lambda a: ad.transpose(a, (2, 0, 1)), [(2, 3, 4)], False),
        ("take_rows_dup", lambda a: ad.take_rows(a, [0, 2, 2, 1, 0]), [(3, 4)], False),
        ("slice_last", lambda a: ad.slice_last(a, 1, 3), [(3, 4)], False),
        ("neg", lambda a: -a, [(3,)], False),
        ("rsub", lambda a: 1.0 - a, [(3,)], False),
    ],
)
def test_primitive_gradients(name, build, shapes, positive):
    check(build, *shapes, positive=positive)


def test_softplus_large_beta_stable():
    t = ad.Tape()
    x = t.leaf(np.array([-50.0, 0.0, 50.0]))
    y = ad.softplus(x, 100.0)
    assert np.all(np.isfinite(y.value))
    np.testing.assert_allclose(y.value, [0.0, np.log(2) / 100, 50.0], atol=1e-12)
    (g,) = t.grad(ad.sum(y), [x])
    np.testing.assert_allclose(g, [0.0, 0.5, 1.0], atol=1e-12)


def test_stop_gradient_blocks():
    t = ad.Tape()
    x = t.leaf(np.array([1.0, 2.0]))
    y = ad.sum(x * ad.stop_gradient(x))
    (g,) = t.grad(y, [x])
    np.testing.assert_array_equal(g, [1.0, 2.0])


def test_fan_out_accumulates():
    t = ad.Tape()
    x = t.leaf(np.array(3.0))
    y = x * x + x * 2.0
    (g,) = t.grad(y, [x])
    assert g == pytest.approx(8.0)


def test_unused_leaf_gets_zero_gradient():
    t = ad.Tape()
    x, u = t.leaf(np.ones(2)), t.leaf(np.ones(3))
    gx, gu = t.grad(ad.sum(x), [x, u])
    np.testing.assert_array_equal(gu, 0.0)


def test_shape_errors():
    t = ad.Tape()
    a, b = t.leaf(np.ones((2, 3))), t.leaf(np.ones((4, 3)))
    with pytest.raises(ad.ShapeError):
        ad.add(a, b)
    with pytest.raises(ad.ShapeError):
        ad.matmul(a, b)
    with pytest.raises(ad.ShapeError):
        t.grad(a, [a])
    with pytest.raises(ValueError):
        ad.add(a, ad.Tape().leaf(np.ones((2, 3))))


def test_backward_counter_increments_per_grad_call():
    before = ad.backward_pass_count()
    t = ad.Tape()
    x = t.leaf(np.ones(2))
    t.grad(ad.sum(x), [x])
    t.grad(ad.sum(x * x), [x])
    assert ad.backward_pass_count() == before + 2


def test_mlp_gradients():
    rng = np.random.default_rng(0)
    params = init_mlp(rng, "m", [5, 7, 7, 3])
    x = rng.standard_normal((4, 5))

    def loss(P, tape):
        return ad.sum(ad.abs(mlp(P, "m", tape.const(x), 3) - 0.1))

    tape = ad.Tape()
    P = bind(tape, params)
    names = sorted(P)
    grads = dict(zip(names, tape.grad(loss(P, tape), [P[k] for k in names])))
    for k in names:
        def f():
            t = ad.Tape()
            return float(loss(bind(t, params, trainable=False), t).value)
        assert rel_err(grads[k], numeric_grad(f, params[k], 1e-6)) < 1e-5, k


# ------------------------------------------------------------------ Adam


def test_adam_first_steps_oracle():
    # with bias correction the first update is lr * sign(g) (up to eps)
    p = {"w": np.array([1.0, -2.0])}
    s = ad.AdamState()
    ad.adam_step(p, {"w": np.array([0.5, -4.0])}, s, lr=0.1)
    np.testing.assert_allclose(p["w"], [0.9, -1.9], atol=1e-8)
    after_first = p["w"].copy()
    # second step, hand-computed
    g2 = np.array([0.25, 1.0])
    m = 0.9 * 0.1 * np.array([0.5, -4.0]) + 0.1 * g2
    v = 0.999 * 0.001 * np.array([0.25, 16.0]) + 0.001 * g2**2
    step = 0.1 * (m / (1 - 0.9**2)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
    expect = after_first - step
    ad.adam_step(p, {"w": g2}, s, lr=0.1)
    np.testing.assert_allclose(p["w"], expect, rtol=1e-12)
    assert s.step == 2


def test_adam_rejects_non_finite():
    p = {"w": np.zeros(2)}
    with pytest.raises(FloatingPointError):
        ad.adam_step(p, {"w": np.array([np.nan, 0.0])}, ad.AdamState(), 0.1)
    np.testing.assert_array_equal(p["w"], 0.0)


def test_adam_minimizes_quadratic():
    p = {"w": np.array([3.0, -2.0])}
    s = ad.AdamState()
    for _ in range(2000):
        ad.adam_step(p, {"w": 2 * p["w"]}, s, lr=0.05)
    assert np.linalg.norm(p["w"]) < 1e-2


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=8))
def test_softmax_is_distribution(xs):
    t = ad.Tape()
    p = ad.softmax(t.leaf(np.array(xs)[None])).value
    assert abs(p.sum() - 1) < 1e-12 and np.all(p > 0)
