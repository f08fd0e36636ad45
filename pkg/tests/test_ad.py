import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from maesn import ad


def num_grad(f, x, eps=1e-5):
    """Central differences of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2 * eps)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b)))


def test_forward_examples():
    m = ad.matmul(ad.constant([[1.0, 2.0], [3.0, 4.0]]), ad.constant([[1.0], [1.0]]))
    np.testing.assert_array_equal(m.value, [[3.0], [7.0]])
    np.testing.assert_array_equal(ad.relu(ad.constant([-1.0, 0.0, 2.0])).value, [0, 0, 2])
    assert abs(ad.exp(ad.log(ad.constant([2.5]))).value[0] - 2.5) < 1e-12


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.matmul(ad.constant(np.ones((2, 3))), ad.constant(np.ones((4, 5))))
    with pytest.raises(ad.ShapeError, match=r"\(3,\).*\(4,\)"):
        ad.add(ad.constant(np.ones(3)), ad.constant(np.ones(4)))


def test_simple_gradients():
    x = ad.tensor(3.0)
    (g,) = ad.grad(x * x, [x])
    assert g.item() == 6.0

    x = ad.tensor(2.0)
    (g1,) = ad.grad(x * x * x, [x], create_graph=True)
    (g2,) = ad.grad(g1, [x])
    assert g1.item() == 12.0
    assert g2.item() == 12.0


def test_relu_derivative_at_zero_is_zero():
    x = ad.tensor(np.array([0.0, -1.0, 1.0]))
    (g,) = ad.grad(ad.sum(ad.relu(x)), [x])
    np.testing.assert_array_equal(g.value, [0.0, 0.0, 1.0])


def test_unreachable_gives_zero():
    x, y = ad.tensor(np.ones(3)), ad.tensor(np.ones((2, 2)))
    gx, gy = ad.grad(ad.sum(x * 2.0), [x, y])
    np.testing.assert_array_equal(gx.value, 2.0)
    np.testing.assert_array_equal(gy.value, np.zeros((2, 2)))


def test_relu_matmul_gradient_vs_fd():
    rng = np.random.default_rng(0)
    w0, x = rng.normal(size=(4, 4)), rng.normal(size=(4, 1))

    def f(w):
        return float(np.sum(np.maximum(w @ x, 0.0)))

    w = ad.tensor(w0)
    (g,) = ad.grad(ad.sum(ad.relu(ad.matmul(w, ad.constant(x)))), [w])
    assert np.max(np.abs(g.value - num_grad(f, w0))) < 1e-6


# Every op as a scalar function of one or two random inputs. Inputs to log
# stay positive; relu/clip inputs are kept away from their kinks.
def _away_from(x, points, gap=1e-2):
    for p in points:
        close = np.abs(x - p) < gap
        x = np.where(close, p + np.sign(x - p + 1e-12) * gap * 2, x)
    return x


OPS = {
    "add": (lambda a, b: ad.add(a, b), 2),
    "sub": (lambda a, b: ad.sub(a, b), 2),
    "mul": (lambda a, b: ad.mul(a, b), 2),
    "div": (lambda a, b: ad.div(a, ad.add(ad.square(b), 1.0)), 2),
    "neg": (lambda a: ad.neg(a), 1),
    "relu": (lambda a: ad.relu(a), 1),
    "tanh": (lambda a: ad.tanh(a), 1),
    "exp": (lambda a: ad.exp(a), 1),
    "log": (lambda a: ad.log(ad.add(ad.square(a), 0.5)), 1),
    "square": (lambda a: ad.square(a), 1),
    "clip": (lambda a: ad.clip(a, -0.5, 0.5), 1),
    "mean": (lambda a: ad.mean(a, axis=0, keepdims=True), 1),
    "sum_axis": (lambda a: ad.sum(a, axis=-1), 1),
    "reshape": (lambda a: ad.reshape(a, (-1,)), 1),
    "swapaxes": (lambda a: ad.swapaxes(a), 1),
    "broadcast": (lambda a: ad.broadcast_to(ad.sum(a, axis=0), (3,) + a.shape[1:]), 1),
    "concat": (lambda a, b: ad.concat([a, b]), 2),
    "take_last": (lambda a: ad.take_last(a, 0, max(1, a.shape[-1] - 1)), 1),
}


def _scalar(op, args, weights):
    out = op(*args)
    return ad.sum(ad.mul(out, weights[: out.size].reshape(out.shape)))  # weights: ndarray


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_fd(name):
    op, arity = OPS[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for shape in [(3, 4), (8, 8), (2, 5)]:
        xs = [_away_from(rng.normal(size=shape), [0.0, -0.5, 0.5]) for _ in range(arity)]
        weights = rng.normal(size=10 * shape[0] * shape[1])

        def f(i, x):
            vals = [ad.constant(v) for v in xs]
            vals[i] = ad.constant(x)
            return float(_scalar(op, vals, weights).value)

        leaves = [ad.tensor(x) for x in xs]
        grads = ad.grad(_scalar(op, leaves, weights), leaves)
        for i in range(arity):
            assert rel_err(grads[i].value, num_grad(lambda x: f(i, x), xs[i])) < 1e-5, (name, shape, i)


def test_matmul_batched_gradients():
    rng = np.random.default_rng(1)
    a0, b0 = rng.normal(size=(3, 4, 5)), rng.normal(size=(5, 2))
    w = rng.normal(size=(3, 4, 2))
    a, b = ad.tensor(a0), ad.tensor(b0)
    ga, gb = ad.grad(ad.sum(ad.matmul(a, b) * w), [a, b])
    assert rel_err(ga.value, num_grad(lambda x: np.sum((x @ b0) * w), a0)) < 1e-5
    assert rel_err(gb.value, num_grad(lambda x: np.sum((a0 @ x) * w), b0)) < 1e-5


@pytest.mark.parametrize("name", ["mul", "tanh", "exp", "log", "square", "div", "relu", "clip"])
def test_second_order_matches_fd_of_gradient(name):
    op, arity = OPS[name]
    rng = np.random.default_rng(7)
    xs = [_away_from(rng.normal(size=(3, 3)), [0.0, -0.5, 0.5]) for _ in range(arity)]
    w1 = rng.normal(size=90)
    v = rng.normal(size=(3, 3))

    def first(x_arr):
        # <d/dx0 f, v> as a scalar function of x0
        leaves = [ad.tensor(x_arr)] + [ad.tensor(x) for x in xs[1:]]
        (g,) = ad.grad(_scalar(op, leaves, w1), leaves[:1], create_graph=True)
        return g

    x0 = ad.tensor(xs[0])
    leaves = [x0] + [ad.tensor(x) for x in xs[1:]]
    (g,) = ad.grad(_scalar(op, leaves, w1), [x0], create_graph=True)
    (h,) = ad.grad(ad.sum(g * v), [x0])
    fd = num_grad(lambda x: float(np.sum(first(x).value * v)), xs[0])
    assert rel_err(h.value, fd) < 1e-4


def test_second_order_through_mlp():
    rng = np.random.default_rng(3)
    w0, x = rng.normal(size=(4, 3)), rng.normal(size=(5, 4))
    v = rng.normal(size=(4, 3))

    def grad_dot(w_arr, create):
        w = ad.tensor(w_arr)
        y = ad.sum(ad.square(ad.tanh(ad.matmul(ad.constant(x), w))))
        (g,) = ad.grad(y, [w], create_graph=create)
        return w, ad.sum(g * v)

    w, s = grad_dot(w0, True)
    (h,) = ad.grad(s, [w])
    fd = num_grad(lambda a: float(grad_dot(a, False)[1].value), w0)
    assert rel_err(h.value, fd) < 1e-4


def test_jvp_matches_vjp_adjoint():
    rng = np.random.default_rng(5)
    a = ad.tensor(rng.normal(size=(3, 4)))
    b = ad.tensor(rng.normal(size=(4, 2)))
    out = ad.exp(ad.tanh(ad.matmul(a, b)))
    ta, tb = rng.normal(size=a.shape), rng.normal(size=b.shape)
    u = rng.normal(size=out.shape)
    (jv,) = ad.jvp([out], [a, b], [ta, tb])
    va, vb = ad.vjp([out], [u], [a, b])
    assert abs(np.sum(jv * u) - (np.sum(va.value * ta) + np.sum(vb.value * tb))) < 1e-10


def test_evaluation_is_deterministic():
    rng = np.random.default_rng(9)
    x0, w0 = rng.normal(size=(6, 4)), rng.normal(size=(4, 4))

    def run():
        w = ad.tensor(w0)
        y = ad.mean(ad.square(ad.relu(ad.matmul(ad.constant(x0), w))))
        (g,) = ad.grad(y, [w])
        return y.value.tobytes() + g.value.tobytes()

    assert run() == run()


def test_no_grad_records_nothing():
    x = ad.tensor(1.0)
    with ad.no_grad():
        y = x * 3.0
    assert not y.requires_grad and y.is_leaf


def test_check_finite_reports_groups():
    with pytest.raises(FloatingPointError, match="bad"):
        ad.check_finite({"ok": np.ones(2), "bad": np.array([np.nan, 1.0])})


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=8))
def test_sum_square_gradient_property(xs):
    x = ad.tensor(np.array(xs))
    (g,) = ad.grad(ad.sum(ad.square(x)), [x])
    np.testing.assert_allclose(g.value, 2 * np.array(xs), atol=1e-12)
