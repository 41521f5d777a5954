import numpy as np
import pytest

from distileak import tape
from distileak.tape import Value, backward
from distileak.losses import cross_entropy


def finite_diff(f, x0, h=1e-5):
    """Central finite-difference gradient of a scalar function of one array."""
    x0 = np.asarray(x0, dtype=np.float64)
    g = np.zeros_like(x0)
    flat = x0.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        gflat[i] = (f(xp.reshape(x0.shape)) - f(xm.reshape(x0.shape))) / (2 * h)
    return g


def rel_err(a, b):
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return np.abs(a - b).max() / denom


def test_quadratic_closed_form():
    w = Value(np.array([1.0, 2.0, 3.0]))
    root = (w * w).sum()
    backward(root)
    np.testing.assert_allclose(w.grad, [2.0, 4.0, 6.0], rtol=0, atol=0)


def test_constant_root_zero_grads():
    w = Value(np.array([1.0, -2.0]))
    root = (w * 0.0).sum()
    backward(root)
    np.testing.assert_array_equal(w.grad, np.zeros(2))


def test_non_scalar_root_rejected():
    w = Value(np.array([1.0, 2.0]))
    with pytest.raises(tape.ShapeError):
        backward(w * 2.0)


def test_two_layer_mlp_matches_finite_differences():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(4, 6))
    w1 = rng.normal(size=(6, 5))
    b1 = rng.normal(size=(5,))
    w2 = rng.normal(size=(5, 3))
    b2 = rng.normal(size=(3,))
    y = rng.integers(0, 3, size=4)

    def loss_of(w1a):
        h = np.maximum(Value(x).data @ w1a + b1, 0)
        logits = h @ w2 + b2
        m = logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(logits - m).sum(axis=1)) + m[:, 0]
        return float(np.mean(lse - logits[np.arange(4), y]))

    w1v = Value(w1)
    h = tape.relu(Value(x) @ w1v + Value(b1))
    logits = h @ Value(w2) + Value(b2)
    backward(cross_entropy(logits, y))
    assert rel_err(w1v.grad, finite_diff(loss_of, w1)) < 1e-4


UNARY_OPS = [
    ("relu", tape.relu, 0.3),
    ("tanh", tape.tanh, 0.0),
    ("sigmoid", tape.sigmoid, 0.0),
    ("exp", tape.exp, 0.0),
    ("sqrt", tape.sqrt, 2.0),
    ("log", tape.log, 3.0),
]


@pytest.mark.parametrize("name,op,shift", UNARY_OPS, ids=[o[0] for o in UNARY_OPS])
def test_unary_ops_match_finite_differences(name, op, shift):
    rng = np.random.default_rng(11)
    x = rng.normal(size=(3, 4)) + shift
    if name == "relu":
        # keep away from the kink where finite differences are invalid
        x = x + np.sign(x) * 0.05
    xv = Value(x)
    weights = rng.normal(size=(3, 4))
    root = (op(xv) * weights).sum()
    backward(root)

    def f(xa):
        if name == "relu":
            out = np.maximum(xa, 0)
        else:
            out = getattr(np, name if name != "sigmoid" else "tanh")(xa)
            if name == "sigmoid":
                out = 1 / (1 + np.exp(-xa))
        return float((out * weights).sum())

    assert rel_err(xv.grad, finite_diff(f, x)) < 1e-4


def test_matmul_and_broadcast_bias():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(5, 4))
    b = rng.normal(size=(4, 2))
    bias = rng.normal(size=(2,))
    av, bv, biasv = Value(a), Value(b), Value(bias)
    root = ((av @ bv + biasv) ** 2.0).sum()
    backward(root)

    def f_a(aa):
        return float(((aa @ b + bias) ** 2).sum())

    def f_bias(ba):
        return float(((a @ b + ba) ** 2).sum())

    assert rel_err(av.grad, finite_diff(f_a, a)) < 1e-6
    assert rel_err(biasv.grad, finite_diff(f_bias, bias)) < 1e-6


def test_conv2d_matches_finite_differences():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 1, 6, 6))
    w = rng.normal(size=(3, 1, 3, 3)) * 0.5
    b = rng.normal(size=(3,))
    probe = rng.normal(size=(2, 3, 6, 6))

    xv, wv, bv = Value(x), Value(w), Value(b)
    root = (tape.conv2d(xv, wv, bv, pad=1) * probe).sum()
    backward(root)

    def conv_np(xa, wa, ba):
        out = np.zeros((2, 3, 6, 6))
        xp = np.pad(xa, ((0, 0), (0, 0), (1, 1), (1, 1)))
        for f in range(3):
            for i in range(6):
                for j in range(6):
                    out[:, f, i, j] = (
                        xp[:, :, i : i + 3, j : j + 3] * wa[f]
                    ).sum(axis=(1, 2, 3)) + ba[f]
        return out

    assert rel_err(xv.grad, finite_diff(lambda xa: float((conv_np(xa, w, b) * probe).sum()), x)) < 1e-4
    assert rel_err(wv.grad, finite_diff(lambda wa: float((conv_np(x, wa, b) * probe).sum()), w)) < 1e-4
    assert rel_err(bv.grad, finite_diff(lambda ba: float((conv_np(x, w, ba) * probe).sum()), b)) < 1e-4


def test_im2col_col2im_adjoint_pair():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(2, 3, 5, 5))
    cols = tape._im2col_data(x, 3, 1)
    u = rng.normal(size=cols.shape)
    # <im2col(x), u> == <x, col2im(u)> for an adjoint pair
    lhs = float((cols * u).sum())
    rhs = float((x * tape._col2im_data(u, x.shape, 3, 1)).sum())
    assert abs(lhs - rhs) < 1e-9


def test_second_order_grad_norm_wrt_input():
    # d/dx of ||d CE / d theta||^2 must match finite differences of that scalar
    rng = np.random.default_rng(21)
    x = rng.normal(size=(3, 5))
    w = rng.normal(size=(5, 4)) * 0.6
    y = rng.integers(0, 4, size=3)

    def grad_norm_sq(xa):
        xv = Value(xa)
        wv = Value(w)
        loss = cross_entropy(xv @ wv, y)
        grads = backward(loss)
        g = grads[wv]
        return (g * g).sum()

    xv_outer = Value(x)
    wv = Value(w)
    loss = cross_entropy(xv_outer @ wv, y)
    grads = backward(loss)
    gw = grads[wv]
    norm_sq = (gw * gw).sum()
    backward(norm_sq)

    fd = finite_diff(lambda xa: float(grad_norm_sq(xa).data), x, h=1e-5)
    assert rel_err(xv_outer.grad, fd) < 1e-3


def test_second_order_through_tanh_layer():
    rng = np.random.default_rng(22)
    x = rng.normal(size=(2, 4))
    w = rng.normal(size=(4, 3)) * 0.7
    y = rng.integers(0, 3, size=2)

    def grad_norm_sq(xa):
        wv = Value(w)
        loss = cross_entropy(tape.tanh(Value(xa) @ wv) @ Value(np.eye(3)), y)
        g = backward(loss)[wv]
        return float((g * g).sum().data)

    xv = Value(x)
    wv = Value(w)
    loss = cross_entropy(tape.tanh(xv @ wv) @ Value(np.eye(3)), y)
    g = backward(loss)[wv]
    backward((g * g).sum())
    assert rel_err(xv.grad, finite_diff(grad_norm_sq, x)) < 1e-3


def test_grad_accumulates_over_reuse():
    x = Value(2.0)
    root = x * x + x * 3.0
    backward(root)
    assert float(x.grad) == pytest.approx(2 * 2.0 + 3.0)


def test_detach_blocks_gradient():
    x = Value(np.array([1.0, 2.0]))
    root = (x.detach() * x).sum()
    backward(root)
    np.testing.assert_allclose(x.grad, x.data)


def test_clip_zero_gradient_outside_range():
    x = Value(np.array([-1.0, 0.5, 2.0]))
    root = tape.clip(x, 0.0, 1.0).sum()
    backward(root)
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])
