import numpy as np
import pytest

from motok import numkit as nk
from motok.numkit import (NumericError, Rng, Tensor, backward, concat, const,
                          conv1d, conv1d_transpose, cumsum, finite_diff_grad,
                          gather_rows, layernorm, log_softmax, matmul, mean,
                          mse, narrow, param, relu, sigmoid, softmax,
                          stop_gradient, sum_, take_diag, transpose)


def _grad_of(loss_fn, x0):
    """Backward gradient of loss_fn(Tensor) at x0."""
    x = param(x0.copy())
    backward(loss_fn(x))
    return x.grad


def _fd_close(loss_fn, x0, rtol=1e-4, step=1e-4):
    # relative check where the gradient is O(1); the 1e-2 denominator floor
    # turns it into a 1e-6 absolute check where FD truncation noise dominates
    g = _grad_of(loss_fn, x0)
    fd = finite_diff_grad(lambda a: loss_fn(const(a)).item(), x0, step=step)
    denom = np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-2)
    assert np.max(np.abs(g - fd) / denom) < rtol, (g, fd)


def test_softmax_symmetry():
    out = softmax(const([0.0, 0.0])).data
    assert np.allclose(out, [0.5, 0.5], atol=1e-15)


def test_softmax_limit_case():
    out = softmax(const([1000.0, 0.0])).data
    assert abs(out[0] - 1.0) < 1e-12
    assert abs(out[1]) < 1e-12


def test_softmax_simplex_property():
    rng = Rng(7)
    for _ in range(50):
        x = rng.normal((5, 9), scale=50.0)
        y = softmax(const(x)).data
        assert (y >= 0).all()
        assert np.abs(y.sum(axis=-1) - 1.0).max() < 1e-12


def test_conv1d_output_length():
    x = const(np.zeros((8, 1)))
    w = const(np.zeros((3, 1, 1)))
    assert conv1d(x, w, stride=2, pad=1).shape == (4, 1)


def test_square_gradient():
    x = param(3.0)
    backward(x * x)
    assert x.grad == pytest.approx(6.0)


def test_stop_gradient_forward_identity():
    x = const([1.0, 2.0])
    assert np.array_equal(stop_gradient(x).data, [1.0, 2.0])


def test_stop_gradient_blocks():
    x = param([1.0, 2.0, 3.0])
    backward(sum_(stop_gradient(x)))
    assert x.grad is None or np.allclose(x.grad, 0.0)


def test_stop_gradient_live_factor():
    x = param(3.0)
    backward(stop_gradient(x) * x)
    assert x.grad == pytest.approx(3.0)


def test_stop_gradient_routes_vq_middle_term():
    # ||sg[z_e] - z_q||^2 reaches the codebook path only, not the encoder path
    rng = Rng(0)
    ze = param(rng.normal((4, 3)))
    zq = param(rng.normal((4, 3)))
    d = stop_gradient(ze) - zq
    backward(sum_(d * d))
    assert ze.grad is None or np.allclose(ze.grad, 0.0)
    assert np.allclose(zq.grad, -2.0 * (ze.data - zq.data))


def test_mse_grad_matches_fd():
    rng = Rng(3)
    target = rng.normal((10,))
    x0 = rng.normal((10,))
    _fd_close(lambda x: mse(x, target), x0, rtol=1e-6)


def test_backward_requires_scalar():
    x = param(np.ones((3,)))
    with pytest.raises(ValueError):
        backward(x * 2.0)


def test_nonfinite_raises():
    with pytest.raises(NumericError):
        nk.log(const([-1.0]))
    with pytest.raises(NumericError):
        nk.div(const(1.0), const(0.0))


def test_finite_diff_step_validation():
    with pytest.raises(ValueError):
        finite_diff_grad(lambda x: float(x.sum()), np.ones(2), step=0.0)


def test_finite_diff_analytic():
    fd = finite_diff_grad(lambda x: float((x ** 2).sum()), np.array([1.0, 2.0]))
    assert np.allclose(fd, [2.0, 4.0], atol=1e-8)


def test_softmax_cross_entropy_vs_fd():
    rng = Rng(11)
    for i in range(5):
        x0 = rng.normal((7,), scale=2.0)

        def loss(x):
            return -narrow(log_softmax(x), 0, 2, 1)

        _fd_close(lambda x: sum_(loss(x)), x0, rtol=1e-6)


PRIMITIVE_CASES = {
    "add": lambda x: sum_(x + x * 0.5),
    "mul_bcast": lambda x: sum_(x * nk.const(np.arange(1.0, x.shape[-1] + 1))),
    "div": lambda x: sum_(nk.div(x, 2.5)),
    "pow": lambda x: sum_(x ** 3),
    "sqrt": lambda x: sum_(nk.sqrt(x * x + 1.0)),
    "exp": lambda x: sum_(nk.exp(x)),
    "log": lambda x: sum_(nk.log(x * x + 1.0)),
    "sin": lambda x: sum_(nk.sin(x)),
    "cos": lambda x: sum_(nk.cos(x)),
    "abs": lambda x: sum_(nk.abs_(x + 10.0)),
    "relu": lambda x: sum_(relu(x + 0.05)),
    "sigmoid": lambda x: sum_(sigmoid(x)),
    "maximum": lambda x: sum_(nk.maximum(x, 0.3)),
    "softmax": lambda x: sum_(softmax(x) * nk.const(np.arange(float(x.shape[-1])))),
    "log_softmax": lambda x: sum_(log_softmax(x) * nk.const(np.arange(float(x.shape[-1])))),
    "cumsum": lambda x: sum_(cumsum(x, axis=0) ** 2),
    "mean_axis": lambda x: sum_(mean(x.__mul__(x), axis=0)),
    "narrow": lambda x: sum_(narrow(x, 0, 1, 3) ** 2),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients_match_fd(name):
    fn = PRIMITIVE_CASES[name]
    rng = Rng(hash(name) & 0xFFFF)
    for _ in range(20):
        x0 = rng.normal((6,))
        if name in ("relu", "abs"):
            # keep away from the kink so central differences are valid
            x0 = x0 + np.sign(x0) * 0.2
        _fd_close(fn, x0)


def test_matmul_gradients_match_fd():
    rng = Rng(21)
    b = rng.normal((4, 3))
    _fd_close(lambda x: sum_(matmul(reshaped(x, (5, 4)), b) ** 2), rng.normal((20,)))


def reshaped(x, shape):
    return nk.reshape(x, shape)


def test_matmul_batched_gradients():
    rng = Rng(22)
    b = rng.normal((2, 4, 3))

    def loss(x):
        return sum_(matmul(nk.reshape(x, (2, 5, 4)), b) ** 2)

    _fd_close(loss, rng.normal((40,)))


def test_conv1d_gradients_match_fd():
    rng = Rng(23)
    w = rng.normal((3, 2, 4), scale=0.5)
    bias = rng.normal((4,))

    def loss_x(x):
        return sum_(conv1d(nk.reshape(x, (8, 2)), w, bias, stride=2, pad=1) ** 2)

    _fd_close(loss_x, rng.normal((16,)))

    x = rng.normal((8, 2))

    def loss_w(wv):
        return sum_(conv1d(x, nk.reshape(wv, (3, 2, 4)), bias, stride=2, pad=1) ** 2)

    _fd_close(loss_w, w.reshape(-1).copy())


def test_conv1d_transpose_gradients_and_shape():
    rng = Rng(24)
    w = rng.normal((4, 2, 3), scale=0.5)
    x = rng.normal((5, 2))
    out = conv1d_transpose(const(x), const(w), stride=2, pad=1)
    assert out.shape == (10, 3)

    def loss_x(xv):
        return sum_(conv1d_transpose(nk.reshape(xv, (5, 2)), w, stride=2, pad=1) ** 2)

    _fd_close(loss_x, x.reshape(-1).copy())

    def loss_w(wv):
        return sum_(conv1d_transpose(x, nk.reshape(wv, (4, 2, 3)), stride=2, pad=1) ** 2)

    _fd_close(loss_w, w.reshape(-1).copy())


def test_conv_transpose_inverts_conv_length():
    x = const(np.zeros((16, 3)))
    w = const(np.zeros((4, 3, 5)))
    down = conv1d(x, w, stride=2, pad=1)
    assert down.shape == (8, 5)
    w2 = const(np.zeros((4, 5, 3)))
    up = conv1d_transpose(down, w2, stride=2, pad=1)
    assert up.shape == (16, 3)


def test_gather_rows_gradient_and_bounds():
    rng = Rng(25)
    table0 = rng.normal((6, 3))
    idx = np.array([0, 2, 2, 5])

    def loss(t):
        return sum_(gather_rows(nk.reshape(t, (6, 3)), idx) ** 2)

    _fd_close(loss, table0.reshape(-1).copy())
    with pytest.raises(IndexError):
        gather_rows(const(table0), np.array([6]))


def test_take_diag_gradient():
    rng = Rng(26)

    def loss(x):
        return sum_(take_diag(nk.reshape(x, (4, 4))) ** 2)

    _fd_close(loss, rng.normal((16,)))


def test_layernorm_gradient():
    rng = Rng(27)
    gamma = rng.normal((6,))
    beta = rng.normal((6,))

    def loss(x):
        return sum_(layernorm(nk.reshape(x, (3, 6)), gamma, beta) ** 3)

    _fd_close(loss, rng.normal((18,)))


def test_concat_transpose_gradients():
    rng = Rng(28)

    def loss(x):
        a = nk.reshape(x, (2, 3, 2))
        b = transpose(a, (0, 2, 1))
        return sum_(concat([a, transpose(b, (0, 2, 1))], axis=1) ** 2)

    _fd_close(loss, rng.normal((12,)))


def test_unreached_leaf_keeps_none_grad():
    x = param(np.ones(3))
    y = param(np.ones(3))
    backward(sum_(x * 2.0))
    assert y.grad is None


def test_rng_determinism_and_split():
    a = Rng(42)
    b = Rng(42)
    assert np.array_equal(a.normal((5,)), b.normal((5,)))
    c1 = Rng(42).split("child")
    c2 = Rng(42).split("child")
    other = Rng(42).split("other")
    s1, s2, s3 = c1.normal((4,)), c2.normal((4,)), other.normal((4,))
    assert np.array_equal(s1, s2)
    assert not np.array_equal(s1, s3)


def test_shape_mismatch_message():
    with pytest.raises(ValueError, match="add"):
        nk.add(const(np.ones((2, 3))), const(np.ones((4, 5))))
