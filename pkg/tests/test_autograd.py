"""Tests for the tensor engine: primitive values, backward, finite differences."""

import zlib

import numpy as np
import pytest

from app.errors import NotScalar, ShapeMismatch
from app.services import autograd as ag
from app.services.autograd import Tensor, backward, grad_check

PRIMITIVE_TOL = 1e-4
N_INPUTS = 20


def _param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _weighted(out: Tensor, rng_seed: int = 99) -> Tensor:
    """sum(out * W) for a fixed random W, so every output coordinate matters."""
    W = np.random.default_rng(rng_seed).normal(size=out.shape)
    return ag.sum(ag.mul(out, Tensor(W)))


class TestPrimitiveValues:
    def test_matmul_identity(self, f64):
        A = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(ag.matmul(A, Tensor(np.eye(2))).data, A.data)

    def test_softmax_symmetric(self, f64):
        assert np.allclose(ag.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_softmax_rows_sum_to_one(self, f64, rng):
        y = ag.softmax(Tensor(rng.normal(size=(8, 5)) * 10), axis=-1)
        assert np.allclose(y.data.sum(axis=-1), 1.0, atol=1e-9)

    def test_softmax_mask_zeroes_excluded(self, f64):
        mask = np.array([[True, False, True]])
        y = ag.softmax(Tensor([[1.0, 5.0, 1.0]]), mask=mask)
        assert y.data[0, 1] == 0.0
        assert np.allclose(y.data[0, [0, 2]], 0.5)

    def test_layernorm_formula(self, f64):
        y = ag.layernorm(Tensor([1.0, 2.0, 3.0])).data
        assert abs(y.mean()) <= 1e-9
        assert y.var() == pytest.approx(1.0, abs=1e-6)
        expected = (np.array([1.0, 2.0, 3.0]) - 2.0) / np.sqrt(2.0 / 3.0 + 1e-8)
        assert np.allclose(y, expected, atol=1e-9)

    def test_layernorm_groups(self, f64, rng):
        y = ag.layernorm(Tensor(rng.normal(3.0, 5.0, size=(6, 10)))).data
        assert np.max(np.abs(y.mean(axis=-1))) <= 1e-9
        assert np.allclose(y.var(axis=-1), 1.0, atol=1e-6)

    def test_gelu_known_values(self, f64):
        y = ag.gelu(Tensor([0.0, 1.0, -1.0])).data
        assert np.allclose(y, [0.0, 0.8413447460685429, -0.15865525393145707])

    def test_precision_switch_sets_dtype(self):
        with ag.precision("f32"):
            assert Tensor([1.0]).data.dtype == np.float32
        with ag.precision("f64"):
            assert Tensor([1.0]).data.dtype == np.float64

    def test_forward_is_bitwise_deterministic(self, f64, rng):
        x = rng.normal(size=(2, 3, 8, 8))
        W = rng.normal(size=(4, 3, 3, 3))
        a = ag.conv2d(Tensor(x), Tensor(W), stride=2, padding=1).data
        b = ag.conv2d(Tensor(x), Tensor(W), stride=2, padding=1).data
        assert np.array_equal(a, b)

    def test_conv2d_matches_direct_sum(self, f64, rng):
        x = rng.normal(size=(1, 2, 5, 5))
        W = rng.normal(size=(3, 2, 3, 3))
        out = ag.conv2d(Tensor(x), Tensor(W), stride=1, padding=0).data
        assert out.shape == (1, 3, 3, 3)
        expected = np.sum(x[0, :, 1:4, 2:5] * W[2])
        assert out[0, 2, 1, 2] == pytest.approx(expected)


class TestShapeErrors:
    def test_add_names_op_and_shapes(self, f64):
        with pytest.raises(ShapeMismatch, match=r"add: incompatible shapes \(2, 3\), \(4,\)"):
            ag.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(4)))

    def test_matmul_inner_dims(self, f64):
        with pytest.raises(ShapeMismatch, match="matmul"):
            ag.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_concat_other_dims(self, f64):
        with pytest.raises(ShapeMismatch, match="concat"):
            ag.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4)))], axis=0)

    def test_reshape_size(self, f64):
        with pytest.raises(ShapeMismatch):
            ag.reshape(Tensor(np.zeros(6)), (4, 2))


class TestBackward:
    def test_sum_gradient_is_ones(self, f64):
        x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
        backward(ag.sum(x))
        assert np.array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_mse_against_zero(self, f64):
        x = Tensor([3.0], requires_grad=True)
        backward(ag.mse(x, Tensor([0.0])))
        assert x.grad[0] == pytest.approx(6.0)

    def test_non_scalar_loss_rejected(self, f64):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(NotScalar):
            backward(ag.scale(x, 2.0))

    def test_two_branch_accumulation(self, f64, rng):
        v = rng.normal(size=5)
        x = Tensor(v, requires_grad=True)
        loss = ag.sum(ag.add(ag.mul(x, x), ag.scale(x, 3.0)))
        backward(loss)
        assert np.allclose(x.grad, 2 * v + 3.0, atol=1e-12)

    def test_no_grad_records_nothing(self, f64):
        x = Tensor([1.0], requires_grad=True)
        with ag.no_grad():
            y = ag.scale(x, 2.0)
        assert not y.requires_grad

    def test_constants_get_no_grad(self, f64):
        x = Tensor([1.0, 2.0], requires_grad=True)
        c = Tensor([5.0, 6.0])
        backward(ag.sum(ag.mul(x, c)))
        assert c.grad is None
        assert np.array_equal(x.grad, [5.0, 6.0])


# Each case builds f(x) for a parameter x drawn from rng; constants come from rng too.
def _cases():
    def matmul_left(rng):
        B = Tensor(rng.normal(size=(4, 2)))
        return _param(rng, 3, 4), lambda x: _weighted(ag.matmul(x, B))

    def matmul_right(rng):
        A = Tensor(rng.normal(size=(2, 3, 4)))
        return _param(rng, 2, 4, 5), lambda x: _weighted(ag.matmul(A, x))

    def add_bias(rng):
        a = Tensor(rng.normal(size=(3, 4)))
        return _param(rng, 4), lambda x: _weighted(ag.add(a, x))

    def mul(rng):
        b = Tensor(rng.normal(size=(3, 4)))
        return _param(rng, 3, 4), lambda x: _weighted(ag.mul(x, b))

    def scale(rng):
        return _param(rng, 5), lambda x: _weighted(ag.scale(x, -1.7))

    def concat(rng):
        b = Tensor(rng.normal(size=(2, 3)))
        return _param(rng, 2, 2), lambda x: _weighted(ag.concat([b, x, b], axis=1))

    def slice_(rng):
        return _param(rng, 4, 6), lambda x: _weighted(ag.slice_axis(x, 1, 2, 5))

    def reshape_transpose(rng):
        return _param(rng, 2, 3, 4), lambda x: _weighted(ag.transpose(ag.reshape(x, (6, 4)), (1, 0)))

    def softmax_masked(rng):
        mask = np.array([[True, False, True, True], [True, True, False, True], [False, True, True, True]])
        return _param(rng, 3, 4), lambda x: _weighted(ag.softmax(x, axis=-1, mask=mask))

    def layernorm_x(rng):
        g, b = Tensor(rng.normal(size=5)), Tensor(rng.normal(size=5))
        return _param(rng, 3, 5), lambda x: _weighted(ag.layernorm(x, g, b))

    def layernorm_gamma(rng):
        x0, b = Tensor(rng.normal(size=(3, 5))), Tensor(rng.normal(size=5))
        return _param(rng, 5), lambda g: _weighted(ag.layernorm(x0, g, b))

    def layernorm_beta(rng):
        x0, g = Tensor(rng.normal(size=(3, 5))), Tensor(rng.normal(size=5))
        return _param(rng, 5), lambda b: _weighted(ag.layernorm(x0, g, b))

    def gelu(rng):
        return _param(rng, 16), lambda x: ag.sum(ag.gelu(x))

    def linear_x(rng):
        W, b = Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=3))
        return _param(rng, 2, 5, 4), lambda x: _weighted(ag.linear(x, W, b))

    def linear_w(rng):
        x0, b = Tensor(rng.normal(size=(5, 4))), Tensor(rng.normal(size=3))
        return _param(rng, 4, 3), lambda W: _weighted(ag.linear(x0, W, b))

    def linear_b(rng):
        x0, W = Tensor(rng.normal(size=(5, 4))), Tensor(rng.normal(size=(4, 3)))
        return _param(rng, 3), lambda b: _weighted(ag.linear(x0, W, b))

    def conv_x(rng):
        W, b = Tensor(rng.normal(size=(3, 2, 3, 3))), Tensor(rng.normal(size=3))
        return _param(rng, 1, 2, 6, 6), lambda x: _weighted(ag.conv2d(x, W, b, stride=2, padding=1))

    def conv_w(rng):
        x0 = Tensor(rng.normal(size=(2, 2, 5, 5)))
        return _param(rng, 3, 2, 3, 3), lambda W: _weighted(ag.conv2d(x0, W, stride=2, padding=1))

    def mean_axes(rng):
        return _param(rng, 2, 3, 4), lambda x: _weighted(ag.mean(x, axis=(1, 2)))

    def sum_axis(rng):
        return _param(rng, 3, 4), lambda x: _weighted(ag.sum(x, axis=0))

    def mse(rng):
        b = Tensor(rng.normal(size=(3, 2)))
        return _param(rng, 3, 2), lambda x: ag.mse(x, b)

    return {f.__name__: f for f in (
        matmul_left, matmul_right, add_bias, mul, scale, concat, slice_, reshape_transpose,
        softmax_masked, layernorm_x, layernorm_gamma, layernorm_beta, gelu, linear_x, linear_w,
        linear_b, conv_x, conv_w, mean_axes, sum_axis, mse,
    )}


CASES = _cases()


class TestGradCheck:
    def test_linear_function_is_exact(self, f64):
        x = Tensor([0.5, 0.25, 0.125], requires_grad=True)
        assert grad_check(lambda t: ag.sum(t), x) <= 1e-10

    @pytest.mark.parametrize("name", sorted(CASES))
    def test_primitive(self, f64, name):
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        for _ in range(N_INPUTS):
            x, f = CASES[name](rng)
            assert grad_check(f, x, eps=1e-5) <= PRIMITIVE_TOL, name

    def test_gelu_sum_on_gaussian_input(self, f64, rng):
        x = Tensor(rng.normal(size=16), requires_grad=True)
        assert grad_check(lambda t: ag.sum(ag.gelu(t)), x, eps=1e-5) <= 1e-4
