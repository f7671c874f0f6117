import numpy as np
import pytest

from fewspect import autodiff as ad
from fewspect.errors import ConfigError, NumericalError


def t64(arr, grad=True):
    return ad.Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


def rand64(rng, *shape):
    return t64(rng.standard_normal(shape))


class TestBasics:
    def test_sum_gradient_is_ones(self, rng):
        x = rand64(rng, 3, 4)
        out = ad.tsum(x)
        ad.backward(out)
        assert np.array_equal(x.grad, np.ones((3, 4)))

    def test_mul_gradient_is_other_factor(self, rng):
        x, y = rand64(rng, 5), rand64(rng, 5)
        x.data = x.data.reshape(5)
        ad.backward(ad.tsum(ad.mul(x, y)))
        assert np.allclose(x.grad, y.data)
        assert np.allclose(y.grad, x.data)

    def test_shared_subgraph_accumulates(self, rng):
        # f(x) = sum(x*x) built with x used twice equals duplicated-input version
        x = rand64(rng, 7)
        ad.backward(ad.tsum(ad.mul(x, x)))
        shared = x.grad.copy()
        a, b = t64(x.data.copy()), t64(x.data.copy())
        ad.backward(ad.tsum(ad.mul(a, b)))
        assert np.allclose(shared, a.grad + b.grad)
        assert np.allclose(shared, 2 * x.data)

    def test_backward_rejects_nonscalar(self, rng):
        x = rand64(rng, 3)
        with pytest.raises(ConfigError):
            ad.backward(ad.mul(x, x))

    def test_nan_propagation_raises(self):
        x = t64([1.0, -1.0])
        with pytest.raises(NumericalError):
            ad.sqrt(x)

    def test_no_grad_returns_constants(self, rng):
        x = rand64(rng, 3)
        with ad.no_grad():
            y = ad.mul(x, x)
        assert not y.requires_grad

    def test_softmax_rows_sum_to_one(self, rng):
        x = rand64(rng, 4, 6)
        s = ad.softmax(x)
        assert np.allclose(s.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_interpolate_constant_stays_constant(self):
        x = t64(np.full((2, 3, 5, 5), 4.25))
        y = ad.interpolate2d(x, (9, 7))
        assert np.allclose(y.data, 4.25, atol=1e-12)

    def test_conv2d_all_ones_center_is_nine(self):
        x = t64(np.ones((1, 1, 5, 5)))
        w = t64(np.ones((1, 1, 3, 3)))
        out = ad.conv2d(x, w, stride=1, padding=0)
        assert out.shape == (1, 1, 3, 3)
        assert out.data[0, 0, 1, 1] == 9.0

    def test_parameter_requires_name(self):
        with pytest.raises(ConfigError):
            ad.Parameter(np.zeros(3), "")


class TestGradCheckPrimitives:
    """Every primitive passes central finite differences on randomized shapes."""

    def test_linear_function_is_exact(self, rng):
        x = rand64(rng, 6)
        w = t64(rng.standard_normal(6), grad=False)
        err = ad.grad_check(lambda a: ad.tsum(ad.mul(a, w)), [x], step=1e-3)
        assert err <= 1e-10

    @pytest.mark.parametrize("seed", range(20))
    def test_elementwise_ops(self, seed):
        rng = np.random.default_rng(seed)
        shape = tuple(rng.integers(1, 5, size=2))
        x = t64(rng.standard_normal(shape) + 3.0)  # bounded away from relu/abs/sqrt kinks
        y = t64(rng.standard_normal(shape) + 5.0)

        def f(a, b):
            z = ad.add(ad.mul(a, b), ad.div(a, b))
            z = ad.sub(z, ad.scale(b, 0.5))
            z = ad.add(ad.sqrt(ad.absolute(z)), ad.relu(z))
            z = ad.add(z, ad.leaky_relu(z, 0.2))
            return ad.tmean(z)

        assert ad.grad_check(f, [x, y], step=1e-4) <= 1e-5

    @pytest.mark.parametrize("seed", range(5))
    def test_softmax_layernorm_matmul(self, seed):
        rng = np.random.default_rng(100 + seed)
        x = t64(rng.standard_normal((2, 3, 4)))
        w = t64(rng.standard_normal((4, 4)))
        gamma = t64(np.ones((1, 1, 4)))
        beta = t64(np.zeros((1, 1, 4)))

        def f(a, b, g, bt):
            h = ad.layer_norm(a, g, bt)
            h = ad.matmul(h, b)
            h = ad.softmax(h)
            return ad.tmean(ad.mul(h, h))

        assert ad.grad_check(f, [x, w, gamma, beta], step=1e-4) <= 1e-5

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
    def test_conv2d(self, stride, padding, rng):
        x = t64(rng.standard_normal((2, 3, 6, 5)))
        w = t64(rng.standard_normal((4, 3, 3, 3)) * 0.5)
        f = lambda a, b: ad.tmean(ad.conv2d(a, b, stride=stride, padding=padding))
        assert ad.grad_check(f, [x, w], step=1e-4) <= 1e-5

    @pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1)])
    def test_conv3d(self, stride, padding, rng):
        x = t64(rng.standard_normal((2, 2, 4, 5, 4)))
        w = t64(rng.standard_normal((3, 2, 3, 3, 3)) * 0.5)

        def f(a, b):
            h = ad.conv3d(a, b, stride=stride, padding=padding)
            return ad.tmean(ad.mul(h, h))

        assert ad.grad_check(f, [x, w], step=1e-4) <= 1e-5

    def test_conv2d_stack(self, rng):
        x = t64(rng.standard_normal((2, 3, 2, 5, 5)))
        w = t64(rng.standard_normal((3, 4, 2, 3, 3)) * 0.5)
        f = lambda a, b: ad.tmean(ad.conv2d_stack(a, b, padding=1))
        assert ad.grad_check(f, [x, w], step=1e-4) <= 1e-5

    @pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1)])
    def test_conv3d_transpose(self, stride, padding, rng):
        y = t64(rng.standard_normal((2, 3, 2, 3, 3)))
        w = t64(rng.standard_normal((3, 2, 3, 3, 3)) * 0.5)

        def f(a, b):
            h = ad.conv3d_transpose(a, b, stride=stride, padding=padding)
            return ad.tmean(ad.mul(h, h))

        assert ad.grad_check(f, [y, w], step=1e-4) <= 1e-5

    def test_conv3d_transpose_is_adjoint_of_conv3d(self, rng):
        # <conv(x), y> == <x, conv_T(y)> for matching shapes
        x = np.asarray(rng.standard_normal((1, 2, 4, 4, 4)))
        w = t64(rng.standard_normal((3, 2, 3, 3, 3)), grad=False)
        y = np.asarray(rng.standard_normal((1, 3, 2, 2, 2)))
        cx = ad.conv3d(t64(x, grad=False), w, stride=2, padding=1).data
        cty = ad.conv3d_transpose(
            t64(y, grad=False), w, stride=2, padding=1, output_spatial=(4, 4, 4)
        ).data
        assert np.allclose((cx * y).sum(), (x * cty).sum(), rtol=1e-10)

    def test_upsample_interpolate_concat_permute_reshape(self, rng):
        x = t64(rng.standard_normal((1, 2, 2, 3, 3)))
        z = t64(rng.standard_normal((1, 2, 4, 6, 6)))

        def f(a, b):
            h = ad.upsample3d_nearest(a, 2)
            h = ad.concat([h, b], axis=1)
            h = ad.permute(h, (0, 2, 1, 3, 4))
            h = ad.reshape(h, (1, 4, 4, 36))
            h = ad.interpolate2d(h, (3, 5))
            return ad.tmean(ad.mul(h, h))

        assert ad.grad_check(f, [x, z], step=1e-4) <= 1e-5

    def test_three_layer_composition(self, rng):
        x = t64(rng.standard_normal((2, 1, 6, 6)))
        w1 = t64(rng.standard_normal((4, 1, 3, 3)) * 0.4)
        w2 = t64(rng.standard_normal((2, 4, 3, 3)) * 0.4)
        w3 = t64(rng.standard_normal((8, 6)) * 0.4)

        def f(a, b1, b2, b3):
            h = ad.leaky_relu(ad.conv2d(a, b1, padding=1), 0.2)
            h = ad.leaky_relu(ad.conv2d(h, b2, stride=2, padding=1), 0.2)
            h = ad.reshape(h, (2, 2 * 3 * 3, 1))
            h = ad.matmul(ad.reshape(h, (2, 3, 6)), ad.permute(b3, (1, 0)))
            return ad.tmean(ad.mul(h, h))

        assert ad.grad_check(f, [x, w1, w2, w3], step=1e-4) <= 1e-5

    def test_relu_away_from_kink(self, rng):
        x = t64(rng.standard_normal(10) + 4.0)
        assert ad.grad_check(lambda a: ad.tsum(ad.relu(a)), [x], step=1e-4) <= 1e-5

    def test_sampled_coordinates_subset(self, rng):
        x = t64(rng.standard_normal(100) + 3.0)
        err = ad.grad_check(
            lambda a: ad.tmean(ad.mul(a, a)), [x], step=1e-4, max_coords_per_input=10
        )
        assert err <= 1e-6


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        p1 = ad.Parameter(rng.standard_normal((3, 4)).astype(np.float32), "layer.w")
        p2 = ad.Parameter(np.zeros(4, dtype=np.float32), "layer.b")
        ad.save_checkpoint(tmp_path / "model", [p1, p2])
        loaded = ad.load_checkpoint(tmp_path / "model")
        assert set(loaded) == {"layer.w", "layer.b"}
        assert np.array_equal(loaded["layer.w"], p1.data)
        assert loaded["layer.b"].shape == (4,)

    def test_duplicate_names_rejected(self, tmp_path):
        p = ad.Parameter(np.zeros(2, dtype=np.float32), "w")
        q = ad.Parameter(np.ones(2, dtype=np.float32), "w")
        with pytest.raises(ConfigError):
            ad.save_checkpoint(tmp_path / "dup", [p, q])
