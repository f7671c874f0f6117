import numpy as np
import pytest

from fewspect import autodiff as ad
from fewspect.autodiff import Tensor
from fewspect.datamodel import VolumeGrid
from fewspect.errors import ConfigError
from fewspect.losses import (
    LossWeights,
    composite_loss,
    composite_loss_t,
    critic_objective_t,
    generator_objective_t,
    gradient_penalty_t,
    reference_stats,
    sobel_edges,
    sobel_edges_t,
    ssim_t,
)
from fewspect.model import ModelConfig, TransformerConfig, VolumeCritic
from fewspect.training import xavier_init


def vol(arr):
    arr = np.asarray(arr, dtype=np.float64)
    nz, ny, nx = arr.shape
    return VolumeGrid(nx, ny, nz, (1.0, 1.0, 1.0), arr.reshape(-1))


def sobel_oracle(grid, eps=0.0):
    """Dense 3x3x3 stencil evaluation with zero padding (independent path)."""
    smooth = np.array([1.0, 2.0, 1.0])
    deriv = np.array([-1.0, 0.0, 1.0])
    pad = np.pad(grid, 1)
    total = np.zeros_like(grid, dtype=np.float64)
    for axis in range(3):
        parts = [deriv if ax == axis else smooth for ax in range(3)]
        k = np.einsum("i,j,k->ijk", *parts)
        out = np.zeros_like(grid, dtype=np.float64)
        for dz in range(3):
            for dy in range(3):
                for dx in range(3):
                    out += k[dz, dy, dx] * pad[
                        dz : dz + grid.shape[0],
                        dy : dy + grid.shape[1],
                        dx : dx + grid.shape[2],
                    ]
        total += out * out
    return np.sqrt(total + eps)


def small_critic(channels=(4, 8), grid=(12, 12, 8), seed=0):
    cfg = ModelConfig(
        grid_shape=grid, n_modules=5, nu=8, nv=8,
        transformer=TransformerConfig(patch_size=4, embed_dim=16, n_heads=2, n_layers=1),
        slice_cnn_channels=(8, 4), unet_widths=(4, 8, 16), critic_channels=channels,
    )
    critic = VolumeCritic(cfg, dtype=np.float64)
    xavier_init(critic.params(), np.random.default_rng(seed))
    return critic


class TestLossWeights:
    def test_paper_defaults(self):
        w = LossWeights()
        assert (w.lambda_a, w.lambda_b, w.lambda_c, w.lambda_d) == (0.1, 0.005, 0.8, 0.1)

    def test_rejects_negative(self):
        with pytest.raises(ConfigError):
            LossWeights(lambda_c=-0.1)


class TestSobel:
    def test_constant_volume_interior_zero(self):
        edges = sobel_edges(vol(np.full((6, 7, 8), 3.0)))
        interior = edges.grid3d()[1:-1, 1:-1, 1:-1]
        assert np.all(interior == 0)
        # zero padding makes the boundary shell nonzero
        assert edges.grid3d()[0].max() > 0

    def test_linear_ramp_gx_is_32(self):
        nz, ny, nx = 7, 7, 9
        ramp = np.tile(np.arange(nx, dtype=float), (nz, ny, 1))
        edges = sobel_edges(vol(ramp)).grid3d()
        interior = edges[1:-1, 1:-1, 1:-1]
        assert np.allclose(interior, 32.0, atol=1e-12)

    def test_step_function_peaks_at_plane(self):
        nz, ny, nx = 8, 8, 8
        step = np.zeros((nz, ny, nx))
        step[:, :, nx // 2 :] = 1.0
        edges = sobel_edges(vol(step)).grid3d()
        oracle = sobel_oracle(step)
        assert np.allclose(edges, oracle, atol=1e-12)
        profile = edges[4, 4, :]
        assert profile.argmax() in (nx // 2 - 1, nx // 2)

    def test_matches_oracle_on_random(self, rng):
        grid = rng.random((6, 5, 7))
        edges = sobel_edges(vol(grid)).grid3d()
        assert np.allclose(edges, sobel_oracle(grid), atol=1e-12)

    def test_tape_version_matches_numpy(self, rng):
        grid = rng.random((6, 6, 6))
        t = sobel_edges_t(Tensor(grid[None, None]))
        assert np.allclose(t.data[0, 0], sobel_edges(vol(grid)).grid3d(), atol=1e-6)

    def test_too_small_volume_rejected(self):
        with pytest.raises(ConfigError):
            sobel_edges(vol(np.zeros((2, 4, 4))))


class TestSSIM:
    def test_self_similarity_is_one(self, rng):
        x = Tensor(rng.random((1, 1, 12, 12, 12)))
        assert float(ssim_t(x, x, peak=1.0).data) == 1.0

    def test_gradcheck(self, rng):
        x = Tensor(rng.random((1, 1, 6, 6, 6)), requires_grad=True)
        y = Tensor(rng.random((1, 1, 6, 6, 6)))
        err = ad.grad_check(
            lambda a: ssim_t(a, y, peak=1.0, window=5), [x], step=1e-5,
            max_coords_per_input=24,
        )
        assert err <= 1e-6


class TestCompositeLoss:
    def test_identity_is_zero(self, rng):
        x = vol(rng.random((12, 12, 12)))
        assert composite_loss(x, x) == 0.0

    def test_constant_volumes_closed_form(self):
        # X = 0, Y = 1: MAE = 1; SSIM has zero variances so the closed form
        # is (2 mu_x mu_y + C1)/(mu_x^2 + mu_y^2 + C1); the edge term is the
        # mean Sobel magnitude of the constant-1 volume (boundary shell only)
        shape = (12, 13, 14)
        x = vol(np.zeros(shape))
        y = vol(np.ones(shape))
        w = LossWeights()
        c1 = (0.01 * 1.0) ** 2
        ssim0 = c1 / (1.0 + c1)
        edge_term = float(
            np.mean(
                np.abs(
                    sobel_oracle(np.ones(shape), eps=1e-16)
                    - sobel_oracle(np.zeros(shape), eps=1e-16)
                )
            )
        )
        expected = 1.0 + w.lambda_c * (1.0 - ssim0) + w.lambda_d * edge_term
        got = composite_loss(x, y, w)
        assert abs(got - expected) < 1e-9

    def test_reference_stats_path_matches_direct(self, rng):
        xa = rng.random((12, 12, 12))
        ya = rng.random((12, 12, 12))
        xt = Tensor(xa[None, None])
        yt = Tensor(ya[None, None])
        w = LossWeights()
        direct, _ = composite_loss_t(xt, yt, w, peak=1.0)
        stats = reference_stats(ya)
        ref = {k: stats[k][None] for k in stats}
        cached, _ = composite_loss_t(xt, yt, w, peak=1.0, ref=ref)
        assert abs(float(direct.data) - float(cached.data)) < 1e-12

    def test_gradcheck_composite(self, rng):
        x = Tensor(rng.random((1, 1, 6, 6, 6)), requires_grad=True)
        y = Tensor(rng.random((1, 1, 6, 6, 6)))
        w = LossWeights()
        err = ad.grad_check(
            lambda a: composite_loss_t(a, y, w, peak=1.0)[0], [x], step=1e-5,
            max_coords_per_input=20,
        )
        assert err <= 1e-5

    def test_shape_mismatch(self, rng):
        with pytest.raises(ConfigError):
            composite_loss(vol(rng.random((4, 4, 4))), vol(rng.random((4, 4, 5))))

    @pytest.mark.parametrize("seed", range(8))
    def test_nonnegative_for_random_pairs(self, seed):
        rng = np.random.default_rng(seed)
        x = vol(rng.random((6, 6, 6)) * rng.uniform(0.1, 5))
        y = vol(rng.random((6, 6, 6)) * rng.uniform(0.1, 5))
        assert composite_loss(x, y) >= 0.0
        assert composite_loss(x, x) == 0.0


class TestGeneratorObjective:
    def test_perfect_generator_leaves_only_adversarial(self, rng):
        target = rng.random((2, 1, 12, 12, 8))
        t = Tensor(target)
        critic = small_critic()
        scores = critic.score(Tensor(target))
        w = LossWeights()
        total, terms = generator_objective_t(t, t, t, scores, w)
        expected = -w.lambda_b * float(scores.data.mean())
        assert abs(float(total.data) - expected) < 1e-12
        assert terms["loss_main"] == 0.0 and terms["loss_intermediate"] == 0.0

    def test_arithmetic_composition_with_zero_critic(self, rng):
        final = Tensor(rng.random((1, 1, 12, 12, 8)))
        inter = Tensor(rng.random((1, 1, 12, 12, 8)))
        target = Tensor(rng.random((1, 1, 12, 12, 8)))
        zero_scores = Tensor(np.zeros(1))
        w = LossWeights()
        total, terms = generator_objective_t(final, inter, target, zero_scores, w)
        assert abs(
            float(total.data) - (terms["loss_main"] + w.lambda_a * terms["loss_intermediate"])
        ) < 1e-12


class TestGradientPenalty:
    def test_unit_norm_linear_critic_has_zero_penalty(self, rng):
        # single conv layer, no interior activations -> D is linear in x
        critic = small_critic(channels=(1,), grid=(12, 12, 8))
        g0 = critic.input_gradient(np.zeros((1, 1, 8, 12, 12)))
        norm = float(np.sqrt((g0.data**2).sum()))
        critic._params["conv0.weight"].data[...] /= norm
        x = rng.random((3, 1, 8, 12, 12))
        y = rng.random((3, 1, 8, 12, 12))
        pen = gradient_penalty_t(critic, x, y, rng.uniform(size=3))
        assert abs(float(pen.data)) < 1e-6

    def test_constant_critic_penalty_is_one(self, rng):
        critic = small_critic(channels=(1,), grid=(12, 12, 8))
        critic._params["conv0.weight"].data[...] = 0.0
        critic._params["conv0.bias"].data[...] = 1.7
        x = rng.random((2, 1, 8, 12, 12))
        y = rng.random((2, 1, 8, 12, 12))
        w = LossWeights()
        total, terms = critic_objective_t(critic, x, y, rng.uniform(size=2), w)
        assert abs(terms["score_fake"] - terms["score_real"]) < 1e-12
        assert abs(terms["penalty"] - 1.0) < 1e-6
        assert abs(float(total.data) - w.lambda_gp) < 1e-5

    def test_real_equals_fake_linear_critic_objective_zero(self, rng):
        critic = small_critic(channels=(1,), grid=(12, 12, 8))
        g0 = critic.input_gradient(np.zeros((1, 1, 8, 12, 12)))
        critic._params["conv0.weight"].data[...] /= float(np.sqrt((g0.data**2).sum()))
        x = rng.random((2, 1, 8, 12, 12))
        total, _ = critic_objective_t(critic, x, x.copy(), rng.uniform(size=2), LossWeights())
        assert abs(float(total.data)) < 1e-6

    def test_penalty_gradcheck_wrt_weights(self, rng):
        critic = small_critic(channels=(4, 8), grid=(12, 12, 8), seed=3)
        real = rng.random((2, 1, 8, 12, 12))
        fake = rng.random((2, 1, 8, 12, 12))
        u = rng.uniform(size=2)

        def f(*params):
            return gradient_penalty_t(critic, real, fake, u)

        err = ad.grad_check(f, critic.params(), step=1e-5, max_coords_per_input=6, seed=2)
        assert err <= 1e-5

    def test_swap_symmetry_distributional(self):
        critic = small_critic(channels=(4, 8), grid=(12, 12, 8), seed=5)
        rng = np.random.default_rng(11)
        x = rng.random((1, 1, 8, 12, 12))
        y = rng.random((1, 1, 8, 12, 12))
        with ad.no_grad():
            a = np.array([
                float(gradient_penalty_t(critic, x, y, rng.uniform(size=1)).data)
                for _ in range(1000)
            ])
            b = np.array([
                float(gradient_penalty_t(critic, y, x, rng.uniform(size=1)).data)
                for _ in range(1000)
            ])
        se = np.sqrt(a.var(ddof=1) / a.size + b.var(ddof=1) / b.size)
        assert abs(a.mean() - b.mean()) <= 2 * se
