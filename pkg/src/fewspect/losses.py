"""Training objectives: composite image loss, generator and critic objectives.

The composite loss between volumes X and Y is

    MAE(X, Y) + lambda_c * (1 - SSIM(X, Y)) + lambda_d * MAE(SO(X), SO(Y))

with SO the 3D Sobel gradient magnitude (zero-padded).  The generator
objective adds supervision on the projection-domain intermediate plus a
small adversarial term; the critic trains with the gradient penalty,
differentiated through an explicit transposed-convolution chain.

Tensor-valued entry points (suffix _t) build the differentiable graph;
the plain functions take VolumeGrids and return floats.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import Tensor
from .datamodel import VolumeGrid
from .errors import ConfigError
from .model import VolumeCritic

_EDGE_EPS = 1e-8  # stabilizer inside the differentiable sqrt of the edge magnitude


@dataclass(frozen=True)
class LossWeights:
    lambda_a: float = 0.1
    lambda_b: float = 0.005
    lambda_c: float = 0.8
    lambda_d: float = 0.1
    lambda_gp: float = 10.0

    def __post_init__(self):
        for name in ("lambda_a", "lambda_b", "lambda_c", "lambda_d", "lambda_gp"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")


# ---------------------------------------------------------------------------
# Sobel edges
# ---------------------------------------------------------------------------

_SMOOTH = np.array([1.0, 2.0, 1.0])
_DERIV = np.array([-1.0, 0.0, 1.0])


def _sobel_kernel(axis):
    """3x3x3 kernel, derivative along `axis` (0=z,1=y,2=x in grid order)."""
    parts = [_DERIV if ax == axis else _SMOOTH for ax in range(3)]
    return np.einsum("i,j,k->ijk", parts[0], parts[1], parts[2])


def sobel_edges(v: VolumeGrid) -> VolumeGrid:
    """Gradient-magnitude volume from separable 3D Sobel kernels, zero-padded."""
    if min(v.shape) < 3:
        raise ConfigError(f"sobel_edges needs >= 3 voxels per axis, got {v.shape}")
    g = v.grid3d().astype(np.float64)
    total = np.zeros_like(g)
    for axis in range(3):
        d = g
        for ax in range(3):
            k = _DERIV if ax == axis else _SMOOTH
            d = ndimage.correlate1d(d, k, axis=ax, mode="constant", cval=0.0)
        total += d * d
    return v.with_values(np.sqrt(total).reshape(-1))


def sobel_edges_t(x: Tensor) -> Tensor:
    """Differentiable Sobel magnitude of (N,1,D,H,W); sqrt stabilized."""
    dtype = x.data.dtype
    total = None
    for axis in range(3):
        w = Tensor(_sobel_kernel(axis).astype(dtype)[None, None])
        d = ad.conv3d(x, w, stride=1, padding=1)
        sq = ad.mul(d, d)
        total = sq if total is None else ad.add(total, sq)
    return ad.sqrt(ad.add(total, float(_EDGE_EPS) ** 2))


# ---------------------------------------------------------------------------
# SSIM (differentiable; the metrics module has the independent numpy path)
# ---------------------------------------------------------------------------

def gaussian_window(size=11, sigma=1.5):
    half = (size - 1) / 2.0
    xs = np.arange(size) - half
    g = np.exp(-(xs**2) / (2.0 * sigma**2))
    return g / g.sum()


def pick_window(shape, size=11):
    """Largest odd window <= requested size fitting every axis."""
    w = min(int(size), min(int(s) for s in shape))
    if w % 2 == 0:
        w -= 1
    if w < 1:
        raise ConfigError(f"volume {shape} too small for any SSIM window")
    return w


def _blur_valid_t(x, win, sigma):
    """Separable Gaussian filter of (N,1,D,H,W), valid region only."""
    g = gaussian_window(win, sigma)
    out = x
    for axis in (2, 3, 4):
        out = ad.conv1d_axis(out, g, axis)
    return out


def ssim_t(x: Tensor, y: Tensor, peak, window=11, sigma=1.5, k1=0.01, k2=0.03) -> Tensor:
    """Mean local SSIM of (N,1,D,H,W) pairs as a differentiable scalar."""
    if x.data.shape != y.data.shape:
        raise ConfigError(f"ssim shape mismatch {x.data.shape} vs {y.data.shape}")
    peak = float(peak)
    if peak <= 0:
        raise ConfigError("ssim needs peak > 0")
    win = pick_window(x.data.shape[2:], window)
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    blur = lambda t: _blur_valid_t(t, win, sigma)
    mu_x = blur(x)
    mu_y = blur(y)
    mu_xx = ad.mul(mu_x, mu_x)
    mu_yy = ad.mul(mu_y, mu_y)
    mu_xy = ad.mul(mu_x, mu_y)
    var_x = ad.sub(blur(ad.mul(x, x)), mu_xx)
    var_y = ad.sub(blur(ad.mul(y, y)), mu_yy)
    cov = ad.sub(blur(ad.mul(x, y)), mu_xy)
    num = ad.mul(ad.add(ad.scale(mu_xy, 2.0), c1), ad.add(ad.scale(cov, 2.0), c2))
    den = ad.mul(ad.add(ad.add(mu_xx, mu_yy), c1), ad.add(ad.add(var_x, var_y), c2))
    return ad.tmean(ad.div(num, den))


# ---------------------------------------------------------------------------
# Composite loss and objectives
# ---------------------------------------------------------------------------

def _mae_t(a, b):
    return ad.tmean(ad.absolute(ad.sub(a, b)))


def reference_stats(y3d, window=11, sigma=1.5):
    """Precompute the constant reference-side pieces of the composite loss.

    y3d is one (D,H,W) reference volume.  Returns dict of arrays: blurred
    mean, blurred variance (valid region), and the stabilized Sobel
    magnitude, exactly as the differentiable path would compute them.
    """
    arr = np.asarray(y3d, dtype=np.float64)[None, None]
    win = pick_window(arr.shape[2:], window)
    with ad.no_grad():
        yt = Tensor(arr)
        mu = _blur_valid_t(yt, win, sigma).data
        var = _blur_valid_t(ad.mul(yt, yt), win, sigma).data - mu * mu
        sob = sobel_edges_t(yt).data
    return {"mu": mu[0], "var": var[0], "sobel": sob[0]}


def _ssim_vs_reference_t(x, y_const, ref_mu, ref_var, peak, window=11, sigma=1.5,
                         k1=0.01, k2=0.03):
    """SSIM of x against a fixed reference with precomputed moments."""
    win = pick_window(x.data.shape[2:], window)
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    blur = lambda t: _blur_valid_t(t, win, sigma)
    mu_x = blur(x)
    mu_xx = ad.mul(mu_x, mu_x)
    var_x = ad.sub(blur(ad.mul(x, x)), mu_xx)
    mu_xy = ad.mul(mu_x, ref_mu)
    cov = ad.sub(blur(ad.mul(x, y_const)), mu_xy)
    num = ad.mul(ad.add(ad.scale(mu_xy, 2.0), c1), ad.add(ad.scale(cov, 2.0), c2))
    den = ad.mul(
        ad.add(ad.add(mu_xx, ad.mul(ref_mu, ref_mu)), c1),
        ad.add(ad.add(var_x, ref_var), c2),
    )
    return ad.tmean(ad.div(num, den))


def composite_loss_t(x: Tensor, y: Tensor, w: LossWeights, peak=None, ref=None):
    """Differentiable composite loss on (N,1,D,H,W) volumes.

    peak defaults to max(|y|) (detached).  ref, if given, holds stacked
    precomputed reference constants ({"mu", "var", "sobel"}, leading N axis)
    so the y-side blurs and edges are not rebuilt every step.
    Returns (total, terms dict of floats).
    """
    if x.data.shape != y.data.shape:
        raise ConfigError(f"loss shape mismatch {x.data.shape} vs {y.data.shape}")
    if peak is None:
        peak = max(float(np.abs(y.data).max()), 1e-8)
    mae = _mae_t(x, y)
    if ref is None:
        ssim_loss = ad.sub(1.0, ssim_t(x, y, peak))
        edges_y = sobel_edges_t(y)
    else:
        dtype = x.data.dtype
        ssim_loss = ad.sub(
            1.0,
            _ssim_vs_reference_t(
                x, y,
                Tensor(np.ascontiguousarray(ref["mu"], dtype=dtype)),
                Tensor(np.ascontiguousarray(ref["var"], dtype=dtype)),
                float(peak),
            ),
        )
        edges_y = Tensor(np.ascontiguousarray(ref["sobel"], dtype=dtype))
    edges = _mae_t(sobel_edges_t(x), edges_y)
    total = ad.add(ad.add(mae, ad.scale(ssim_loss, w.lambda_c)), ad.scale(edges, w.lambda_d))
    terms = {
        "mae": float(mae.data),
        "ssim_loss": float(ssim_loss.data),
        "edge_mae": float(edges.data),
        "total": float(total.data),
    }
    return total, terms


def composite_loss(x: VolumeGrid, y: VolumeGrid, w: LossWeights = LossWeights()) -> float:
    """Composite loss between two volumes (non-differentiable convenience)."""
    if x.shape != y.shape:
        raise ConfigError(f"loss shape mismatch {x.shape} vs {y.shape}")
    as_t = lambda v: Tensor(v.grid3d()[None, None].astype(np.float64))
    with ad.no_grad():
        total, _ = composite_loss_t(as_t(x), as_t(y), w)
    return float(total.data)


def generator_objective_t(final_t, img_p_t, target_t, critic_scores_t, w: LossWeights,
                          peak=None, ref=None):
    """Full generator objective: supervised terms minus the adversarial score.

    final_t, img_p_t, target_t: (N,1,D,H,W) tensors; critic_scores_t: (N,)
    scores of the final output.  Returns (total, terms).
    """
    main, main_terms = composite_loss_t(final_t, target_t, w, peak=peak, ref=ref)
    inter, inter_terms = composite_loss_t(img_p_t, target_t, w, peak=peak, ref=ref)
    adv = ad.tmean(critic_scores_t)
    total = ad.sub(ad.add(main, ad.scale(inter, w.lambda_a)), ad.scale(adv, w.lambda_b))
    terms = {
        "loss_main": main_terms["total"],
        "loss_intermediate": inter_terms["total"],
        "adv_score": float(adv.data),
        "total": float(total.data),
        "main": main_terms,
        "intermediate": inter_terms,
    }
    return total, terms


def gradient_penalty_t(critic: VolumeCritic, real, fake, u):
    """mean over the batch of (||grad_xhat D(xhat)||_2 - 1)^2.

    real, fake: (N,1,D,H,W) arrays; u: (N,) uniform draws.  xhat is the
    per-sample convex combination u*real + (1-u)*fake.
    """
    real = np.asarray(real, dtype=critic.dtype)
    fake = np.asarray(fake, dtype=critic.dtype)
    if real.shape != fake.shape:
        raise ConfigError(f"gradient penalty batch mismatch {real.shape} vs {fake.shape}")
    u = np.asarray(u, dtype=critic.dtype).reshape(-1, 1, 1, 1, 1)
    x_hat = u * real + (1.0 - u) * fake
    g = critic.input_gradient(x_hat)
    sq = ad.tsum(ad.mul(g, g), axes=(1, 2, 3, 4))
    norms = ad.sqrt(ad.add(sq, 1e-16))
    excess = ad.sub(norms, 1.0)
    return ad.tmean(ad.mul(excess, excess))


def critic_objective_t(critic: VolumeCritic, real, fake, u, w: LossWeights):
    """Wasserstein critic loss with gradient penalty.

    real, fake: (N,1,D,H,W) constant arrays (fake already detached);
    returns (total, terms).
    """
    real = np.asarray(real, dtype=critic.dtype)
    fake = np.asarray(fake, dtype=critic.dtype)
    if real.shape[0] != fake.shape[0] or real.shape[0] == 0:
        raise ConfigError("critic objective needs equal, nonempty batches")
    score_fake = ad.tmean(critic.score(Tensor(fake)))
    score_real = ad.tmean(critic.score(Tensor(real)))
    penalty = gradient_penalty_t(critic, real, fake, u)
    total = ad.add(ad.sub(score_fake, score_real), ad.scale(penalty, w.lambda_gp))
    terms = {
        "score_fake": float(score_fake.data),
        "score_real": float(score_real.data),
        "penalty": float(penalty.data),
        "total": float(total.data),
    }
    return total, terms
