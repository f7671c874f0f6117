"""Maximum-likelihood expectation-maximization reconstruction.

The multiplicative update

    x_j <- (x_j / s_j) * sum_i a_ij * y_i / (sum_k a_ik x_k + eps),
    s_j = sum_i a_ij,

run for a fixed iteration count from a uniform positive start.  Voxels with
zero sensitivity (s_j = 0) are frozen at 0.  The stabilizer eps defaults to
1e-8 * max(y); zero is accepted for exact closed-form checks on toy systems.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datamodel import ProjectionSet, VolumeGrid
from .errors import ConfigError, NumericalError
from .geometry import SystemMatrix


@dataclass(frozen=True)
class MLEMConfig:
    n_iters: int = 50
    epsilon: float | None = None  # None -> 1e-8 * max(y)
    initial_value: float = 1.0

    def __post_init__(self):
        if self.n_iters < 1:
            raise ConfigError(f"n_iters must be >= 1, got {self.n_iters}")
        if self.epsilon is not None and self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.initial_value <= 0:
            raise ConfigError(f"initial_value must be > 0, got {self.initial_value}")


def _resolve_eps(epsilon, y):
    if epsilon is not None:
        return float(epsilon)
    ymax = float(y.max()) if y.size else 0.0
    return 1e-8 * ymax if ymax > 0 else 1e-12


def _check_dims(S: SystemMatrix, y: ProjectionSet):
    if y.n_bins != S.n_rows or (y.n_modules, y.nu, y.nv) != (S.n_modules, S.nu, S.nv):
        raise ConfigError(
            f"projection dims (angles={y.n_angles}, modules={y.n_modules}, nu={y.nu}, "
            f"nv={y.nv}) do not match operator rows {S.n_rows}"
        )


def mlem_reconstruct(S: SystemMatrix, y: ProjectionSet, cfg: MLEMConfig = MLEMConfig(),
                     callback=None) -> VolumeGrid:
    """Run cfg.n_iters MLEM updates; returns a nonnegative activity volume.

    callback, if given, is invoked as callback(iteration, x_array) after each
    update (used by monotonicity checks).
    """
    _check_dims(S, y)
    yv = y.values
    eps = _resolve_eps(cfg.epsilon, yv)
    sens = S.sensitivity()
    live = sens > 0
    if not np.any(live):
        raise NumericalError("all-zero sensitivity image: no voxel is seen by any bin")

    x = np.where(live, float(cfg.initial_value), 0.0)
    inv_sens = np.zeros_like(sens)
    inv_sens[live] = 1.0 / sens[live]
    m = S.matrix
    for it in range(cfg.n_iters):
        yhat = m @ x
        ratio = yv / (yhat + eps) if eps > 0 else np.divide(
            yv, yhat, out=np.zeros_like(yv), where=yhat > 0
        )
        x = x * inv_sens * (m.T @ ratio)
        np.maximum(x, 0.0, out=x)
        if callback is not None:
            callback(it, x)
    nx, ny, nz = S.grid_shape
    return VolumeGrid(nx, ny, nz, S.voxel_size, x)


def poisson_loglik(S: SystemMatrix, x, y: ProjectionSet, epsilon=None) -> float:
    """sum_i [ y_i * ln(yhat_i + eps) - yhat_i ] with yhat = S @ x.

    x may be a VolumeGrid or a flat array in grid order.  Terms with
    y_i = 0 contribute only -yhat_i, so the result is finite for any
    nonnegative inputs.
    """
    _check_dims(S, y)
    xv = x.values if isinstance(x, VolumeGrid) else np.asarray(x, dtype=np.float64).reshape(-1)
    if xv.size != S.n_cols:
        raise ConfigError(f"volume length {xv.size} does not match operator columns {S.n_cols}")
    yv = y.values
    eps = _resolve_eps(epsilon, yv)
    yhat = S.matrix @ xv
    shifted = yhat + eps
    terms = np.zeros_like(yv)
    pos = yv > 0
    if np.any(shifted[pos] <= 0):
        raise NumericalError("log-likelihood undefined: zero expected counts where y > 0 and eps = 0")
    terms[pos] = yv[pos] * np.log(shifted[pos])
    value = float(terms.sum() - yhat.sum())
    if not np.isfinite(value):
        raise NumericalError("log-likelihood evaluated to a non-finite value")
    return value


def nrmse(x, reference) -> float:
    """||x - reference||_2 / ||reference||_2 over flat volume values."""
    xv = x.values if isinstance(x, VolumeGrid) else np.asarray(x, dtype=np.float64).reshape(-1)
    rv = reference.values if isinstance(reference, VolumeGrid) else np.asarray(
        reference, dtype=np.float64
    ).reshape(-1)
    denom = float(np.linalg.norm(rv))
    if denom == 0:
        raise ConfigError("reference volume is identically zero")
    return float(np.linalg.norm(xv - rv)) / denom
