"""Quantitative evaluation: SSIM, PSNR, RMSE, uptake ratios, defect size, FWHM.

All functions are pure numpy and accept VolumeGrids or plain (nz, ny, nx)
arrays.  The SSIM here is the independent evaluation path (Gaussian window,
valid region); the differentiable twin lives in the losses module.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .datamodel import LabeledMasks, VolumeGrid
from .errors import ConfigError, NumericalError
from .losses import gaussian_window, pick_window


def _to3d(x):
    if isinstance(x, VolumeGrid):
        return x.grid3d().astype(np.float64)
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 3:
        raise ConfigError(f"expected a 3-D volume, got shape {arr.shape}")
    return arr


def _mask1d(mask, n):
    arr = np.asarray(mask, dtype=bool).reshape(-1)
    if arr.size != n:
        raise ConfigError(f"mask length {arr.size} does not match volume size {n}")
    return arr


def _blur_valid(arr, win, sigma):
    g = gaussian_window(win, sigma)
    out = arr
    for ax in range(3):
        out = ndimage.correlate1d(out, g, axis=ax, mode="constant", cval=0.0)
    r = win // 2
    return out[r:-r or None, r:-r or None, r:-r or None]


def ssim(x, y, peak=None, window=11, sigma=1.5, k1=0.01, k2=0.03) -> float:
    """Mean local SSIM over the valid region of a 3D Gaussian window."""
    a, b = _to3d(x), _to3d(y)
    if a.shape != b.shape:
        raise ConfigError(f"ssim shape mismatch {a.shape} vs {b.shape}")
    if peak is None:
        peak = float(b.max())
    peak = float(peak)
    if peak <= 0:
        raise ConfigError("ssim needs peak > 0")
    win = pick_window(a.shape, window)
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    blur = lambda arr: _blur_valid(arr, win, sigma)
    mu_x, mu_y = blur(a), blur(b)
    var_x = blur(a * a) - mu_x * mu_x
    var_y = blur(b * b) - mu_y * mu_y
    cov = blur(a * b) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def rmse(x, y) -> float:
    a, b = _to3d(x), _to3d(y)
    if a.shape != b.shape:
        raise ConfigError(f"rmse shape mismatch {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def psnr(x, y, peak=None) -> float:
    """20 log10(peak) - 20 log10(rmse); +inf for identical volumes."""
    a, b = _to3d(x), _to3d(y)
    if peak is None:
        peak = float(b.max())
    peak = float(peak)
    if peak <= 0:
        raise ConfigError("psnr needs peak > 0")
    r = rmse(a, b)
    if r == 0.0:
        return math.inf
    return 20.0 * math.log10(peak) - 20.0 * math.log10(r)


def mbp_ratio(x, masks: LabeledMasks) -> float:
    """Mean myocardial uptake / mean blood-pool uptake (denominator floored)."""
    a = _to3d(x).reshape(-1)
    myo = _mask1d(masks.myocardium, a.size)
    pool = _mask1d(masks.blood_pool, a.size)
    if not myo.any() or not pool.any():
        raise ConfigError("mbp_ratio needs nonempty myocardium and blood-pool masks")
    return float(a[myo].mean() / max(a[pool].mean(), 1e-8))


def defect_size(x, myocardium_mask) -> float:
    """Percent of myocardial voxels below half of the top-decile mean uptake.

    Transparent surrogate for clinical defect quantification: normalize the
    masked voxels by the mean of their top decile and report
    100 * fraction(< 0.5).  Not a clinically validated measure.
    """
    a = _to3d(x).reshape(-1)
    myo = _mask1d(myocardium_mask, a.size)
    if not myo.any():
        raise ConfigError("defect_size needs a nonempty myocardium mask")
    vals = a[myo]
    top = vals[vals >= np.quantile(vals, 0.9)]
    norm = float(top.mean())
    if norm <= 0:
        return 0.0
    frac = float(np.mean(vals / norm < 0.5))
    return 100.0 * frac


def fwhm(profile, spacing) -> float:
    """Full width at half maximum of a 1D profile, linear interpolation.

    Half level is baseline + (max - baseline)/2 with baseline = min(profile).
    The crossings nearest the global maximum are used.
    """
    p = np.asarray(profile, dtype=np.float64).reshape(-1)
    spacing = float(spacing)
    if p.size < 3:
        raise ConfigError("fwhm needs at least 3 samples")
    if spacing <= 0:
        raise ConfigError("fwhm needs spacing > 0")
    lo, hi = float(p.min()), float(p.max())
    if hi <= lo:
        raise NumericalError("fwhm undefined for a flat profile")
    half = lo + 0.5 * (hi - lo)
    peak = int(np.argmax(p))

    def cross(start, step):
        i = start
        while 0 <= i + step < p.size:
            j = i + step
            if p[j] < half:
                frac = (p[i] - half) / (p[i] - p[j])
                return i + step * frac
            i = j
        return float(i)  # profile never drops below half on this side

    left = cross(peak, -1)
    right = cross(peak, +1)
    return (right - left) * spacing


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    """Per-subject metric rows plus recomputable aggregates, keyed by method."""

    rows: list = field(default_factory=list)  # dicts: subject_id, method, metric values

    def add(self, subject_id, method, values: dict):
        row = {"subject_id": str(subject_id), "method": str(method)}
        row.update({k: float(v) for k, v in values.items()})
        self.rows.append(row)

    def methods(self):
        return sorted({r["method"] for r in self.rows})

    def aggregate(self):
        out = {}
        for method in self.methods():
            rows = [r for r in self.rows if r["method"] == method]
            keys = [k for k in rows[0] if k not in ("subject_id", "method")]
            agg = {}
            for k in keys:
                vals = np.array([r[k] for r in rows if np.isfinite(r[k])])
                if vals.size:
                    agg[k] = {"mean": float(vals.mean()), "std": float(vals.std(ddof=0)),
                              "n": int(vals.size)}
            out[method] = agg
        return out

    def to_json(self):
        return {"rows": self.rows, "aggregate": self.aggregate()}

    def to_csv(self):
        if not self.rows:
            return "subject_id,method\n"
        keys = ["subject_id", "method"] + [
            k for k in self.rows[0] if k not in ("subject_id", "method")
        ]
        lines = [",".join(keys)]
        for r in self.rows:
            lines.append(",".join(str(r.get(k, "")) for k in keys))
        return "\n".join(lines) + "\n"
