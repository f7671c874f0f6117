"""Procedural cardiac phantoms and Poisson acquisition simulation.

The left ventricle is an ellipsoidal shell (myocardium) around an
ellipsoidal blood pool, sitting in a soft background ellipsoid; an optional
perfusion defect is an angular sector of the wall over an axial band whose
uptake is pulled toward background by its severity.  Geometry is defined in
mm relative to the grid center, so masks are exact by construction.

simulate_acquisition scales each angular position's noiseless projection to
a requested expected-count total and draws independent Poisson counts.
make_dataset produces paired one-angle / four-angle subjects with MLEM
reconstructions, back projections, masks, and a JSON manifest; everything
is reproducible from the seeds.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .datamodel import (
    LabeledMasks,
    ProjectionSet,
    VolumeGrid,
    write_projections,
    write_volume,
)
from .errors import ConfigError, NumericalError
from .geometry import AngleSet, ScannerGeometry, SystemMatrix, back_project, build_system_matrix
from .mlem import MLEMConfig, mlem_reconstruct


@dataclass(frozen=True)
class DefectSpec:
    angle_start_deg: float = 0.0
    angle_extent_deg: float = 90.0
    axial_extent: float = 0.5  # fraction of the shell height, centered
    severity: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.severity <= 1.0):
            raise ConfigError(f"severity must lie in [0, 1], got {self.severity}")
        if not (0.0 < self.angle_extent_deg <= 360.0):
            raise ConfigError("angle_extent_deg must lie in (0, 360]")
        if not (0.0 < self.axial_extent <= 1.0):
            raise ConfigError("axial_extent must lie in (0, 1]")


@dataclass(frozen=True)
class PhantomSpec:
    center_mm: tuple = (0.0, 0.0, 0.0)
    semi_axes_mm: tuple = (14.0, 12.0, 16.0)
    wall_mm: float = 5.0
    myocardium_uptake: float = 4.0
    blood_pool_uptake: float = 1.0
    background_uptake: float = 0.2
    defect: DefectSpec | None = None
    seed: int = 0

    def __post_init__(self):
        if min(self.myocardium_uptake, self.blood_pool_uptake, self.background_uptake) < 0:
            raise ConfigError("uptakes must be >= 0")
        if self.wall_mm <= 0 or self.wall_mm >= min(self.semi_axes_mm):
            raise ConfigError(
                f"wall thickness {self.wall_mm} must be positive and smaller than "
                f"every semi-axis {self.semi_axes_mm}"
            )


@dataclass(frozen=True)
class AcquisitionSpec:
    counts_per_angle: float = 5e5
    seed: int = 0

    def __post_init__(self):
        if self.counts_per_angle <= 0:
            raise ConfigError("counts_per_angle must be > 0")


def _grid_coords_mm(grid_shape, voxel_size):
    nx, ny, nz = grid_shape
    sx, sy, sz = voxel_size
    xs = (np.arange(nx) + 0.5 - nx / 2.0) * sx
    ys = (np.arange(ny) + 0.5 - ny / 2.0) * sy
    zs = (np.arange(nz) + 0.5 - nz / 2.0) * sz
    return np.meshgrid(zs, ys, xs, indexing="ij")  # grid3d order (z, y, x)


def generate_phantom(spec: PhantomSpec, grid_shape, voxel_size):
    """Voxelize the phantom; returns (VolumeGrid, LabeledMasks)."""
    nx, ny, nz = (int(d) for d in grid_shape)
    vox = tuple(float(v) for v in voxel_size)
    extent = np.array([nx * vox[0], ny * vox[1], nz * vox[2]]) / 2.0
    c = np.asarray(spec.center_mm, dtype=np.float64)
    a = np.asarray(spec.semi_axes_mm, dtype=np.float64)
    if np.any(np.abs(c) + a > extent):
        raise ConfigError(
            f"shell (center {tuple(c)}, semi-axes {tuple(a)}) exceeds grid half-extent {tuple(extent)}"
        )
    zg, yg, xg = _grid_coords_mm((nx, ny, nz), vox)
    dx, dy, dz = xg - c[0], yg - c[1], zg - c[2]

    def inside(semi):
        return (dx / semi[0]) ** 2 + (dy / semi[1]) ** 2 + (dz / semi[2]) ** 2 <= 1.0

    outer = inside(a)
    inner = inside(a - spec.wall_mm)
    myo = outer & ~inner
    pool = inner
    torso = inside(extent * 0.95)

    values = np.where(torso, spec.background_uptake, 0.0)
    values[pool] = spec.blood_pool_uptake
    values[myo] = spec.myocardium_uptake

    defect_mask = np.zeros_like(myo)
    if spec.defect is not None:
        d = spec.defect
        theta = np.degrees(np.arctan2(dy, dx)) % 360.0
        rel = (theta - d.angle_start_deg) % 360.0
        sector = rel <= d.angle_extent_deg
        half_band = a[2] * d.axial_extent
        band = np.abs(dz) <= half_band
        defect_mask = myo & sector & band
        level = spec.background_uptake + (1.0 - d.severity) * (
            spec.myocardium_uptake - spec.background_uptake
        )
        values[defect_mask] = level

    vol = VolumeGrid(nx, ny, nz, vox, values.reshape(-1))
    masks = LabeledMasks(
        nx, ny, nz,
        myocardium=myo.reshape(-1),
        blood_pool=pool.reshape(-1),
        defect=defect_mask.reshape(-1),
    )
    return vol, masks


def simulate_acquisition(x_true: VolumeGrid, S: SystemMatrix, acq: AcquisitionSpec) -> ProjectionSet:
    """Poisson counts for every angular position in the operator.

    Each angle's noiseless projection is scaled so its expected total equals
    counts_per_angle, then per-bin independent Poisson draws are taken with
    the acquisition seed (angle-major order, deterministic).
    """
    if x_true.shape != S.grid_shape:
        raise ConfigError(f"volume dims {x_true.shape} do not match operator grid {S.grid_shape}")
    yhat = S.matrix @ x_true.values
    rows_per_angle = S.n_modules * S.nu * S.nv
    rng = np.random.default_rng(acq.seed)
    out = np.zeros_like(yhat)
    for a in range(S.n_angles):
        block = yhat[a * rows_per_angle : (a + 1) * rows_per_angle]
        total = float(block.sum())
        if total <= 0:
            if np.any(x_true.values > 0):
                raise NumericalError(
                    f"angle {a}: zero forward projection with nonzero requested counts"
                )
            continue  # zero activity: zero counts everywhere
        lam = block * (acq.counts_per_angle / total)
        out[a * rows_per_angle : (a + 1) * rows_per_angle] = rng.poisson(lam).astype(np.float64)
    return ProjectionSet(S.n_modules, S.nu, S.nv, S.angle_ids, out)


def _angle_slice(S: SystemMatrix, angles: AngleSet, a0, a1) -> SystemMatrix:
    """Row block of a joint operator covering angle indices [a0, a1)."""
    rows_per_angle = S.n_modules * S.nu * S.nv
    sub = S.matrix[a0 * rows_per_angle : a1 * rows_per_angle]
    return SystemMatrix(
        matrix=sub.tocsr(),
        n_angles=a1 - a0,
        n_modules=S.n_modules,
        nu=S.nu,
        nv=S.nv,
        grid_shape=S.grid_shape,
        voxel_size=S.voxel_size,
        angle_ids=S.angle_ids[a0:a1],
    )


def random_phantom_spec(rng, grid_shape, voxel_size, with_defect) -> PhantomSpec:
    """Randomized LV phantom within safe bounds for the given grid."""
    nx, ny, nz = grid_shape
    sx, sy, sz = voxel_size
    ext = np.array([nx * sx, ny * sy, nz * sz]) / 2.0
    semi = np.array(
        [
            rng.uniform(0.26, 0.36) * ext[0] * 2,
            rng.uniform(0.24, 0.34) * ext[1] * 2,
            rng.uniform(0.38, 0.52) * ext[2] * 2,
        ]
    )
    semi = np.minimum(semi, ext * 0.85)
    center = rng.uniform(-0.08, 0.08, size=3) * ext
    center = np.sign(center) * np.minimum(np.abs(center), ext - semi - 1e-6)
    wall = rng.uniform(0.3, 0.42) * float(semi.min())
    defect = None
    if with_defect:
        defect = DefectSpec(
            angle_start_deg=float(rng.uniform(0, 360)),
            angle_extent_deg=float(rng.uniform(60, 140)),
            axial_extent=float(rng.uniform(0.35, 0.7)),
            severity=float(rng.uniform(0.6, 1.0)),
        )
    return PhantomSpec(
        center_mm=tuple(center),
        semi_axes_mm=tuple(semi),
        wall_mm=float(wall),
        myocardium_uptake=float(rng.uniform(3.2, 4.8)),
        blood_pool_uptake=float(rng.uniform(0.8, 1.2)),
        background_uptake=float(rng.uniform(0.15, 0.3)),
        defect=defect,
    )


def make_dataset(n_subjects, geom: ScannerGeometry, angles: AngleSet, grid_shape, voxel_size,
                 out_dir, counts_per_angle=5e5, mlem_iters=50, base_seed=0,
                 system_matrix: SystemMatrix | None = None) -> dict:
    """Generate paired one-angle / four-angle subjects and write a manifest.

    Subjects alternate defect-free / defect (exactly half each for even n).
    Regeneration with the same seeds is byte-identical.
    """
    if n_subjects < 1:
        raise ConfigError("n_subjects must be >= 1")
    os.makedirs(out_dir, exist_ok=True)
    S_all = system_matrix if system_matrix is not None else build_system_matrix(
        geom, angles, grid_shape, voxel_size
    )
    S_one = _angle_slice(S_all, angles, 0, 1)
    mlem_cfg = MLEMConfig(n_iters=mlem_iters)

    subjects = []
    for i in range(n_subjects):
        ss = np.random.SeedSequence([base_seed, i])
        rng = np.random.default_rng(ss)
        with_defect = i % 2 == 1
        spec = random_phantom_spec(rng, grid_shape, voxel_size, with_defect)
        truth, masks = generate_phantom(spec, grid_shape, voxel_size)

        acq_seed = int(rng.integers(0, 2**31 - 1))
        y_all = simulate_acquisition(truth, S_all, AcquisitionSpec(counts_per_angle, acq_seed))
        n_bins_one = S_one.n_rows
        y_one = ProjectionSet(
            S_one.n_modules, S_one.nu, S_one.nv, S_one.angle_ids, y_all.values[:n_bins_one]
        )

        img_mlem = mlem_reconstruct(S_one, y_one, mlem_cfg)
        i_four = mlem_reconstruct(S_all, y_all, mlem_cfg)
        img_bp = back_project(S_one, y_one)

        sdir = os.path.join(out_dir, f"subject{i:03d}")
        os.makedirs(sdir, exist_ok=True)
        write_volume(os.path.join(sdir, "truth"), truth)
        write_projections(os.path.join(sdir, "proj_one"), y_one)
        write_projections(os.path.join(sdir, "proj_all"), y_all)
        write_volume(os.path.join(sdir, "mlem_one"), img_mlem)
        write_volume(os.path.join(sdir, "mlem_four"), i_four)
        write_volume(os.path.join(sdir, "bp_one"), img_bp)
        nx, ny, nz = grid_shape
        for name in ("myocardium", "blood_pool", "defect"):
            write_volume(
                os.path.join(sdir, f"mask_{name}"),
                VolumeGrid(nx, ny, nz, voxel_size, getattr(masks, name).astype(np.float64)),
            )
        subjects.append(
            {
                "subject_id": f"subject{i:03d}",
                "dir": f"subject{i:03d}",
                "has_defect": bool(with_defect),
                "acq_seed": acq_seed,
                "files": {
                    "truth": "truth",
                    "proj_one": "proj_one",
                    "proj_all": "proj_all",
                    "mlem_one": "mlem_one",
                    "mlem_four": "mlem_four",
                    "bp_one": "bp_one",
                    "mask_myocardium": "mask_myocardium",
                    "mask_blood_pool": "mask_blood_pool",
                    "mask_defect": "mask_defect",
                },
            }
        )

    manifest = {
        "format": "dataset",
        "n_subjects": n_subjects,
        "grid_shape": list(grid_shape),
        "voxel_size": [float(v) for v in voxel_size],
        "counts_per_angle": float(counts_per_angle),
        "mlem_iters": int(mlem_iters),
        "base_seed": int(base_seed),
        "n_angles": angles.n_angles,
        "subjects": subjects,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest
