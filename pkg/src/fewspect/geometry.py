"""Scanner geometry, angular positions, and the sparse projection operator.

The scanner is a set of pinhole detector modules on an arc, every pinhole
axis aimed at the field-of-view center.  A SystemMatrix row holds, for one
detector bin, the chord lengths of the bin's ray (bin center through the
pinhole aperture, extended into the volume) across every voxel it crosses,
scaled by an inverse-square distance factor.  The matrix transpose is the
back projector, so the forward/adjoint pair is exact by construction.

The reconstruction grid is centered on the base geometry's fov_center and
stays fixed across angular positions; multi-angle acquisitions stack the
per-angle matrices row-wise into one joint operator.
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .datamodel import ProjectionSet, VolumeGrid
from .errors import ConfigError, FormatError

log = logging.getLogger(__name__)

_AXIS_TOL = 1e-6


def _unit(v, name):
    v = np.asarray(v, dtype=np.float64).reshape(3)
    n = float(np.linalg.norm(v))
    if n < _AXIS_TOL:
        raise ConfigError(f"{name} has near-zero length")
    return v / n


@dataclass(frozen=True)
class DetectorModule:
    """One pinhole camera: aperture point plus a flat binned detector behind it."""

    aperture_pos: np.ndarray
    detector_center: np.ndarray
    detector_normal: np.ndarray
    u_axis: np.ndarray
    v_axis: np.ndarray
    nu: int
    nv: int
    pitch: float

    def __post_init__(self):
        for name in ("aperture_pos", "detector_center"):
            p = np.asarray(getattr(self, name), dtype=np.float64).reshape(3)
            p.setflags(write=False)
            object.__setattr__(self, name, p)
        normal = _unit(self.detector_normal, "detector_normal")
        u_axis = _unit(self.u_axis, "u_axis")
        v_axis = _unit(self.v_axis, "v_axis")
        for a, b, na, nb in (
            (u_axis, v_axis, "u_axis", "v_axis"),
            (u_axis, normal, "u_axis", "detector_normal"),
            (v_axis, normal, "v_axis", "detector_normal"),
        ):
            if abs(float(np.dot(a, b))) > _AXIS_TOL:
                raise ConfigError(f"{na} and {nb} are not orthogonal")
        for arr in (normal, u_axis, v_axis):
            arr.setflags(write=False)
        object.__setattr__(self, "detector_normal", normal)
        object.__setattr__(self, "u_axis", u_axis)
        object.__setattr__(self, "v_axis", v_axis)
        if int(self.nu) < 1 or int(self.nv) < 1:
            raise ConfigError(f"bin counts must be >= 1, got nu={self.nu}, nv={self.nv}")
        if float(self.pitch) <= 0:
            raise ConfigError(f"pitch must be > 0, got {self.pitch}")
        object.__setattr__(self, "nu", int(self.nu))
        object.__setattr__(self, "nv", int(self.nv))
        object.__setattr__(self, "pitch", float(self.pitch))

    def bin_center(self, iu, iv):
        du = (iu - (self.nu - 1) / 2.0) * self.pitch
        dv = (iv - (self.nv - 1) / 2.0) * self.pitch
        return self.detector_center + du * self.u_axis + dv * self.v_axis

    @property
    def focal_length(self):
        return float(np.linalg.norm(self.detector_center - self.aperture_pos))


@dataclass(frozen=True)
class ScannerGeometry:
    modules: tuple
    fov_center: np.ndarray
    fov_radius: float

    def __post_init__(self):
        modules = tuple(self.modules)
        if len(modules) < 1:
            raise ConfigError("geometry needs at least one module")
        center = np.asarray(self.fov_center, dtype=np.float64).reshape(3)
        center.setflags(write=False)
        radius = float(self.fov_radius)
        if radius <= 0:
            raise ConfigError(f"fov_radius must be > 0, got {radius}")
        for i, m in enumerate(modules):
            d = float(np.linalg.norm(m.aperture_pos - center))
            if d <= radius:
                raise ConfigError(f"module {i} aperture lies inside the FOV sphere")
            need = math.asin(radius / d)
            half_u = math.atan((m.nu * m.pitch / 2.0) / m.focal_length)
            half_v = math.atan((m.nv * m.pitch / 2.0) / m.focal_length)
            if min(half_u, half_v) < need - 1e-9:
                raise ConfigError(
                    f"module {i} aperture does not see the whole FOV sphere "
                    f"(needs half-angle {math.degrees(need):.2f} deg, has "
                    f"{math.degrees(min(half_u, half_v)):.2f} deg)"
                )
        object.__setattr__(self, "modules", modules)
        object.__setattr__(self, "fov_center", center)
        object.__setattr__(self, "fov_radius", radius)

    @property
    def n_modules(self):
        return len(self.modules)


@dataclass(frozen=True)
class AngleEntry:
    """One angular position: rotation about the grid z-axis plus a FOV displacement."""

    rotation_deg: float = 0.0
    fov_displacement: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "rotation_deg", float(self.rotation_deg))
        disp = tuple(float(x) for x in self.fov_displacement)
        if len(disp) != 3:
            raise ConfigError("fov_displacement must have three components")
        object.__setattr__(self, "fov_displacement", disp)

    @property
    def is_identity(self):
        return self.rotation_deg == 0.0 and all(d == 0.0 for d in self.fov_displacement)


@dataclass(frozen=True)
class AngleSet:
    entries: tuple

    def __post_init__(self):
        entries = tuple(self.entries)
        if len(entries) < 1:
            raise ConfigError("angle set needs at least one entry")
        if not entries[0].is_identity:
            raise ConfigError("first angle entry must be the identity (stationary position)")
        object.__setattr__(self, "entries", entries)

    @property
    def n_angles(self):
        return len(self.entries)

    @property
    def angle_ids(self):
        return tuple(f"pos{i}" for i in range(len(self.entries)))

    @staticmethod
    def stationary():
        return AngleSet((AngleEntry(),))

    @staticmethod
    def uniform(n_angles, step_deg):
        """n positions at k*step_deg rotations, zero displacement, identity first."""
        return AngleSet(tuple(AngleEntry(k * step_deg) for k in range(n_angles)))


@dataclass(frozen=True)
class GeometryConfig:
    """Module layout knobs: an arc of pinhole modules aimed at the FOV center."""

    n_modules: int = 19
    nu: int = 16
    nv: int = 16
    pitch_mm: float = 2.0
    arc_span_deg: float = 180.0
    arc_radius_mm: float = 90.0
    focal_mm: float = 45.0
    fov_center: tuple = (0.0, 0.0, 0.0)
    fov_radius_mm: float = 24.0

    def __post_init__(self):
        if self.n_modules < 1:
            raise ConfigError(f"n_modules must be >= 1, got {self.n_modules}")
        if self.nu < 1 or self.nv < 1:
            raise ConfigError(f"bin counts must be >= 1, got nu={self.nu}, nv={self.nv}")
        if self.pitch_mm <= 0:
            raise ConfigError(f"pitch_mm must be > 0, got {self.pitch_mm}")
        if self.arc_radius_mm <= 0 or self.focal_mm <= 0:
            raise ConfigError("arc_radius_mm and focal_mm must be > 0")


DESK_GEOMETRY = GeometryConfig()

PAPER_GEOMETRY = GeometryConfig(
    nu=32,
    nv=32,
    pitch_mm=4.0,
    arc_radius_mm=210.0,
    focal_mm=80.0,
    fov_radius_mm=70.0,
)


def build_geometry(config: GeometryConfig) -> ScannerGeometry:
    """Place config.n_modules pinhole modules on an arc around the FOV center.

    Apertures sit on a circle of arc_radius_mm in the z=0 plane spanning
    arc_span_deg; detectors sit focal_mm behind each aperture, facing away
    from the center, with v_axis along +z.  Deterministic given config.
    """
    center = np.asarray(config.fov_center, dtype=np.float64)
    n = config.n_modules
    if n == 1:
        phis = [0.0]
    else:
        span = math.radians(config.arc_span_deg)
        phis = [-span / 2.0 + i * span / (n - 1) for i in range(n)]
    modules = []
    for phi in phis:
        radial = np.array([math.cos(phi), math.sin(phi), 0.0])
        aperture = center + config.arc_radius_mm * radial
        det_center = aperture + config.focal_mm * radial
        u_axis = np.array([-math.sin(phi), math.cos(phi), 0.0])
        v_axis = np.array([0.0, 0.0, 1.0])
        modules.append(
            DetectorModule(
                aperture_pos=aperture,
                detector_center=det_center,
                detector_normal=radial,
                u_axis=u_axis,
                v_axis=v_axis,
                nu=config.nu,
                nv=config.nv,
                pitch=config.pitch_mm,
            )
        )
    return ScannerGeometry(tuple(modules), center, config.fov_radius_mm)


def _rot_z(deg):
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def apply_angle(geom: ScannerGeometry, entry: AngleEntry) -> ScannerGeometry:
    """Rigidly rotate the module set about the (displaced) FOV center.

    The new FOV center is fov_center + displacement; module positions rotate
    about it by rotation_deg around the z-axis, axes rotate as vectors.
    """
    rot = _rot_z(entry.rotation_deg)
    center = geom.fov_center + np.asarray(entry.fov_displacement, dtype=np.float64)

    def pt(p):
        return center + rot @ (p - center)

    modules = tuple(
        DetectorModule(
            aperture_pos=pt(m.aperture_pos),
            detector_center=pt(m.detector_center),
            detector_normal=rot @ m.detector_normal,
            u_axis=rot @ m.u_axis,
            v_axis=rot @ m.v_axis,
            nu=m.nu,
            nv=m.nv,
            pitch=m.pitch,
        )
        for m in geom.modules
    )
    return ScannerGeometry(modules, center, geom.fov_radius)


@dataclass(frozen=True)
class SystemMatrix:
    """Sparse voxels-to-bins operator plus the dims it was built for."""

    matrix: sparse.csr_matrix
    n_angles: int
    n_modules: int
    nu: int
    nv: int
    grid_shape: tuple
    voxel_size: tuple
    angle_ids: tuple

    @property
    def n_rows(self):
        return self.matrix.shape[0]

    @property
    def n_cols(self):
        return self.matrix.shape[1]

    def sensitivity(self):
        """Per-voxel column sums (the MLEM sensitivity image)."""
        return np.asarray(self.matrix.sum(axis=0)).reshape(-1)


def _grid_origin(fov_center, grid_shape, voxel_size):
    dims = np.asarray(grid_shape, dtype=np.float64)
    vox = np.asarray(voxel_size, dtype=np.float64)
    return np.asarray(fov_center, dtype=np.float64) - dims * vox / 2.0


def _trace_ray(origin, direction, grid_min, grid_max, voxel_size, dims, plane_coords):
    """Chord lengths of one ray across the voxel grid.

    origin is the aperture; direction is unit length, so the ray parameter t
    is distance in mm from the aperture.  Returns (cols, weights) with
    weights = chord_length / t_mid^2.
    """
    with np.errstate(divide="ignore"):
        inv = np.where(direction != 0.0, 1.0 / direction, np.inf)
    t_lo = (grid_min - origin) * inv
    t_hi = (grid_max - origin) * inv
    t_near = np.minimum(t_lo, t_hi)
    t_far = np.maximum(t_lo, t_hi)
    # axes parallel to a slab still intersect if origin lies inside it
    for ax in range(3):
        if direction[ax] == 0.0:
            if grid_min[ax] <= origin[ax] <= grid_max[ax]:
                t_near[ax], t_far[ax] = -np.inf, np.inf
            else:
                return None
    t0 = max(float(np.max(t_near)), 0.0)
    t1 = float(np.min(t_far))
    if not (t1 > t0):
        return None
    ts = [np.array([t0, t1])]
    for ax in range(3):
        if direction[ax] != 0.0:
            t_planes = (plane_coords[ax] - origin[ax]) * inv[ax]
            ts.append(t_planes[(t_planes > t0) & (t_planes < t1)])
    ts = np.unique(np.concatenate(ts))
    if ts.size < 2:
        return None
    lengths = np.diff(ts)
    t_mid = (ts[:-1] + ts[1:]) / 2.0
    pts = origin[None, :] + t_mid[:, None] * direction[None, :]
    idx = np.floor((pts - grid_min[None, :]) / voxel_size[None, :]).astype(np.int64)
    ok = (
        (lengths > 1e-12)
        & np.all(idx >= 0, axis=1)
        & (idx[:, 0] < dims[0])
        & (idx[:, 1] < dims[1])
        & (idx[:, 2] < dims[2])
    )
    if not np.any(ok):
        return None
    idx = idx[ok]
    cols = (idx[:, 2] * dims[1] + idx[:, 1]) * dims[0] + idx[:, 0]
    weights = lengths[ok] / (t_mid[ok] ** 2)
    return cols, weights


def build_system_matrix(
    geom: ScannerGeometry, angles: AngleSet, grid_shape, voxel_size, grid_center=None
) -> SystemMatrix:
    """Build the joint sparse operator for all angular positions.

    Rows are ordered angle-major, then module, then v, then u.  One ray per
    detector bin: from the bin center through the module aperture into the
    grid, chord lengths per crossed voxel scaled by 1/d^2 with d the chord
    midpoint's distance to the aperture.  The grid is centered on
    grid_center (default: the base geometry's fov_center) and stays fixed
    across angles.  Deterministic given inputs.
    """
    nx, ny, nz = (int(d) for d in grid_shape)
    if min(nx, ny, nz) < 1:
        raise ConfigError(f"grid dims must be >= 1, got {grid_shape}")
    vox = np.asarray(voxel_size, dtype=np.float64).reshape(3)
    if np.any(vox <= 0):
        raise ConfigError(f"voxel_size must be positive, got {voxel_size}")
    dims = (nx, ny, nz)
    center = geom.fov_center if grid_center is None else np.asarray(grid_center, dtype=np.float64)
    grid_min = _grid_origin(center, dims, vox)
    grid_max = grid_min + np.array(dims, dtype=np.float64) * vox
    plane_coords = [grid_min[ax] + vox[ax] * np.arange(1, dims[ax]) for ax in range(3)]

    base = geom.modules[0]
    nu, nv = base.nu, base.nv
    n_modules = geom.n_modules
    n_rows = angles.n_angles * n_modules * nu * nv
    n_cols = nx * ny * nz

    indptr = np.zeros(n_rows + 1, dtype=np.int64)
    col_chunks = []
    dat_chunks = []
    row = 0
    for entry in angles.entries:
        g = apply_angle(geom, entry)
        for m in g.modules:
            if m.nu != nu or m.nv != nv:
                raise ConfigError("all modules must share nu/nv bin counts")
            if np.all(m.aperture_pos >= grid_min) and np.all(m.aperture_pos <= grid_max):
                raise ConfigError("degenerate ray: module aperture lies inside the voxel grid")
            aperture = m.aperture_pos
            for iv in range(nv):
                for iu in range(nu):
                    direction = aperture - m.bin_center(iu, iv)
                    norm = float(np.linalg.norm(direction))
                    if norm < 1e-12:
                        raise ConfigError("degenerate ray: bin center coincides with aperture")
                    hit = _trace_ray(
                        aperture, direction / norm, grid_min, grid_max, vox, dims, plane_coords
                    )
                    if hit is not None:
                        cols, weights = hit
                        order = np.argsort(cols, kind="stable")
                        col_chunks.append(cols[order])
                        dat_chunks.append(weights[order])
                        indptr[row + 1] = indptr[row] + cols.size
                    else:
                        indptr[row + 1] = indptr[row]
                    row += 1

    if col_chunks:
        indices = np.concatenate(col_chunks)
        data = np.concatenate(dat_chunks)
    else:
        indices = np.zeros(0, dtype=np.int64)
        data = np.zeros(0, dtype=np.float64)
    matrix = sparse.csr_matrix((data, indices, indptr), shape=(n_rows, n_cols))

    touched = np.zeros(n_cols, dtype=bool)
    touched[indices] = True
    n_dead = int(n_cols - touched.sum())
    if n_dead:
        dead = np.flatnonzero(~touched)
        shown = ", ".join(str(i) for i in dead[:20])
        more = "" if n_dead <= 20 else f", ... ({n_dead - 20} more)"
        log.warning("system matrix has %d dead voxels (untouched columns): %s%s", n_dead, shown, more)

    return SystemMatrix(
        matrix=matrix,
        n_angles=angles.n_angles,
        n_modules=n_modules,
        nu=nu,
        nv=nv,
        grid_shape=dims,
        voxel_size=tuple(float(v) for v in vox),
        angle_ids=angles.angle_ids,
    )


def forward_project(S: SystemMatrix, x: VolumeGrid) -> ProjectionSet:
    """y = S @ x for an activity volume (linear, nonnegative for nonnegative x)."""
    if x.shape != S.grid_shape:
        raise ConfigError(f"volume dims {x.shape} do not match operator grid {S.grid_shape}")
    y = S.matrix @ x.values
    return ProjectionSet(S.n_modules, S.nu, S.nv, S.angle_ids, y)


def back_project(S: SystemMatrix, y: ProjectionSet) -> VolumeGrid:
    """x = S^T @ y, the exact adjoint of forward_project."""
    if y.n_bins != S.n_rows or (y.n_modules, y.nu, y.nv) != (S.n_modules, S.nu, S.nv):
        raise ConfigError(
            f"projection dims (angles={y.n_angles}, modules={y.n_modules}, "
            f"nu={y.nu}, nv={y.nv}) do not match operator rows {S.n_rows}"
        )
    x = S.matrix.T @ y.values
    nx, ny, nz = S.grid_shape
    return VolumeGrid(nx, ny, nz, S.voxel_size, x)


# ---------------------------------------------------------------------------
# Matrix cache
# ---------------------------------------------------------------------------

def save_system_matrix(path, S: SystemMatrix):
    """Cache the CSR arrays (little-endian) next to a JSON header."""
    base = os.fspath(path)
    if base.endswith(".sm.json") or base.endswith(".sm.bin"):
        base = base[: -len(".sm.json")] if base.endswith(".sm.json") else base[: -len(".sm.bin")]
    m = S.matrix
    header = {
        "format": "sysmat",
        "n_rows": int(m.shape[0]),
        "n_cols": int(m.shape[1]),
        "nnz": int(m.nnz),
        "n_angles": S.n_angles,
        "n_modules": S.n_modules,
        "nu": S.nu,
        "nv": S.nv,
        "grid_shape": list(S.grid_shape),
        "voxel_size": list(S.voxel_size),
        "angle_ids": list(S.angle_ids),
    }
    with open(base + ".sm.json", "w", encoding="utf-8") as fh:
        json.dump(header, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(base + ".sm.bin", "wb") as fh:
        fh.write(np.ascontiguousarray(m.indptr, dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(m.indices, dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(m.data, dtype="<f8").tobytes())


def load_system_matrix(path) -> SystemMatrix:
    base = os.fspath(path)
    if base.endswith(".sm.json") or base.endswith(".sm.bin"):
        base = base[: -len(".sm.json")] if base.endswith(".sm.json") else base[: -len(".sm.bin")]
    with open(base + ".sm.json", "r", encoding="utf-8") as fh:
        header = json.load(fh)
    if header.get("format") != "sysmat":
        raise FormatError(f"{base}.sm.json: not a system-matrix header")
    n_rows, n_cols, nnz = (int(header[k]) for k in ("n_rows", "n_cols", "nnz"))
    with open(base + ".sm.bin", "rb") as fh:
        raw = fh.read()
    expected = 8 * (n_rows + 1) + 8 * nnz + 8 * nnz
    if len(raw) != expected:
        raise FormatError(f"{base}.sm.bin: payload is {len(raw)} bytes, header requires {expected}")
    off = 0
    indptr = np.frombuffer(raw, dtype="<i8", count=n_rows + 1, offset=off)
    off += 8 * (n_rows + 1)
    indices = np.frombuffer(raw, dtype="<i8", count=nnz, offset=off)
    off += 8 * nnz
    data = np.frombuffer(raw, dtype="<f8", count=nnz, offset=off)
    matrix = sparse.csr_matrix((data.copy(), indices.copy(), indptr.copy()), shape=(n_rows, n_cols))
    return SystemMatrix(
        matrix=matrix,
        n_angles=int(header["n_angles"]),
        n_modules=int(header["n_modules"]),
        nu=int(header["nu"]),
        nv=int(header["nv"]),
        grid_shape=tuple(int(d) for d in header["grid_shape"]),
        voxel_size=tuple(float(v) for v in header["voxel_size"]),
        angle_ids=tuple(header["angle_ids"]),
    )
