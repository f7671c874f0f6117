"""Array containers and on-disk formats for volumes, projections, and masks.

Conventions
-----------
Volumes are scalar fields on a regular voxel grid, linearized x-fastest
(x varies quickest, then y, then z).  Projection sets stack the detector
modules of every angular position, linearized angle-major, then module,
then v, then u (u fastest).  Files come in pairs: a JSON sidecar with the
header and a raw little-endian float32 payload:

    <base>.vol.json   + <base>.vol.f32     volumes
    <base>.proj.json  + <base>.proj.f32    projection sets

Containers are immutable after construction and safe to share read-only.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import FormatError

_F32 = "<f4"


def _as_readonly(values, dtype=np.float64):
    arr = np.ascontiguousarray(np.asarray(values, dtype=dtype).reshape(-1))
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class VolumeGrid:
    """3D scalar image on an nx*ny*nz voxel grid.

    Parameters
    ----------
    nx, ny, nz : int
        Voxel counts per axis.
    voxel_size : tuple of float
        Physical voxel pitch in mm per axis (sx, sy, sz).
    values : array_like
        nx*ny*nz finite scalars, x-fastest.  Activity images are
        nonnegative by construction in the modules that produce them;
        the container itself only enforces finiteness so that network
        intermediates can be stored too.
    """

    nx: int
    ny: int
    nz: int
    voxel_size: tuple
    values: np.ndarray

    def __post_init__(self):
        nx, ny, nz = int(self.nx), int(self.ny), int(self.nz)
        if min(nx, ny, nz) < 1:
            raise FormatError(f"volume dims must be >= 1, got {(nx, ny, nz)}")
        vs = tuple(float(s) for s in self.voxel_size)
        if len(vs) != 3 or min(vs) <= 0:
            raise FormatError(f"voxel_size must be three positive floats, got {self.voxel_size}")
        values = _as_readonly(self.values)
        if values.size != nx * ny * nz:
            raise FormatError(
                f"values length {values.size} != nx*ny*nz = {nx * ny * nz}"
            )
        if not np.all(np.isfinite(values)):
            raise FormatError("volume values must be finite")
        object.__setattr__(self, "nx", nx)
        object.__setattr__(self, "ny", ny)
        object.__setattr__(self, "nz", nz)
        object.__setattr__(self, "voxel_size", vs)
        object.__setattr__(self, "values", values)

    @property
    def shape(self):
        return (self.nx, self.ny, self.nz)

    @property
    def n_voxels(self):
        return self.nx * self.ny * self.nz

    def grid3d(self):
        """Values as a read-only (nz, ny, nx) array (C-order view of x-fastest data)."""
        return self.values.reshape(self.nz, self.ny, self.nx)

    def with_values(self, values):
        return VolumeGrid(self.nx, self.ny, self.nz, self.voxel_size, values)

    @staticmethod
    def from_grid3d(arr, voxel_size):
        arr = np.asarray(arr)
        nz, ny, nx = arr.shape
        return VolumeGrid(nx, ny, nz, voxel_size, arr.reshape(-1))


@dataclass(frozen=True)
class ProjectionSet:
    """Stacked detector readings for one or more angular positions.

    values holds n_angles * n_modules * nu * nv finite, nonnegative scalars,
    ordered angle-major, then module, then v, then u.
    """

    n_modules: int
    nu: int
    nv: int
    angle_ids: tuple
    values: np.ndarray

    def __post_init__(self):
        n_modules, nu, nv = int(self.n_modules), int(self.nu), int(self.nv)
        if min(n_modules, nu, nv) < 1:
            raise FormatError(f"projection dims must be >= 1, got {(n_modules, nu, nv)}")
        angle_ids = tuple(str(a) for a in self.angle_ids)
        if len(angle_ids) < 1:
            raise FormatError("at least one angle_id is required")
        values = _as_readonly(self.values)
        expected = len(angle_ids) * n_modules * nu * nv
        if values.size != expected:
            raise FormatError(
                f"values length {values.size} != n_angles*n_modules*nu*nv = {expected}"
            )
        if not np.all(np.isfinite(values)):
            raise FormatError("projection values must be finite")
        if np.any(values < 0):
            raise FormatError("projection values must be nonnegative")
        object.__setattr__(self, "n_modules", n_modules)
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "nv", nv)
        object.__setattr__(self, "angle_ids", angle_ids)
        object.__setattr__(self, "values", values)

    @property
    def n_angles(self):
        return len(self.angle_ids)

    @property
    def n_bins(self):
        return self.n_angles * self.n_modules * self.nu * self.nv

    def as_array(self):
        """Values as a read-only (n_angles, n_modules, nv, nu) array."""
        return self.values.reshape(self.n_angles, self.n_modules, self.nv, self.nu)


@dataclass(frozen=True)
class LabeledMasks:
    """Boolean myocardium / blood-pool / defect masks aligned with a VolumeGrid."""

    nx: int
    ny: int
    nz: int
    myocardium: np.ndarray
    blood_pool: np.ndarray
    defect: np.ndarray

    def __post_init__(self):
        n = self.nx * self.ny * self.nz
        for name in ("myocardium", "blood_pool", "defect"):
            arr = np.ascontiguousarray(np.asarray(getattr(self, name), dtype=bool).reshape(-1))
            if arr.size != n:
                raise FormatError(f"mask {name!r} length {arr.size} != {n}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if np.any(self.myocardium & self.blood_pool):
            raise FormatError("myocardium and blood_pool masks overlap")
        if np.any(self.defect & ~self.myocardium):
            raise FormatError("defect mask must lie inside the myocardium")

    def grid3d(self, name):
        return getattr(self, name).reshape(self.nz, self.ny, self.nx)


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def _split_base(path, kind):
    path = os.fspath(path)
    for suffix in (f".{kind}.json", f".{kind}.f32", f".{kind}"):
        if path.endswith(suffix):
            return path[: -len(suffix)]
    return path


def _write_pair(base, kind, header, payload):
    data = np.ascontiguousarray(payload, dtype=_F32)
    header = dict(header)
    header["format"] = kind
    header["dtype"] = _F32
    header["payload_bytes"] = int(data.nbytes)
    with open(base + f".{kind}.json", "w", encoding="utf-8") as fh:
        json.dump(header, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(base + f".{kind}.f32", "wb") as fh:
        fh.write(data.tobytes())


def _read_pair(base, kind):
    json_path = base + f".{kind}.json"
    with open(json_path, "r", encoding="utf-8") as fh:
        try:
            header = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{json_path}: invalid JSON header: {exc}") from exc
    if header.get("format") != kind:
        raise FormatError(f"{json_path}: field 'format' is {header.get('format')!r}, expected {kind!r}")
    if header.get("dtype") != _F32:
        raise FormatError(f"{json_path}: field 'dtype' is {header.get('dtype')!r}, expected {_F32!r}")
    with open(base + f".{kind}.f32", "rb") as fh:
        raw = fh.read()
    declared = header.get("payload_bytes")
    if declared is not None and int(declared) != len(raw):
        raise FormatError(
            f"{json_path}: field 'payload_bytes' declares {declared}, payload has {len(raw)} bytes"
        )
    return header, raw


def write_volume(path, v: VolumeGrid):
    """Write `v` as a <base>.vol.json / <base>.vol.f32 pair."""
    base = _split_base(path, "vol")
    header = {
        "nx": v.nx,
        "ny": v.ny,
        "nz": v.nz,
        "voxel_size": list(v.voxel_size),
    }
    _write_pair(base, "vol", header, v.values)


def read_volume(path) -> VolumeGrid:
    """Read a volume pair written by write_volume."""
    base = _split_base(path, "vol")
    header, raw = _read_pair(base, "vol")
    try:
        nx, ny, nz = int(header["nx"]), int(header["ny"]), int(header["nz"])
        voxel_size = tuple(header["voxel_size"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{base}.vol.json: missing or malformed field: {exc}") from exc
    expected = nx * ny * nz * 4
    if len(raw) != expected:
        raise FormatError(
            f"{base}.vol.f32: payload is {len(raw)} bytes, header dims require {expected}"
        )
    values = np.frombuffer(raw, dtype=_F32)
    return VolumeGrid(nx, ny, nz, voxel_size, values)


def write_projections(path, p: ProjectionSet):
    """Write `p` as a <base>.proj.json / <base>.proj.f32 pair."""
    base = _split_base(path, "proj")
    header = {
        "n_modules": p.n_modules,
        "nu": p.nu,
        "nv": p.nv,
        "angle_ids": list(p.angle_ids),
    }
    _write_pair(base, "proj", header, p.values)


def read_projections(path) -> ProjectionSet:
    """Read a projection pair written by write_projections."""
    base = _split_base(path, "proj")
    header, raw = _read_pair(base, "proj")
    try:
        n_modules = int(header["n_modules"])
        nu, nv = int(header["nu"]), int(header["nv"])
        angle_ids = list(header["angle_ids"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{base}.proj.json: missing or malformed field: {exc}") from exc
    expected = len(angle_ids) * n_modules * nu * nv * 4
    if len(raw) != expected:
        raise FormatError(
            f"{base}.proj.f32: payload is {len(raw)} bytes, header dims require {expected}"
        )
    values = np.frombuffer(raw, dtype=_F32)
    return ProjectionSet(n_modules, nu, nv, tuple(angle_ids), values)
