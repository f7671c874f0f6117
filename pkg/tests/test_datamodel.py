import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fewspect.datamodel import (
    LabeledMasks,
    ProjectionSet,
    VolumeGrid,
    read_projections,
    read_volume,
    write_projections,
    write_volume,
)
from fewspect.errors import FormatError


def make_volume(nx=2, ny=2, nz=2, fill=0.0):
    return VolumeGrid(nx, ny, nz, (1.0, 1.0, 1.0), np.full(nx * ny * nz, fill))


class TestVolumeGrid:
    def test_rejects_zero_dim(self):
        with pytest.raises(FormatError):
            VolumeGrid(0, 2, 2, (1, 1, 1), np.zeros(0))

    def test_rejects_length_mismatch(self):
        with pytest.raises(FormatError):
            VolumeGrid(2, 2, 2, (1, 1, 1), np.zeros(7))

    def test_rejects_nonfinite(self):
        vals = np.zeros(8)
        vals[3] = np.nan
        with pytest.raises(FormatError):
            VolumeGrid(2, 2, 2, (1, 1, 1), vals)

    def test_values_are_readonly(self):
        v = make_volume()
        with pytest.raises(ValueError):
            v.values[0] = 1.0

    def test_grid3d_is_x_fastest(self):
        vals = np.arange(24.0)
        v = VolumeGrid(4, 3, 2, (1, 1, 1), vals)
        g = v.grid3d()
        assert g.shape == (2, 3, 4)
        # value at (ix, iy, iz) = ix + nx * (iy + ny * iz)
        assert g[1, 2, 3] == 3 + 4 * (2 + 3 * 1)


class TestProjectionSet:
    def test_rejects_negative(self):
        with pytest.raises(FormatError):
            ProjectionSet(1, 2, 2, ("pos0",), [-1.0, 0, 0, 0])

    def test_four_angle_set_declares_76_module_readings(self):
        p = ProjectionSet(19, 2, 2, ("pos0", "pos1", "pos2", "pos3"), np.zeros(4 * 19 * 4))
        assert p.n_angles == 4
        assert p.n_angles * p.n_modules == 76

    def test_as_array_layout(self):
        vals = np.arange(2 * 3 * 2 * 4, dtype=float)
        p = ProjectionSet(3, 4, 2, ("pos0", "pos1"), vals)
        arr = p.as_array()
        assert arr.shape == (2, 3, 2, 4)
        # index ((a * M + m) * nv + v) * nu + u
        assert arr[1, 2, 1, 3] == ((1 * 3 + 2) * 2 + 1) * 4 + 3


class TestLabeledMasks:
    def test_rejects_overlapping_myo_pool(self):
        m = np.zeros(8, dtype=bool)
        m[0] = True
        with pytest.raises(FormatError):
            LabeledMasks(2, 2, 2, m, m, np.zeros(8, dtype=bool))

    def test_rejects_defect_outside_myocardium(self):
        myo = np.zeros(8, dtype=bool)
        defect = np.zeros(8, dtype=bool)
        defect[1] = True
        with pytest.raises(FormatError):
            LabeledMasks(2, 2, 2, myo, np.zeros(8, dtype=bool), defect)


class TestVolumeIO:
    def test_round_trip_zeros(self, tmp_path):
        v = make_volume()
        write_volume(tmp_path / "zero", v)
        back = read_volume(tmp_path / "zero")
        assert back.shape == v.shape
        assert np.array_equal(back.values, v.values)

    def test_payload_size_paper_grid(self, tmp_path):
        v = VolumeGrid(70, 70, 50, (2.0, 2.0, 2.0), np.zeros(245_000))
        write_volume(tmp_path / "big", v)
        assert (tmp_path / "big.vol.f32").stat().st_size == 980_000

    def test_truncated_payload_raises(self, tmp_path):
        v = make_volume()
        write_volume(tmp_path / "v", v)
        payload = tmp_path / "v.vol.f32"
        payload.write_bytes(payload.read_bytes()[:-4])
        with pytest.raises(FormatError, match="payload"):
            read_volume(tmp_path / "v")

    def test_header_dim_mismatch_names_field(self, tmp_path):
        v = make_volume()
        write_volume(tmp_path / "v", v)
        header = (tmp_path / "v.vol.json").read_text().replace('"nx": 2', '"nx": 3')
        (tmp_path / "v.vol.json").write_text(header)
        with pytest.raises(FormatError):
            read_volume(tmp_path / "v")

    @settings(max_examples=25, deadline=None)
    @given(
        dims=st.tuples(
            st.integers(min_value=1, max_value=4),
            st.integers(min_value=1, max_value=4),
            st.integers(min_value=1, max_value=4),
        ),
        seed=st.integers(min_value=0, max_value=2**32 - 1),
    )
    def test_round_trip_bit_exact(self, tmp_path_factory, dims, seed):
        # payloads are float32 on disk; any finite float32 array survives
        nx, ny, nz = dims
        rng = np.random.default_rng(seed)
        vals = rng.standard_normal(nx * ny * nz).astype(np.float32)
        vals = np.abs(vals)  # volumes allow any finite values; keep generic positives too
        v = VolumeGrid(nx, ny, nz, (1.0, 2.0, 3.0), vals)
        path = tmp_path_factory.mktemp("vols") / "rt"
        write_volume(path, v)
        back = read_volume(path)
        assert np.array_equal(back.values.astype(np.float32), vals)
        assert back.voxel_size == (1.0, 2.0, 3.0)


class TestProjectionIO:
    def test_one_angle_paper_module_payload(self, tmp_path):
        p = ProjectionSet(19, 32, 32, ("pos0",), np.zeros(19_456))
        write_projections(tmp_path / "p", p)
        assert (tmp_path / "p.proj.f32").stat().st_size == 77_824

    def test_round_trip(self, tmp_path):
        vals = np.linspace(0, 5, 2 * 3 * 4 * 4).astype(np.float32)
        p = ProjectionSet(3, 4, 4, ("pos0", "pos1"), vals)
        write_projections(tmp_path / "p", p)
        back = read_projections(tmp_path / "p")
        assert back.angle_ids == ("pos0", "pos1")
        assert np.array_equal(back.values.astype(np.float32), vals)

    def test_missing_path_raises_oserror(self, tmp_path):
        with pytest.raises(OSError):
            read_projections(tmp_path / "nope")

    def test_header_declared_size_equals_payload(self, tmp_path):
        import json

        p = ProjectionSet(3, 4, 4, ("pos0",), np.arange(48.0))
        write_projections(tmp_path / "p", p)
        header = json.loads((tmp_path / "p.proj.json").read_text())
        assert header["payload_bytes"] == (tmp_path / "p.proj.f32").stat().st_size
        v = make_volume(3, 2, 2)
        write_volume(tmp_path / "v", v)
        header = json.loads((tmp_path / "v.vol.json").read_text())
        assert header["payload_bytes"] == (tmp_path / "v.vol.f32").stat().st_size
