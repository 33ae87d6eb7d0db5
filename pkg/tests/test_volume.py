import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lesionseg.volume import (
    Contrast,
    LabelMap,
    LesionMask,
    MultiContrastImage,
    ProbabilityMap,
    VolumeGrid,
    load_volume,
    log_transform,
    resample_affine,
    save_volume,
)


def _img(values, tags=("T1w",)):
    values = np.asarray(values, float).reshape(-1, len(tags))
    return MultiContrastImage(VolumeGrid((values.shape[0], 1, 1)), values, tags)


class TestGrid:
    def test_rejects_bad_dims(self):
        with pytest.raises(ValueError):
            VolumeGrid((0, 2, 2))
        with pytest.raises(ValueError):
            VolumeGrid((2, 2, 2), (1.0, 0.0, 1.0))

    def test_rejects_singular_affine(self):
        with pytest.raises(ValueError):
            VolumeGrid((2, 2, 2), affine=np.zeros((4, 4)))

    def test_x_fastest_order(self):
        g = VolumeGrid((3, 2, 2))
        idx = g.voxel_indices()
        assert idx[:4].tolist() == [[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0]]
        vol = np.arange(12).reshape(3, 2, 2, order="F")
        assert np.array_equal(g.flatten(vol), np.arange(12))
        assert np.array_equal(g.to_volume(np.arange(12)), vol)

    def test_voxel_volume(self):
        assert VolumeGrid((2, 2, 2), (2.0, 2.0, 2.0)).voxel_volume == 8.0


class TestContainers:
    def test_image_rejects_nonfinite_with_voxel_index(self):
        with pytest.raises(ValueError, match="voxel index 2"):
            _img([1.0, 2.0, np.nan, 4.0])

    def test_image_row_count_checked(self):
        with pytest.raises(ValueError):
            MultiContrastImage(VolumeGrid((2, 2, 2)), np.ones((7, 1)))

    def test_label_range(self):
        g = VolumeGrid((2, 1, 1))
        with pytest.raises(ValueError):
            LabelMap(g, [0, 1])
        with pytest.raises(ValueError):
            LabelMap(g, [1, 4], n_labels=3)

    def test_mask_binary(self):
        with pytest.raises(ValueError):
            LesionMask(VolumeGrid((2, 1, 1)), [0, 2])

    def test_probs_range(self):
        with pytest.raises(ValueError):
            ProbabilityMap(VolumeGrid((2, 1, 1)), [0.2, 1.1])

    def test_contrast_parse(self):
        assert Contrast.parse("flair") is Contrast.FLAIR
        assert Contrast.parse(1) is Contrast.T2w
        with pytest.raises(ValueError):
            Contrast.parse("CT")


class TestLogTransform:
    def test_one_maps_to_zero(self):
        assert log_transform(_img([1.0])).data[0, 0] == 0.0

    def test_e_maps_to_one(self):
        assert log_transform(_img([np.e])).data[0, 0] == pytest.approx(1.0, abs=1e-15)

    def test_zero_clamped_to_floor(self):
        out = log_transform(_img([0.0]), floor=1e-4)
        assert out.data[0, 0] == pytest.approx(np.log(1e-4))

    def test_preserves_grid_and_tags(self):
        raw = _img([[1.0, 2.0]], tags=("T1w", "FLAIR"))
        out = log_transform(raw)
        assert out.log_domain and out.grid is raw.grid and out.contrasts == raw.contrasts

    def test_rejects_log_domain_input(self):
        with pytest.raises(ValueError):
            log_transform(log_transform(_img([1.0])))

    @given(st.floats(1e-3, 1e6), st.floats(1e-3, 1e6))
    def test_monotone(self, a, b):
        out = log_transform(_img([a, b])).data[:, 0]
        assert (a < b) <= (out[0] < out[1]) and (a > b) <= (out[0] > out[1])


class TestResample:
    def test_identity_is_bitwise(self, rng):
        g = VolumeGrid((4, 3, 5))
        src = ProbabilityMap(g, rng.random(g.n_voxels))
        out = resample_affine(src, g, np.eye(4))
        assert np.array_equal(out.probs, src.probs)

    def test_constant_map_stays_constant(self):
        src = ProbabilityMap(VolumeGrid((8, 8, 8)), np.full(512, 0.7))
        target = VolumeGrid((4, 4, 4))
        # a rotation plus shift that keeps every target sample inside the source
        c, s = np.cos(0.2), np.sin(0.2)
        A = np.array([[c, -s, 0, 2.5], [s, c, 0, 1.5], [0, 0, 1, 2.0], [0, 0, 0, 1]])
        out = resample_affine(src, target, A)
        assert np.allclose(out.probs, 0.7, atol=1e-12)

    def test_midpoint_is_half(self):
        src = ProbabilityMap(VolumeGrid((2, 1, 1)), [0.0, 1.0])
        target = VolumeGrid((1, 1, 1))
        shift = np.eye(4)
        shift[0, 3] = 0.5
        assert resample_affine(src, target, shift).probs[0] == pytest.approx(0.5)

    def test_outside_is_zero(self):
        src = ProbabilityMap(VolumeGrid((2, 2, 2)), np.ones(8))
        far = np.eye(4)
        far[:3, 3] = 50.0
        assert resample_affine(src, VolumeGrid((2, 2, 2)), far).probs.max() == 0.0

    def test_singular_affine_rejected(self):
        src = ProbabilityMap(VolumeGrid((2, 2, 2)), np.ones(8))
        with pytest.raises(ValueError):
            resample_affine(src, src.grid, np.zeros((4, 4)))

    @given(arrays(np.float64, 27, elements=st.floats(0, 1)))
    def test_output_in_unit_interval(self, probs):
        src = ProbabilityMap(VolumeGrid((3, 3, 3)), probs)
        A = np.eye(4)
        A[:3, :3] *= 0.7
        A[:3, 3] = 0.3
        out = resample_affine(src, VolumeGrid((4, 4, 4)), A).probs
        assert out.min() >= 0 and out.max() <= 1


class TestMvol:
    def _grid(self):
        aff = np.diag([1.5, 1.0, 2.0, 1.0])
        aff[:3, 3] = (-3.0, 4.0, 0.5)
        return VolumeGrid((3, 4, 2), (1.5, 1.0, 2.0), aff)

    @given(arrays(np.float32, (24, 2), elements=st.floats(-1e3, 1e3, width=32)))
    def test_image_round_trip(self, tmp_path_factory, data):
        g = self._grid()
        img = MultiContrastImage(g, data.astype(np.float64), ("T2w", "FLAIR"), log_domain=True)
        path = tmp_path_factory.mktemp("v") / "x.mvol"
        save_volume(path, img)
        back = load_volume(path)
        assert np.array_equal(back.data, img.data)
        assert back.contrasts == img.contrasts and back.log_domain
        assert back.grid.same_as(g)

    def test_label_round_trip(self, tmp_path, rng):
        g = self._grid()
        lm = LabelMap(g, rng.integers(1, 6, g.n_voxels), 5)
        save_volume(tmp_path / "l.mvol", lm)
        back = load_volume(tmp_path / "l.mvol")
        assert isinstance(back, LabelMap) and np.array_equal(back.labels, lm.labels)

    def test_mask_and_probs_round_trip(self, tmp_path, rng):
        g = self._grid()
        m = LesionMask(g, rng.integers(0, 2, g.n_voxels))
        p = ProbabilityMap(g, rng.random(g.n_voxels).astype(np.float32))
        save_volume(tmp_path / "m.mvol", m)
        save_volume(tmp_path / "p.mvol", p)
        assert np.array_equal(load_volume(tmp_path / "m.mvol", "mask").mask, m.mask)
        assert np.array_equal(load_volume(tmp_path / "p.mvol", "probs").probs, p.probs)

    def test_header_layout(self, tmp_path):
        """Byte layout: magic, version, dims, voxel size, affine, channels, tags, log flag, payload."""
        import struct

        g = VolumeGrid((2, 1, 1))
        save_volume(tmp_path / "a.mvol", MultiContrastImage(g, [[1.0], [2.0]], ("FLAIR",)))
        raw = (tmp_path / "a.mvol").read_bytes()
        assert raw[:4] == b"MVOL"
        assert struct.unpack_from("<I3I3f", raw, 4) == (1, 2, 1, 1, 1.0, 1.0, 1.0)
        off = 4 + 4 + 12 + 12 + 64
        assert struct.unpack_from("<IBB", raw, off) == (1, 2, 0)
        assert struct.unpack_from("<2f", raw, off + 6) == (1.0, 2.0)
        assert len(raw) == off + 6 + 8

    def test_label_header_tag(self, tmp_path):
        import struct

        save_volume(tmp_path / "l.mvol", LabelMap(VolumeGrid((2, 1, 1)), [1, 2]))
        raw = (tmp_path / "l.mvol").read_bytes()
        off = 4 + 4 + 12 + 12 + 64
        assert struct.unpack_from("<IB", raw, off) == (1, 254)
        assert struct.unpack_from("<2H", raw, off + 6) == (1, 2)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.mvol").write_bytes(b"NOPE" + bytes(100))
        with pytest.raises(ValueError):
            load_volume(tmp_path / "x.mvol")
