import numpy as np
import pytest

from bayesseg.core import (
    DatasetManifest,
    CaseRecord,
    LabelMap,
    Slice2D,
    Volume3D,
    VolumeIOError,
    extract_slice,
    read_volume,
    stack_slices,
    write_volume,
)


def _volume(dtype=np.int16, shape=(4, 5, 6), spacing=(0.7, 0.7, 1.0)):
    rng = np.random.default_rng(0)
    if np.issubdtype(dtype, np.integer):
        vox = rng.integers(-500, 500, shape).astype(dtype)
    else:
        vox = rng.normal(size=shape).astype(dtype)
    return Volume3D(voxels=vox, spacing=spacing, origin=(1.0, 2.0, 3.0))


class TestVolumeContainer:
    @pytest.mark.parametrize("dtype", [np.int16, np.uint8, np.float32])
    def test_round_trip_bit_exact(self, tmp_path, dtype):
        v = _volume(dtype)
        path = str(tmp_path / "vol")
        write_volume(v, path)
        r = read_volume(path)
        assert np.array_equal(r.voxels, v.voxels)
        assert r.voxels.dtype == v.voxels.dtype
        assert r.spacing == v.spacing
        assert r.origin == v.origin

    def test_zero_volume(self, tmp_path):
        v = Volume3D(np.zeros((2, 2, 2), dtype=np.int16))
        path = str(tmp_path / "z")
        write_volume(v, path)
        r = read_volume(path)
        assert r.voxels.sum() == 0 and r.voxels.size == 8
        assert r.spacing == (1.0, 1.0, 1.0)

    def test_spacing_full_precision(self, tmp_path):
        v = _volume(spacing=(0.7, 0.7, 1.0))
        path = str(tmp_path / "s")
        write_volume(v, path)
        assert read_volume(path).spacing == (0.7, 0.7, 1.0)

    def test_truncated_payload_rejected(self, tmp_path):
        v = _volume()
        path = str(tmp_path / "t")
        write_volume(v, path)
        payload = path + ".volr"
        with open(payload, "rb") as f:
            raw = f.read()
        with open(payload, "wb") as f:
            f.write(raw[:-1])
        with pytest.raises(VolumeIOError, match="size mismatch"):
            read_volume(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(VolumeIOError):
            read_volume(str(tmp_path / "nope"))

    def test_unsupported_scalar_type(self, tmp_path):
        v = Volume3D(np.zeros((2, 2, 2), dtype=np.float64))
        with pytest.raises(VolumeIOError):
            write_volume(v, str(tmp_path / "bad"))

    def test_last_write_wins_no_partial(self, tmp_path):
        path = str(tmp_path / "w")
        v1 = _volume()
        v2 = Volume3D(v1.voxels + 1, v1.spacing, v1.origin)
        write_volume(v1, path)
        write_volume(v2, path)
        assert np.array_equal(read_volume(path).voxels, v2.voxels)
        assert not list(tmp_path.glob("*.tmp"))


class TestTypes:
    def test_volume_invariants(self):
        with pytest.raises(ValueError):
            Volume3D(np.zeros((2, 2), dtype=np.int16))
        with pytest.raises(ValueError):
            Volume3D(np.zeros((2, 2, 2), dtype=np.int16), spacing=(0, 1, 1))

    def test_label_map_range(self):
        LabelMap(np.array([[0, 1], [2, 3]]), n_classes=4)
        with pytest.raises(ValueError):
            LabelMap(np.array([[0, 4]]), n_classes=4)
        with pytest.raises(ValueError):
            LabelMap(np.array([[0, -1]]), n_classes=4)

    def test_manifest_invariants(self):
        with pytest.raises(ValueError):
            DatasetManifest(cases=[CaseRecord("a", "p"), CaseRecord("a", "q")])
        with pytest.raises(ValueError):
            DatasetManifest(cases=[CaseRecord("a", "p", None, [1])])

    def test_manifest_round_trip(self, tmp_path):
        m = DatasetManifest(
            cases=[CaseRecord("a", "vol_a", "lab_a", [0, 2], "train")],
            n_classes=5, class_names=["bg", "b", "c", "d", "e"],
        )
        path = str(tmp_path / "m.yaml")
        m.save(path)
        r = DatasetManifest.load(path)
        assert r.n_classes == 5
        assert r.case("a").labeled_slice_indices == [0, 2]


class TestSlices:
    def test_extract_constant_plane(self):
        vox = np.zeros((5, 4, 3), dtype=np.int16)
        for z in range(5):
            vox[z] = z
        v = Volume3D(vox)
        s = extract_slice(v, 3)
        assert isinstance(s, Slice2D)
        assert (s.pixels == 3).all()
        assert s.z_index == 3

    def test_out_of_range(self):
        v = _volume()
        with pytest.raises(IndexError):
            extract_slice(v, v.n_slices)
        with pytest.raises(IndexError):
            extract_slice(v, -1)

    def test_reassembly_round_trip(self):
        v = _volume()
        slices = [extract_slice(v, z) for z in range(v.n_slices)]
        r = stack_slices(slices, v.spacing, v.origin)
        assert np.array_equal(r.voxels, v.voxels)
