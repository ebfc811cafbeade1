"""Tensor container round-trips and rejection paths, annotation parsing,
synthetic data determinism, and checkpoints."""
import json
import struct

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from corrscan.dataio import (
    CorruptionError,
    DataError,
    FormatError,
    annotation_from_pair,
    gen_synthetic,
    load_annotations,
    load_checkpoint,
    read_tensor,
    save_checkpoint,
    write_annotations,
    write_tensor,
)
from corrscan.tensor import Tensor

RNG = np.random.default_rng(0)


class TestContainer:
    def test_round_trip_2x3(self, tmp_path):
        arr = RNG.standard_normal((2, 3)).astype(np.float32)
        write_tensor(tmp_path / "t.mmt", arr)
        np.testing.assert_array_equal(read_tensor(tmp_path / "t.mmt").data, arr)

    def test_round_trip_rank5(self, tmp_path):
        arr = RNG.standard_normal((16, 3, 3, 3, 3)).astype(np.float32)
        write_tensor(tmp_path / "t.mmt", arr)
        got = read_tensor(tmp_path / "t.mmt")
        assert got.shape == (16, 3, 3, 3, 3)
        np.testing.assert_array_equal(got.data, arr)

    @given(shape=st.lists(st.integers(1, 5), min_size=1, max_size=4),
           seed=st.integers(0, 2**32 - 1))
    @settings(deadline=None, max_examples=30,
              suppress_health_check=[HealthCheck.function_scoped_fixture])
    def test_round_trip_random_shapes(self, shape, seed, tmp_path):
        arr = np.random.default_rng(seed).standard_normal(shape).astype(np.float32)
        p = tmp_path / f"{seed}.mmt"
        write_tensor(p, arr)
        np.testing.assert_array_equal(read_tensor(p).data, arr)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.mmt"
        p.write_bytes(b"XXXX" + bytes(12))
        with pytest.raises(FormatError):
            read_tensor(p)

    def test_unknown_version(self, tmp_path):
        p = tmp_path / "v9.mmt"
        p.write_bytes(b"MMTN" + struct.pack("<BBBB", 9, 1, 1, 0) + struct.pack("<Q", 1) + b"\0" * 4)
        with pytest.raises(FormatError):
            read_tensor(p)

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "trunc.mmt"
        write_tensor(p, np.ones((4, 4), dtype=np.float32))
        raw = p.read_bytes()
        p.write_bytes(raw[:-8])
        with pytest.raises(CorruptionError):
            read_tensor(p)

    def test_extent_payload_mismatch(self, tmp_path):
        p = tmp_path / "lie.mmt"
        # header claims 10 elements, payload carries 2
        p.write_bytes(b"MMTN" + struct.pack("<BBBB", 1, 1, 1, 0) + struct.pack("<Q", 10) + b"\0" * 8)
        with pytest.raises(CorruptionError):
            read_tensor(p)

    def test_tensor_input_accepted(self, tmp_path):
        write_tensor(tmp_path / "t.mmt", Tensor(np.ones((2, 2), dtype=np.float32)))
        assert read_tensor(tmp_path / "t.mmt").shape == (2, 2)


class TestAnnotations:
    def pair(self, tmp_path):
        write_tensor(tmp_path / "s.mmt", np.ones((1, 1, 2, 2), dtype=np.float32))
        write_tensor(tmp_path / "t.mmt", np.ones((1, 1, 2, 2), dtype=np.float32))
        return {
            "pair_id": "p0", "source_features": "s.mmt", "target_features": "t.mmt",
            "source_kps": [[0.25, 0.25]], "target_kps": [[0.75, 0.75]],
            "bbox_wh": [15, 15], "image_wh": [20, 20], "category": "cat",
        }

    def test_round_trip(self, tmp_path):
        write_annotations(tmp_path / "ann.json", [self.pair(tmp_path)])
        pairs = load_annotations(tmp_path / "ann.json")
        ann = annotation_from_pair(pairs[0])
        assert ann.pair_id == "p0" and ann.category == "cat"
        np.testing.assert_allclose(ann.source_kps, [[0.25, 0.25]])

    def test_missing_field_rejected(self, tmp_path):
        p = self.pair(tmp_path)
        del p["bbox_wh"]
        write_annotations(tmp_path / "ann.json", [p])
        with pytest.raises(DataError):
            load_annotations(tmp_path / "ann.json")

    def test_count_mismatch_rejected(self, tmp_path):
        p = self.pair(tmp_path)
        p["target_kps"] = [[0.5, 0.5], [0.6, 0.6]]
        write_annotations(tmp_path / "ann.json", [p])
        with pytest.raises(DataError):
            load_annotations(tmp_path / "ann.json")

    def test_missing_tensor_file_rejected(self, tmp_path):
        p = self.pair(tmp_path)
        p["source_features"] = "nope.mmt"
        write_annotations(tmp_path / "ann.json", [p])
        with pytest.raises(DataError):
            load_annotations(tmp_path / "ann.json")

    def test_invalid_json_rejected(self, tmp_path):
        (tmp_path / "bad.json").write_text("{not json")
        with pytest.raises(DataError):
            load_annotations(tmp_path / "bad.json")


class TestSynthetic:
    def test_same_seed_byte_identical(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        for d in (a, b):
            gen_synthetic(d, seed=11, h=8, w=8, c=3, levels=2, n_pairs=2,
                          n_keypoints=3, max_translation=1, keypoint_margin=1)
        for f in sorted(p.name for p in a.iterdir()):
            assert (a / f).read_bytes() == (b / f).read_bytes()

    def test_translation_ground_truth_exact(self, tmp_path):
        gen_synthetic(tmp_path, seed=5, h=10, w=10, c=3, levels=2, n_pairs=4,
                      n_keypoints=4, max_translation=2, keypoint_margin=2)
        for p in load_annotations(tmp_path / "annotations.json"):
            ty, tx = p["translation"]
            src = np.asarray(p["source_kps"])
            tgt = np.asarray(p["target_kps"])
            np.testing.assert_allclose(tgt[:, 0] - src[:, 0], tx / 10, atol=1e-12)
            np.testing.assert_allclose(tgt[:, 1] - src[:, 1], ty / 10, atol=1e-12)
            # features shift consistently: source cell (i,j) == target cell (i+ty,j+tx)
            s = read_tensor(tmp_path / p["source_features"]).data
            t = read_tensor(tmp_path / p["target_features"]).data
            i, j = 4, 4
            np.testing.assert_array_equal(s[:, :, i, j], t[:, :, i + ty, j + tx])

    def test_features_strictly_positive(self, tmp_path):
        gen_synthetic(tmp_path, seed=1, h=8, w=8, c=2, levels=2, n_pairs=1,
                      n_keypoints=2, max_translation=1, keypoint_margin=1)
        p = load_annotations(tmp_path / "annotations.json")[0]
        assert read_tensor(tmp_path / p["source_features"]).data.min() > 0

    def test_too_small_extent_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            gen_synthetic(tmp_path, seed=0, h=4, w=4, c=2, levels=2, n_pairs=1,
                          n_keypoints=1)


class TestCheckpoint:
    def test_round_trip_with_extra(self, tmp_path):
        tensors = {"w1": RNG.standard_normal((2, 3)).astype(np.float32),
                   "ssm.a_log": RNG.standard_normal((4,)).astype(np.float32)}
        save_checkpoint(tmp_path / "ck", tensors, extra={"levels": 4})
        got, extra = load_checkpoint(tmp_path / "ck")
        assert extra == {"levels": 4}
        for k in tensors:
            np.testing.assert_array_equal(got[k], tensors[k])

    def test_manifest_lists_all_tensors(self, tmp_path):
        save_checkpoint(tmp_path / "ck", {"a": np.ones((1,), dtype=np.float32)})
        manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
        assert set(manifest["tensors"]) == {"a"}
