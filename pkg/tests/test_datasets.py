"""TUM sequence loading and segmentation sidecar IO."""

import itertools
import json
from pathlib import Path

import cv2
import numpy as np
import pytest

from surfelslam.datasets import (
    InstanceMask,
    SegmentationFrame,
    decode_depth,
    encode_depth,
    load_segmentation,
    load_sequence,
    read_trajectory,
    save_segmentation,
    write_trajectory,
    _pair_nearest,
)
from surfelslam.errors import DatasetError, ParseError, SegmentationFormatError
from surfelslam.geometry import Pose, se3_exp


def optimal_pairing(rgb, depth, max_gap):
    """Exhaustive oracle: maximize pair count, then minimize total gap."""
    best = []
    best_cost = None
    nb = len(depth)
    for r in range(min(len(rgb), nb), -1, -1):
        for subset_a in itertools.combinations(range(len(rgb)), r):
            for subset_b in itertools.permutations(range(nb), r):
                pairs = list(zip(subset_a, subset_b))
                if any(abs(rgb[i][0] - depth[j][0]) > max_gap for i, j in pairs):
                    continue
                cost = sum(abs(rgb[i][0] - depth[j][0]) for i, j in pairs)
                if best_cost is None or cost < best_cost:
                    best = sorted(pairs)
                    best_cost = cost
        if best_cost is not None:
            break
    return best


class TestPairing:
    def test_within_gap_pairs(self):
        pairs = _pair_nearest([(1.00, "a")], [(1.01, "b")], 0.02)
        assert pairs == [(0, 0)]

    def test_exceeding_gap_drops(self):
        pairs = _pair_nearest([(1.00, "a")], [(1.50, "b")], 0.02)
        assert pairs == []

    def test_greedy_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(17)
        for _ in range(200):
            n = rng.integers(1, 5)
            base = np.sort(rng.uniform(0, 10, n))
            rgb = [(t, "r") for t in base]
            depth = [(t + rng.uniform(-0.004, 0.004), "d") for t in base]
            rng.shuffle(depth)
            depth.sort()
            got = _pair_nearest(rgb, depth, 0.02)
            assert got == optimal_pairing(rgb, depth, 0.02)


class TestDepthCodec:
    def test_raw_5000_is_one_metre_exactly(self):
        assert decode_depth(np.array([5000], dtype=np.uint16))[0] == 1.0

    def test_encode_decode_round_trip(self):
        metres = np.array([0.0, 0.4321, 1.0, 5.9999], dtype=np.float64)
        raw = encode_depth(metres)
        np.testing.assert_allclose(decode_depth(raw), metres, atol=0.5 / 5000.0)


def make_seg(shape=(24, 32)):
    m1 = np.zeros(shape, dtype=bool)
    m1[4:10, 5:12] = True
    m2 = np.zeros(shape, dtype=bool)
    m2[14:20, 18:28] = True
    soft = np.full(shape, 0.1, dtype=np.float32)
    soft[m1] = 0.9
    soft[m2] = 0.8
    return SegmentationFrame(
        masks=[
            InstanceMask(mask=m1, class_probs=np.array([0.9, 0.1])),
            InstanceMask(mask=m2, class_probs=np.array([0.1, 0.9])),
        ],
        soft_prob=soft,
        omega_rgb=0.75,
        labels=["cup", "book"],
    )


class TestSidecar:
    def test_save_load_identity(self, tmp_path):
        seg = make_seg()
        save_segmentation(tmp_path / "f0", seg)
        loaded = load_segmentation(tmp_path / "f0")
        assert len(loaded.masks) == 2
        assert loaded.omega_rgb == pytest.approx(0.75)
        assert loaded.labels == ["cup", "book"]
        for a, b in zip(loaded.masks, seg.masks):
            np.testing.assert_array_equal(a.mask, b.mask)
            np.testing.assert_allclose(a.class_probs, b.class_probs, atol=1e-12)
        np.testing.assert_allclose(loaded.soft_prob, seg.soft_prob, atol=1.0 / 65535)

    def test_round_trip_is_byte_identical(self, tmp_path):
        seg = make_seg()
        save_segmentation(tmp_path / "a", seg)
        loaded = load_segmentation(tmp_path / "a")
        save_segmentation(tmp_path / "b", loaded)
        for name in ("inst.png", "soft.png", "meta.json"):
            assert (tmp_path / "a" / name).read_bytes() == (
                tmp_path / "b" / name
            ).read_bytes(), name

    def test_absent_sidecar_yields_empty_frame(self, tmp_path):
        seg = load_segmentation(tmp_path / "missing", default_omega=0.3,
                                expected_shape=(24, 32))
        assert seg.masks == []
        assert seg.omega_rgb == 0.3
        assert seg.soft_prob.shape == (24, 32)

    def test_class_prob_out_of_range_rejected(self, tmp_path):
        seg = make_seg()
        save_segmentation(tmp_path / "f0", seg)
        meta_path = tmp_path / "f0" / "meta.json"
        meta = json.loads(meta_path.read_text())
        meta["masks"][0]["class_probs"] = [1.2, -0.2]
        meta_path.write_text(json.dumps(meta))
        with pytest.raises(SegmentationFormatError):
            load_segmentation(tmp_path / "f0")

    def test_omega_out_of_range_rejected(self, tmp_path):
        seg = make_seg()
        save_segmentation(tmp_path / "f0", seg)
        meta_path = tmp_path / "f0" / "meta.json"
        meta = json.loads(meta_path.read_text())
        meta["omega_rgb"] = 1.2
        meta_path.write_text(json.dumps(meta))
        with pytest.raises(SegmentationFormatError):
            load_segmentation(tmp_path / "f0")

    def test_shape_mismatch_rejected(self, tmp_path):
        seg = make_seg()
        save_segmentation(tmp_path / "f0", seg)
        cv2.imwrite(
            str(tmp_path / "f0" / "soft.png"), np.zeros((10, 10), dtype=np.uint16)
        )
        with pytest.raises(SegmentationFormatError):
            load_segmentation(tmp_path / "f0")

    def test_expected_shape_enforced(self, tmp_path):
        save_segmentation(tmp_path / "f0", make_seg())
        with pytest.raises(SegmentationFormatError):
            load_segmentation(tmp_path / "f0", expected_shape=(480, 640))

    def test_mask_pixel_below_half_soft_prob_rejected(self):
        m = np.zeros((8, 8), dtype=bool)
        m[2:4, 2:4] = True
        with pytest.raises(SegmentationFormatError):
            SegmentationFrame(
                masks=[InstanceMask(mask=m, class_probs=np.array([1.0]))],
                soft_prob=np.full((8, 8), 0.2, dtype=np.float32),
                omega_rgb=0.5,
            )

    def test_overlapping_masks_rejected(self):
        m = np.zeros((8, 8), dtype=bool)
        m[2:5, 2:5] = True
        soft = np.where(m, 0.9, 0.1).astype(np.float32)
        with pytest.raises(SegmentationFormatError):
            SegmentationFrame(
                masks=[
                    InstanceMask(mask=m, class_probs=np.array([1.0])),
                    InstanceMask(mask=m, class_probs=np.array([1.0])),
                ],
                soft_prob=soft,
                omega_rgb=0.5,
            )

    def test_distribution_must_sum_to_one(self):
        m = np.zeros((8, 8), dtype=bool)
        m[0, 0] = True
        with pytest.raises(SegmentationFormatError):
            InstanceMask(mask=m, class_probs=np.array([0.5, 0.4]))


def write_sequence_skeleton(root: Path, stamps, gt=True):
    (root / "rgb").mkdir(parents=True)
    (root / "depth").mkdir()
    rgb_lines, depth_lines = [], []
    for t in stamps:
        name = f"{t:.6f}.png"
        cv2.imwrite(str(root / "rgb" / name), np.zeros((8, 8, 3), dtype=np.uint8))
        cv2.imwrite(
            str(root / "depth" / name), np.full((8, 8), 5000, dtype=np.uint16)
        )
        rgb_lines.append(f"{t:.6f} rgb/{name}")
        depth_lines.append(f"{t:.6f} depth/{name}")
    (root / "rgb.txt").write_text("# header\n" + "\n".join(rgb_lines) + "\n")
    (root / "depth.txt").write_text("# header\n" + "\n".join(depth_lines) + "\n")
    if gt:
        traj = [(t, se3_exp(np.array([t, 0, 0, 0, 0, 0.1 * t]))) for t in stamps]
        write_trajectory(root / "groundtruth.txt", traj)


class TestSequenceLoading:
    def test_load_pairs_and_ground_truth(self, tmp_path):
        write_sequence_skeleton(tmp_path, [0.0, 0.1, 0.2])
        seq = load_sequence(tmp_path)
        assert len(seq) == 3
        assert seq.ground_truth is not None and len(seq.ground_truth) == 3
        assert [e.frame_id for e in seq.entries] == [
            "0.000000",
            "0.100000",
            "0.200000",
        ]

    def test_missing_association_list_raises(self, tmp_path):
        with pytest.raises(DatasetError):
            load_sequence(tmp_path / "nope")

    def test_missing_referenced_file_raises(self, tmp_path):
        write_sequence_skeleton(tmp_path, [0.0])
        (tmp_path / "depth" / "0.000000.png").unlink()
        with pytest.raises(DatasetError):
            load_sequence(tmp_path)

    def test_parse_error_carries_line_number(self, tmp_path):
        write_sequence_skeleton(tmp_path, [0.0])
        (tmp_path / "rgb.txt").write_text("# header\nnot-a-timestamp rgb/x.png\n")
        with pytest.raises(ParseError) as exc:
            load_sequence(tmp_path)
        assert exc.value.line_number == 2

    def test_trajectory_round_trip(self, tmp_path):
        traj = [
            (float(i), se3_exp(np.array([0.1 * i, 0, 0.02 * i, 0.01 * i, 0, 0.3])))
            for i in range(5)
        ]
        write_trajectory(tmp_path / "t.txt", traj)
        back = read_trajectory(tmp_path / "t.txt")
        assert len(back) == 5
        for (ta, pa), (tb, pb) in zip(traj, back):
            assert ta == pytest.approx(tb, abs=1e-6)
            np.testing.assert_allclose(pa.rotation, pb.rotation, atol=1e-9)
            np.testing.assert_allclose(pa.translation, pb.translation, atol=1e-9)
