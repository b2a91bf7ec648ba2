"""TUM-format RGB-D sequence loading and segmentation sidecar files.

Depth images follow the TUM benchmark convention: 16-bit PNG with
metres = raw / 5000. Segmentation comes from per-frame sidecar directories
`seg/<frame-id>/` holding:

  inst.png   16-bit single channel; 0 = background, k = mask index k
  soft.png   16-bit single channel; non-background probability x 65535
  meta.json  omega_rgb scalar, the class label set, and one class
             probability vector per mask index

`<frame-id>` is the color image's filename stem.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import cv2
import numpy as np

from .errors import DatasetError, ParseError, SegmentationFormatError
from .geometry import Pose, RgbdFrame

DEPTH_SCALE = 5000.0
PROB_TOL = 1e-6
SOFT_QUANT = 1.0 / 65535.0


@dataclass(frozen=True)
class InstanceMask:
    """Binary detection mask with its class probability distribution."""

    mask: np.ndarray
    class_probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.class_probs, dtype=np.float64)
        if probs.ndim != 1 or probs.size == 0:
            raise SegmentationFormatError("class_probs must be a non-empty vector")
        if np.any(probs < -PROB_TOL) or np.any(probs > 1 + PROB_TOL):
            raise SegmentationFormatError("class probability outside [0, 1]")
        if abs(probs.sum() - 1.0) > PROB_TOL:
            raise SegmentationFormatError(
                f"class probabilities sum to {probs.sum():.8f}, expected 1"
            )
        if not np.any(self.mask):
            raise SegmentationFormatError("empty instance mask")
        object.__setattr__(self, "class_probs", probs)

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.mask))


@dataclass(frozen=True)
class SegmentationFrame:
    """Per-frame segmentation input: masks, soft probability map, weight."""

    masks: list[InstanceMask]
    soft_prob: np.ndarray
    omega_rgb: float
    labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        soft = np.asarray(self.soft_prob, dtype=np.float32)
        if np.any(soft < 0) or np.any(soft > 1):
            raise SegmentationFormatError("soft_prob outside [0, 1]")
        if not (0.0 <= self.omega_rgb <= 1.0):
            raise SegmentationFormatError(f"omega_rgb {self.omega_rgb} outside [0, 1]")
        occupied = np.zeros(soft.shape, dtype=bool)
        for m in self.masks:
            if m.mask.shape != soft.shape:
                raise SegmentationFormatError("mask and soft_prob shapes differ")
            if np.any(occupied & m.mask):
                raise SegmentationFormatError("instance masks overlap")
            occupied |= m.mask
            if np.any(soft[m.mask] < 0.5 - SOFT_QUANT):
                raise SegmentationFormatError("mask pixel with soft_prob < 0.5")
        object.__setattr__(self, "soft_prob", soft)

    @staticmethod
    def empty(shape, omega_rgb: float, labels: Optional[list[str]] = None):
        return SegmentationFrame(
            masks=[],
            soft_prob=np.zeros(shape, dtype=np.float32),
            omega_rgb=omega_rgb,
            labels=labels or [],
        )


@dataclass(frozen=True)
class SequenceEntry:
    timestamp: float
    color_path: Path
    depth_path: Path
    seg_dir: Optional[Path]

    @property
    def frame_id(self) -> str:
        return self.color_path.stem


@dataclass
class SequenceIndex:
    """Paired color/depth entries plus the optional ground-truth trajectory."""

    root: Path
    entries: list[SequenceEntry]
    ground_truth: Optional[list[tuple[float, Pose]]] = None

    def __len__(self) -> int:
        return len(self.entries)


def _read_association_list(path: Path) -> list[tuple[float, str]]:
    if not path.is_file():
        raise DatasetError(f"missing association list {path}")
    out = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 2:
            raise ParseError(path, lineno, f"expected 'timestamp path', got {raw!r}")
        try:
            stamp = float(parts[0])
        except ValueError:
            raise ParseError(path, lineno, f"bad timestamp {parts[0]!r}") from None
        out.append((stamp, parts[1]))
    return out


def _read_groundtruth(path: Path) -> list[tuple[float, Pose]]:
    out = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise ParseError(path, lineno, "expected 'timestamp tx ty tz qx qy qz qw'")
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            raise ParseError(path, lineno, f"non-numeric field in {raw!r}") from None
        out.append((vals[0], Pose.from_quaternion(vals[1:4], vals[4:8])))
    return out


def _pair_nearest(
    rgb: list[tuple[float, str]], depth: list[tuple[float, str]], max_gap: float
) -> list[tuple[int, int]]:
    """Greedy nearest-timestamp pairing, each entry used at most once."""
    candidates = []
    for i, (ta, _) in enumerate(rgb):
        for j, (tb, _) in enumerate(depth):
            dt = abs(ta - tb)
            if dt <= max_gap:
                candidates.append((dt, i, j))
    candidates.sort()
    used_a, used_b = set(), set()
    pairs = []
    for _, i, j in candidates:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j))
    pairs.sort()
    return pairs


def load_sequence(
    root, max_time_gap: float = 0.02, seg_dir=None
) -> SequenceIndex:
    """Index a TUM-layout sequence directory.

    Color and depth entries are paired by nearest timestamp with gap at most
    `max_time_gap`; unmatched entries are dropped. Ground truth is read from
    `groundtruth.txt` when present. Segmentation sidecars are looked up under
    `seg_dir` (default `<root>/seg`) but may be absent per frame.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset directory {root} does not exist")
    rgb = _read_association_list(root / "rgb.txt")
    depth = _read_association_list(root / "depth.txt")
    seg_root = Path(seg_dir) if seg_dir is not None else root / "seg"

    entries = []
    for i, j in _pair_nearest(rgb, depth, max_time_gap):
        stamp, color_rel = rgb[i]
        _, depth_rel = depth[j]
        color_path = root / color_rel
        depth_path = root / depth_rel
        for p in (color_path, depth_path):
            if not p.is_file():
                raise DatasetError(f"referenced file {p} does not exist")
        frame_seg = seg_root / color_path.stem
        entries.append(
            SequenceEntry(
                timestamp=stamp,
                color_path=color_path,
                depth_path=depth_path,
                seg_dir=frame_seg if frame_seg.is_dir() else None,
            )
        )

    gt_path = root / "groundtruth.txt"
    ground_truth = _read_groundtruth(gt_path) if gt_path.is_file() else None
    return SequenceIndex(root=root, entries=entries, ground_truth=ground_truth)


def decode_depth(raw: np.ndarray) -> np.ndarray:
    """16-bit TUM depth to metres; raw 5000 is exactly 1.000 m."""
    return raw.astype(np.float32) / DEPTH_SCALE


def encode_depth(metres: np.ndarray) -> np.ndarray:
    vals = np.round(np.asarray(metres, dtype=np.float64) * DEPTH_SCALE)
    return np.clip(vals, 0, 65535).astype(np.uint16)


def load_frame(entry: SequenceEntry, depth_max: float = 6.0) -> RgbdFrame:
    """Read one RGB-D frame from disk; depths beyond depth_max are dropped."""
    bgr = cv2.imread(str(entry.color_path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise DatasetError(f"cannot read color image {entry.color_path}")
    raw = cv2.imread(str(entry.depth_path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise DatasetError(f"cannot read depth image {entry.depth_path}")
    if raw.ndim != 2:
        raise DatasetError(f"depth image {entry.depth_path} is not single channel")
    color = cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0
    depth = decode_depth(raw)
    depth[depth >= depth_max] = 0.0
    if color.shape[:2] != depth.shape:
        raise DatasetError(
            f"color {color.shape[:2]} vs depth {depth.shape} size mismatch "
            f"for frame {entry.frame_id}"
        )
    return RgbdFrame(timestamp=entry.timestamp, color=color, depth=depth)


def _write_png16(path: Path, data: np.ndarray) -> None:
    if not cv2.imwrite(str(path), data.astype(np.uint16)):
        raise DatasetError(f"failed to write {path}")


def load_segmentation(
    seg_frame_dir,
    default_omega: float = 0.1,
    expected_shape=None,
) -> SegmentationFrame:
    """Load the sidecar for one frame.

    A missing directory yields an empty SegmentationFrame with the default
    omega weight and, if given, the expected image shape.
    """
    seg_frame_dir = Path(seg_frame_dir) if seg_frame_dir is not None else None
    if seg_frame_dir is None or not seg_frame_dir.is_dir():
        shape = expected_shape if expected_shape is not None else (0, 0)
        return SegmentationFrame.empty(shape, default_omega)

    inst_path = seg_frame_dir / "inst.png"
    soft_path = seg_frame_dir / "soft.png"
    meta_path = seg_frame_dir / "meta.json"
    for p in (inst_path, soft_path, meta_path):
        if not p.is_file():
            raise DatasetError(f"segmentation sidecar incomplete: missing {p}")

    inst = cv2.imread(str(inst_path), cv2.IMREAD_UNCHANGED)
    soft_raw = cv2.imread(str(soft_path), cv2.IMREAD_UNCHANGED)
    if inst is None or soft_raw is None:
        raise DatasetError(f"cannot read sidecar images in {seg_frame_dir}")
    if inst.shape != soft_raw.shape:
        raise SegmentationFormatError(
            f"inst {inst.shape} vs soft {soft_raw.shape} shape mismatch"
        )
    if expected_shape is not None and tuple(inst.shape) != tuple(expected_shape):
        raise SegmentationFormatError(
            f"sidecar shape {inst.shape} does not match frame {expected_shape}"
        )

    meta = json.loads(meta_path.read_text())
    omega = float(meta.get("omega_rgb", default_omega))
    labels = list(meta.get("labels", []))
    soft = soft_raw.astype(np.float32) / 65535.0

    mask_meta = {int(m["index"]): m["class_probs"] for m in meta.get("masks", [])}
    indices = sorted(int(k) for k in np.unique(inst) if k != 0)
    masks = []
    for k in indices:
        if k not in mask_meta:
            raise SegmentationFormatError(
                f"mask index {k} present in inst.png but missing from meta.json"
            )
        masks.append(InstanceMask(mask=inst == k, class_probs=mask_meta[k]))
    return SegmentationFrame(
        masks=masks, soft_prob=soft, omega_rgb=omega, labels=labels
    )


def save_segmentation(seg_frame_dir, seg: SegmentationFrame) -> None:
    """Write the sidecar files for one frame (inverse of load_segmentation)."""
    seg_frame_dir = Path(seg_frame_dir)
    seg_frame_dir.mkdir(parents=True, exist_ok=True)
    shape = seg.soft_prob.shape
    inst = np.zeros(shape, dtype=np.uint16)
    mask_records = []
    for k, m in enumerate(seg.masks, start=1):
        inst[m.mask] = k
        mask_records.append(
            {"index": k, "class_probs": [float(p) for p in m.class_probs]}
        )
    _write_png16(seg_frame_dir / "inst.png", inst)
    _write_png16(
        seg_frame_dir / "soft.png",
        np.round(seg.soft_prob.astype(np.float64) * 65535.0),
    )
    meta = {
        "omega_rgb": float(seg.omega_rgb),
        "labels": list(seg.labels),
        "masks": mask_records,
    }
    (seg_frame_dir / "meta.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n"
    )


def write_trajectory(path, trajectory: list[tuple[float, Pose]]) -> None:
    """Write 'timestamp tx ty tz qx qy qz qw' lines (TUM format)."""
    lines = ["# timestamp tx ty tz qx qy qz qw"]
    for stamp, pose in trajectory:
        t = pose.translation
        q = pose.to_quaternion()
        lines.append(
            f"{stamp:.6f} "
            + " ".join(repr(float(v)) for v in (t[0], t[1], t[2], q[0], q[1], q[2], q[3]))
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory(path) -> list[tuple[float, Pose]]:
    return _read_groundtruth(Path(path))
