"""Boundary recovery for misclassified surfels.

Background surfels whose fused non-background probability sits just below
the object threshold (0.4 < p < 0.5) accumulate a confidence counter over a
sliding window of frames. The counter increments only when the surfel's
pixel in the current frame has non-background probability above 0.4 and has
an object pixel in its neighborhood; at the end of each window, surfels
whose counter reached the promotion threshold are relabeled to the nearest
object instance and all counters reset.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .datasets import SegmentationFrame
from .surfels import BACKGROUND, ModelView, SurfelMap


@dataclass
class RefineConfig:
    window: int = 10  # frames per confidence window (n)
    sigma_object: int = 10  # promotion threshold
    band_low: float = 0.4
    band_high: float = 0.5
    neighborhood: str = "8"  # "8" or "4" pixel connectivity
    max_promotion_distance: float = 0.1  # metres; no promotion beyond this

    def __post_init__(self):
        if not (0.0 <= self.band_low < self.band_high <= 1.0):
            raise ValueError("band bounds must satisfy 0 <= low < high <= 1")
        if self.sigma_object > self.window:
            raise ValueError("sigma_object cannot exceed the window length")
        if self.neighborhood not in ("4", "8"):
            raise ValueError("neighborhood must be '4' or '8'")


@dataclass
class PromotionReport:
    frame_index: int
    promoted: dict[int, int] = field(default_factory=dict)  # instance -> count

    @property
    def total(self) -> int:
        return sum(self.promoted.values())


def _neighbor_has_object(object_px: np.ndarray, connectivity: str) -> np.ndarray:
    """True where at least one neighboring pixel (excluding self) is object."""
    h, w = object_px.shape
    out = np.zeros((h, w), dtype=bool)
    shifts = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    if connectivity == "8":
        shifts += [(-1, -1), (-1, 1), (1, -1), (1, 1)]
    for dv, du in shifts:
        src = object_px[
            max(0, -dv) : h - max(0, dv), max(0, -du) : w - max(0, du)
        ]
        out[max(0, dv) : h + min(0, dv), max(0, du) : w + min(0, du)] |= src
    return out


def _band_candidates(surfel_map: SurfelMap, cfg: RefineConfig) -> np.ndarray:
    return (
        surfel_map.alive
        & (surfel_map.labels == BACKGROUND)
        & (surfel_map.p_nonbg > cfg.band_low)
        & (surfel_map.p_nonbg < cfg.band_high)
    )


def _candidate_pixels(surfel_map: SurfelMap, cand_idx: np.ndarray, view: ModelView):
    """Project candidate surfel centers into the frame of `view`.

    The corresponding pixel of a surfel is its own projected center, not a
    pixel its splat happens to cover. Candidates projecting out of bounds or
    occluded by nearer geometry are dropped.
    """
    K = view.intrinsics
    inv = view.pose.inverse()
    p = surfel_map.positions[cand_idx] @ inv.rotation.T + inv.translation
    z = p[:, 2]
    front = z > 1e-9
    zs = np.where(front, z, 1.0)
    us = np.round(K.fx * p[:, 0] / zs + K.cx).astype(np.int64)
    vs = np.round(K.fy * p[:, 1] / zs + K.cy).astype(np.int64)
    ok = front & (us >= 0) & (us < K.width) & (vs >= 0) & (vs < K.height)
    cand_idx, us, vs, z = cand_idx[ok], us[ok], vs[ok], z[ok]
    rendered = view.index[vs, us]
    visible = (
        (rendered == cand_idx)
        | (rendered < 0)
        | (np.abs(view.depth[vs, us] - z) <= 0.05)
    )
    return cand_idx[visible], vs[visible], us[visible]


def refine_step(
    surfel_map: SurfelMap,
    seg: SegmentationFrame,
    view: ModelView,
    cfg: Optional[RefineConfig] = None,
) -> int:
    """Accumulate confidence for band surfels; returns how many incremented.

    Criterion (i): the surfel's pixel has non-background probability above
    the band's lower bound. Criterion (ii): an object pixel lies in the
    pixel's neighborhood, where object pixels are those inside any current
    segmentation mask or rendering an object-labeled surfel.
    """
    cfg = cfg or RefineConfig()
    cand = _band_candidates(surfel_map, cfg)
    if not np.any(cand):
        return 0

    idx, vs, us = _candidate_pixels(surfel_map, np.nonzero(cand)[0], view)
    if idx.size == 0:
        return 0

    object_px = view.instance > BACKGROUND
    for m in seg.masks:
        object_px |= m.mask
    neighbor_ok = _neighbor_has_object(object_px, cfg.neighborhood)

    ok = (seg.soft_prob[vs, us] > cfg.band_low) & neighbor_ok[vs, us]
    surfel_map.confidence[idx[ok]] += 1
    return int(np.count_nonzero(ok))


def refine_commit(
    surfel_map: SurfelMap,
    frame_index: int,
    cfg: Optional[RefineConfig] = None,
) -> PromotionReport:
    """End-of-window promotion: relabel confident band surfels, reset counters.

    Band membership is evaluated against the current non-background
    probability. A promoted surfel takes the instance label of the nearest
    object surfel within `max_promotion_distance`; candidates with no
    instance in range stay background. Every confidence counter resets to
    zero afterwards.
    """
    cfg = cfg or RefineConfig()
    report = PromotionReport(frame_index=frame_index)
    cand = _band_candidates(surfel_map, cfg)
    ready = cand & (surfel_map.confidence >= cfg.sigma_object)
    ready_idx = np.nonzero(ready)[0]

    if ready_idx.size:
        obj = np.nonzero(surfel_map.alive & (surfel_map.labels > BACKGROUND))[0]
        if obj.size:
            tree = cKDTree(surfel_map.positions[obj])
            dist, nn = tree.query(surfel_map.positions[ready_idx])
            within = dist <= cfg.max_promotion_distance
            winners = ready_idx[within]
            new_labels = surfel_map.labels[obj[nn[within]]]
            surfel_map.labels[winners] = new_labels
            for iid in np.unique(new_labels):
                report.promoted[int(iid)] = int(np.count_nonzero(new_labels == iid))

    surfel_map.confidence[:] = 0
    return report
