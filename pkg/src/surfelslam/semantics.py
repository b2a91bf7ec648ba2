"""Instance-level semantic fusion.

Incoming 2D masks are matched to existing 3D object instances by the overlap
ratio |M ∩ M̂| / |M̂| against masks predicted from the map (splatted
rendering), with association requiring the ratio to exceed 0.3 strictly.
Class distributions and per-surfel non-background probabilities are fused by
running averages, which never saturate the way recursive Bayesian updates do.

Storage is instance-based: one class-probability vector per object instance
plus a single scalar non-background probability per surfel, never a full
distribution per surfel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .datasets import InstanceMask, SegmentationFrame
from .surfels import BACKGROUND, FusionReport, ModelView, SurfelMap

PROB_TOL = 1e-6
MIN_OVERLAP = 0.3
MIN_NEW_INSTANCE_AREA = 50


def streaming_mean(mean, count, value):
    """One step of the running average (1/t) * sum, in streaming form."""
    return (count * mean + value) / (count + 1)


@dataclass
class ObjectInstance:
    """Object instance with a running-average class distribution."""

    id: int
    class_probs: np.ndarray
    obs_count: int = 1

    def __post_init__(self):
        self.class_probs = np.asarray(self.class_probs, dtype=np.float64)
        _check_distribution(self.class_probs)
        if self.obs_count < 1:
            raise ValueError("obs_count must be >= 1")

    @property
    def argmax_class(self) -> int:
        return int(np.argmax(self.class_probs))


def _check_distribution(probs: np.ndarray) -> None:
    if np.any(probs < -PROB_TOL) or np.any(probs > 1 + PROB_TOL):
        raise ValueError("class probability outside [0, 1]")
    if abs(float(probs.sum()) - 1.0) > PROB_TOL:
        raise ValueError(f"class probabilities sum to {probs.sum():.8f}, expected 1")


def update_class_distribution(instance: ObjectInstance, new_probs) -> ObjectInstance:
    """Streaming average update; mutates and returns the instance."""
    new_probs = np.asarray(new_probs, dtype=np.float64)
    _check_distribution(new_probs)
    instance.class_probs = streaming_mean(
        instance.class_probs, instance.obs_count, new_probs
    )
    instance.obs_count += 1
    return instance


class InstanceTable:
    """All object instances of a run, keyed by instance id (ids start at 1)."""

    def __init__(self, labels: Optional[list[str]] = None):
        self.labels: list[str] = list(labels) if labels else []
        self.instances: dict[int, ObjectInstance] = {}
        self._next_id = 1

    def __len__(self) -> int:
        return len(self.instances)

    def __contains__(self, instance_id: int) -> bool:
        return instance_id in self.instances

    def new_instance(self, class_probs) -> int:
        iid = self._next_id
        self._next_id += 1
        self.instances[iid] = ObjectInstance(id=iid, class_probs=class_probs)
        return iid

    def update(self, instance_id: int, class_probs) -> None:
        update_class_distribution(self.instances[instance_id], class_probs)

    def class_name(self, class_index: int) -> str:
        if 0 <= class_index < len(self.labels):
            return self.labels[class_index]
        return f"class_{class_index}"

    def export_text(self, path) -> None:
        """One record per instance: id, obs_count, argmax class, distribution."""
        lines = ["# id obs_count argmax_class distribution"]
        for iid, inst in sorted(self.instances.items()):
            dist = " ".join(f"{p:.6f}" for p in inst.class_probs)
            lines.append(
                f"{iid} {inst.obs_count} {self.class_name(inst.argmax_class)} {dist}"
            )
        Path(path).write_text("\n".join(lines) + "\n")


def update_nonbackground(surfel_map: SurfelMap, indices: np.ndarray, probs: np.ndarray):
    """Running-average update of per-surfel non-background probabilities."""
    probs = np.asarray(probs, dtype=np.float64)
    if np.any(probs < 0) or np.any(probs > 1):
        raise ValueError("non-background probability outside [0, 1]")
    t = surfel_map.p_obs[indices]
    surfel_map.p_nonbg[indices] = streaming_mean(
        surfel_map.p_nonbg[indices], t, probs
    )
    surfel_map.p_obs[indices] = t + 1


def predict_instance_masks(view: ModelView) -> dict[int, np.ndarray]:
    """Binary mask per instance with at least one visible rendered surfel."""
    out = {}
    for iid in np.unique(view.instance):
        if iid == BACKGROUND:
            continue
        mask = view.instance == iid
        if np.any(mask):
            out[int(iid)] = mask
    return out


def mask_canonical_key(mask: np.ndarray) -> int:
    """Order-free identity of a mask: flat index of its first set pixel."""
    return int(np.flatnonzero(mask.reshape(-1))[0])


def associate_masks(
    masks: list[InstanceMask],
    predicted: dict[int, np.ndarray],
    min_overlap: float = MIN_OVERLAP,
) -> list[Optional[int]]:
    """Map each input mask to an existing instance or None (new instance).

    A mask goes to the instance whose predicted mask maximizes
    U = |M ∩ M̂| / |M̂|, provided U > min_overlap strictly. Each instance
    absorbs at most one mask per frame; conflicts resolve greedily by larger
    U, the loser falling through to its next-best candidate. Ties break on
    the masks' canonical pixel key then instance id, so the result does not
    depend on input order.
    """
    candidates = []
    for i, m in enumerate(masks):
        key = mask_canonical_key(m.mask)
        for iid, pred in predicted.items():
            denom = int(np.count_nonzero(pred))
            if denom == 0:
                continue
            overlap = int(np.count_nonzero(m.mask & pred)) / denom
            if overlap > min_overlap:
                candidates.append((-overlap, key, iid, i))
    candidates.sort()

    assigned: list[Optional[int]] = [None] * len(masks)
    taken_instances: set[int] = set()
    done_masks: set[int] = set()
    for _, _, iid, i in candidates:
        if i in done_masks or iid in taken_instances:
            continue
        assigned[i] = iid
        taken_instances.add(iid)
        done_masks.add(i)
    return assigned


@dataclass
class SemanticFrameSummary:
    assignments: dict[int, Optional[int]] = field(default_factory=dict)
    new_instances: list[int] = field(default_factory=list)
    surfels_relabeled: int = 0
    surfels_updated: int = 0


def fuse_semantic_frame(
    surfel_map: SurfelMap,
    table: InstanceTable,
    seg: SegmentationFrame,
    view: ModelView,
    fusion_report: FusionReport,
    min_new_area: int = MIN_NEW_INSTANCE_AREA,
) -> SemanticFrameSummary:
    """Fuse one frame's segmentation into the map and instance table.

    Runs mask prediction and association, updates class distributions (new
    instances require `min_new_area` pixels), relabels surfels created by the
    preceding fuse_frame from the associated masks, and folds the soft
    non-background probabilities into every surfel with a corresponding
    pixel. A surfel covering several rendered pixels takes the mean soft
    probability over them, one running-average step per frame.
    """
    summary = SemanticFrameSummary()
    if seg.labels and not table.labels:
        table.labels = list(seg.labels)

    predicted = predict_instance_masks(view)
    assigned = associate_masks(seg.masks, predicted)

    # allocate new ids in canonical-key order (input order must not matter)
    order = sorted(range(len(seg.masks)), key=lambda i: mask_canonical_key(seg.masks[i].mask))
    for i in order:
        mask = seg.masks[i]
        if assigned[i] is not None:
            table.update(assigned[i], mask.class_probs)
        elif mask.area >= min_new_area:
            iid = table.new_instance(mask.class_probs)
            assigned[i] = iid
            summary.new_instances.append(iid)
        summary.assignments[i] = assigned[i]

    # per-pixel instance ids of this frame's associated masks
    combined = np.zeros(seg.soft_prob.shape, dtype=np.int32)
    for i, mask in enumerate(seg.masks):
        if assigned[i] is not None:
            combined[mask.mask] = assigned[i]

    created = fusion_report.created_surfels
    if created.size:
        pv, pu = fusion_report.created_pixels[:, 0], fusion_report.created_pixels[:, 1]
        lbl = combined[pv, pu]
        relabel = lbl > 0
        surfel_map.labels[created[relabel]] = lbl[relabel]
        summary.surfels_relabeled = int(np.count_nonzero(relabel))

    # soft-probability update for every surfel with a corresponding pixel
    soft = seg.soft_prob.astype(np.float64)
    vis = view.valid
    vis_idx = view.index[vis]
    vis_soft = soft[vis]
    live = surfel_map.alive[vis_idx]
    vis_idx, vis_soft = vis_idx[live], vis_soft[live]
    if vis_idx.size:
        uniq, inverse = np.unique(vis_idx, return_inverse=True)
        sums = np.zeros(uniq.size)
        counts = np.zeros(uniq.size)
        np.add.at(sums, inverse, vis_soft)
        np.add.at(counts, inverse, 1.0)
        update_nonbackground(surfel_map, uniq, sums / counts)
        summary.surfels_updated += uniq.size
    if created.size:
        pv, pu = fusion_report.created_pixels[:, 0], fusion_report.created_pixels[:, 1]
        update_nonbackground(surfel_map, created, soft[pv, pu])
        summary.surfels_updated += created.size
    return summary


def memory_breakdown(table: InstanceTable) -> int:
    """Number of class-probability floats currently stored."""
    return sum(inst.class_probs.size for inst in table.instances.values())
