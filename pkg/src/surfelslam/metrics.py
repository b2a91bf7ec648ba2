"""Trajectory, reconstruction, segmentation, and memory evaluation.

ATE RMSE follows the TUM benchmark protocol: match poses by timestamp,
rigidly align the estimated trajectory onto the ground truth in closed form
(SVD least squares), and report the RMSE of the residual translations.
Reconstruction error registers the model cloud onto the truth with
point-to-point ICP and reports the mean distance of every model vertex to
the truth surface.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from scipy.spatial import cKDTree

from .errors import InsufficientOverlapError, RegistrationFailureError
from .geometry import Pose
from .synth import Box, Plane, ScenePrimitive, Sphere

Trajectory = Sequence[tuple[float, Pose]]


def align_rigid(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Closed-form least-squares rigid transform mapping src onto dst."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.linalg.det(Vt.T @ U.T)])
    R = Vt.T @ D @ U.T
    return Pose(R, cd - R @ cs)


def match_trajectories(
    estimated: Trajectory, truth: Trajectory, max_dt: float = 0.02
):
    """Greedy nearest-timestamp matching; returns paired (N,3) translations."""
    cand = []
    for i, (ta, _) in enumerate(estimated):
        for j, (tb, _) in enumerate(truth):
            dt = abs(ta - tb)
            if dt <= max_dt:
                cand.append((dt, i, j))
    cand.sort()
    used_a, used_b, pairs = set(), set(), []
    for _, i, j in cand:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j))
    pairs.sort()
    est = np.array([estimated[i][1].translation for i, _ in pairs])
    gt = np.array([truth[j][1].translation for _, j in pairs])
    return est, gt


def ate_rmse(estimated: Trajectory, truth: Trajectory, max_dt: float = 0.02) -> float:
    """Absolute trajectory error RMSE after optimal rigid alignment."""
    est, gt = match_trajectories(estimated, truth, max_dt)
    if len(est) < 2:
        raise InsufficientOverlapError(
            f"only {len(est)} timestamp-matched pose pairs (need >= 2)"
        )
    T = align_rigid(est, gt)
    residual = T.apply(est) - gt
    return float(np.sqrt(np.mean(np.sum(residual**2, axis=-1))))


def iou(predicted_mask: np.ndarray, truth_mask: np.ndarray) -> float:
    """Intersection over union; both masks empty counts as 1."""
    if predicted_mask.shape != truth_mask.shape:
        raise ValueError(
            f"mask shapes differ: {predicted_mask.shape} vs {truth_mask.shape}"
        )
    union = np.count_nonzero(predicted_mask | truth_mask)
    if union == 0:
        return 1.0
    inter = np.count_nonzero(predicted_mask & truth_mask)
    return inter / union


# ---------------------------------------------------------------------------
# surface reconstruction error


def _closest_on_primitives(primitives, pts: np.ndarray):
    """Closest surface points and distances over a primitive list."""
    best_d = np.full(len(pts), np.inf)
    best_p = np.zeros_like(pts)
    for prim in primitives:
        if isinstance(prim, Sphere):
            rel = pts - prim.center
            norm = np.linalg.norm(rel, axis=-1, keepdims=True)
            norm[norm < 1e-12] = 1.0
            closest = prim.center + prim.radius * rel / norm
        elif isinstance(prim, Plane):
            rel = pts - prim.point
            a = np.clip(rel @ prim._e1, -prim.extent[0], prim.extent[0])
            b = np.clip(rel @ prim._e2, -prim.extent[1], prim.extent[1])
            closest = prim.point + a[:, None] * prim._e1 + b[:, None] * prim._e2
        elif isinstance(prim, Box):
            rel = pts - prim.center
            he = prim.half_extents
            clamped = np.clip(rel, -he, he)
            inside = np.all(np.abs(rel) < he, axis=-1)
            if np.any(inside):
                # push interior points out through the nearest face
                gap = he - np.abs(rel[inside])
                axis = np.argmin(gap, axis=-1)
                rows = np.arange(len(gap))
                c = clamped[inside]
                c[rows, axis] = np.sign(rel[inside][rows, axis]) * he[axis]
                clamped[inside] = c
            closest = prim.center + clamped
        else:
            raise TypeError(f"unsupported truth primitive {type(prim)!r}")
        d = np.linalg.norm(pts - closest, axis=-1)
        better = d < best_d
        best_d[better] = d[better]
        best_p[better] = closest[better]
    return best_p, best_d


def _closest_points(truth, pts: np.ndarray):
    if isinstance(truth, np.ndarray):
        tree = cKDTree(truth)
        d, nn = tree.query(pts)
        return truth[nn], d
    return _closest_on_primitives(truth, pts)


def _principal_axes(pts: np.ndarray) -> np.ndarray:
    c = pts - pts.mean(axis=0)
    _, _, Vt = np.linalg.svd(c, full_matrices=False)
    R = Vt.T
    if np.linalg.det(R) < 0:
        R[:, 2] = -R[:, 2]
    return R


def register_clouds(
    model: np.ndarray,
    truth,
    max_iterations: int = 50,
    tol: float = 1e-10,
) -> Pose:
    """Rigid ICP of the model cloud onto the truth.

    Initialization aligns centroids and principal axes (trying the four
    det-+1 sign combinations); iterations alternate closest-point lookup and
    closed-form alignment.
    """
    model = np.asarray(model, dtype=np.float64)
    truth_centroid = (
        truth.mean(axis=0)
        if isinstance(truth, np.ndarray)
        else _closest_points(truth, model)[0].mean(axis=0)
    )
    Rm = _principal_axes(model)
    if isinstance(truth, np.ndarray):
        Rt = _principal_axes(truth)
    else:
        Rt = np.eye(3)

    best_pose, best_err = None, np.inf
    cm = model.mean(axis=0)
    candidates = [Pose.identity()]  # pre-aligned inputs must stay put
    for sx, sy in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
        S = np.diag([sx, sy, sx * sy])
        R0 = Rt @ S @ Rm.T
        candidates.append(Pose(R0, truth_centroid - R0 @ cm))
    for cand in candidates:
        _, d = _closest_points(truth, cand.apply(model))
        err = float(np.mean(d))
        if err < best_err:
            best_pose, best_err = cand, err

    pose = best_pose
    initial_err = best_err
    prev = np.inf
    for _ in range(max_iterations):
        moved = pose.apply(model)
        closest, d = _closest_points(truth, moved)
        err = float(np.mean(d))
        if not np.isfinite(err):
            raise RegistrationFailureError("ICP produced non-finite error")
        if abs(prev - err) < tol:
            break
        prev = err
        step = align_rigid(moved, closest)
        pose = step @ pose
    if prev > initial_err * 1.5 + 1e-9:
        raise RegistrationFailureError(
            f"ICP diverged: error {prev:.6f} vs initial {initial_err:.6f}"
        )
    return pose


def reconstruction_error(model_points: np.ndarray, truth, **icp_kwargs) -> float:
    """Mean distance from registered model vertices to the truth surface."""
    model_points = np.asarray(model_points, dtype=np.float64)
    if len(model_points) == 0:
        raise ValueError("model cloud is empty")
    if isinstance(truth, np.ndarray) and len(truth) == 0:
        raise ValueError("truth cloud is empty")
    pose = register_clouds(model_points, truth, **icp_kwargs)
    _, d = _closest_points(truth, pose.apply(model_points))
    return float(np.mean(d))


# ---------------------------------------------------------------------------
# memory accounting


@dataclass(frozen=True)
class MemoryReport:
    instance_based_bytes: int
    per_element_bytes: int

    @property
    def ratio(self) -> float:
        if self.per_element_bytes == 0:
            return 0.0
        return self.instance_based_bytes / self.per_element_bytes


def memory_report(surfels, instances, class_count: int) -> MemoryReport:
    """Class-probability storage: instance-based vs per-surfel schemes.

    Both schemes count 4 bytes per stored float. The instance-based scheme
    stores one distribution per instance plus a label and a non-background
    scalar per surfel; the conventional scheme stores a full distribution on
    every surfel.
    """
    n_surfels = surfels if isinstance(surfels, int) else surfels.alive_count
    n_instances = instances if isinstance(instances, int) else len(instances)
    instance_based = n_instances * class_count * 4 + n_surfels * (4 + 4)
    per_element = n_surfels * class_count * 4
    return MemoryReport(
        instance_based_bytes=int(instance_based),
        per_element_bytes=int(per_element),
    )
