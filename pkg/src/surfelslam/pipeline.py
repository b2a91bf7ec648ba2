"""Pipeline driver: load -> segment-ingest -> track -> fuse -> refine -> evaluate.

Per-frame stage order is fixed: segmentation ingest, pose solve, geometric
fusion, semantic fusion, refinement step (commit every n frames), inactivity
marking. The first frame initializes the map at the identity pose. All
stages are deterministic, so identical inputs and configuration produce
byte-identical output files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import cv2
import numpy as np

from . import report as report_mod
from .datasets import (
    SegmentationFrame,
    load_frame,
    load_segmentation,
    load_sequence,
    write_trajectory,
)
from .errors import DatasetError, TrackingLostError
from .geometry import Intrinsics, Pose
from .metrics import ate_rmse, iou, match_trajectories, memory_report, reconstruction_error
from .refine import RefineConfig, refine_commit, refine_step
from .semantics import InstanceTable, fuse_semantic_frame
from .surfels import FusionConfig, SurfelMap
from .synth import scene_from_json
from .tracking import RegistrationConfig, solve


@dataclass
class RunConfig:
    dataset: Path
    out_dir: Path
    seg_dir: Optional[Path] = None
    intrinsics: Optional[Intrinsics] = None
    omega_mode: str = "sidecar"  # sidecar | const | off
    omega_const: float = 0.1
    frame_range: Optional[tuple[int, int]] = None  # inclusive indices
    evals: tuple = ("ate", "mem")
    depth_max: float = 6.0
    max_time_gap: float = 0.02
    refine_enabled: bool = True
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)

    def __post_init__(self):
        self.dataset = Path(self.dataset)
        self.out_dir = Path(self.out_dir)
        if self.seg_dir is not None:
            self.seg_dir = Path(self.seg_dir)
        if self.omega_mode not in ("sidecar", "const", "off"):
            raise ValueError(f"unknown omega mode {self.omega_mode!r}")
        if self.frame_range is not None:
            a, b = self.frame_range
            if a < 0 or b < a:
                raise ValueError(f"invalid frame range [{a}, {b}]")


@dataclass
class PipelineResult:
    trajectory: list
    surfel_map: SurfelMap
    instances: InstanceTable
    metrics: dict
    out_dir: Path


def _resolve_intrinsics(cfg: RunConfig, probe_shape) -> Intrinsics:
    if cfg.intrinsics is not None:
        return cfg.intrinsics
    intr_file = cfg.dataset / "intrinsics.txt"
    if intr_file.is_file():
        vals = intr_file.read_text().split()
        return Intrinsics(
            fx=float(vals[0]),
            fy=float(vals[1]),
            cx=float(vals[2]),
            cy=float(vals[3]),
            width=int(vals[4]),
            height=int(vals[5]),
        )
    # TUM defaults, scaled to the actual image size
    h, w = probe_shape
    s = w / 640.0
    return Intrinsics(
        fx=525.0 * s, fy=525.0 * s,
        cx=(319.5 + 0.5) * s - 0.5, cy=(239.5 + 0.5) * s - 0.5,
        width=w, height=h,
    )


def _frame_omega(cfg: RunConfig, seg: SegmentationFrame) -> float:
    if cfg.omega_mode == "off":
        return 0.0
    if cfg.omega_mode == "const":
        return cfg.omega_const
    return seg.omega_rgb


def run_pipeline(cfg: RunConfig) -> PipelineResult:
    """Run the full mapping pipeline and write all artifacts to cfg.out_dir."""
    seq = load_sequence(cfg.dataset, cfg.max_time_gap, seg_dir=cfg.seg_dir)
    if not seq.entries:
        raise DatasetError(f"no paired frames found under {cfg.dataset}")
    entries = seq.entries
    if cfg.frame_range is not None:
        a, b = cfg.frame_range
        entries = entries[a : b + 1]
        if not entries:
            raise DatasetError(f"frame range [{a}, {b}] selects no frames")

    first = load_frame(entries[0], cfg.depth_max)
    K = _resolve_intrinsics(cfg, first.depth.shape)
    if (K.height, K.width) != first.depth.shape:
        raise DatasetError(
            f"intrinsics {K.width}x{K.height} do not match frames "
            f"{first.depth.shape[1]}x{first.depth.shape[0]}"
        )

    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    fig_dir = cfg.out_dir / "figures"
    fig_dir.mkdir(exist_ok=True)

    surfel_map = SurfelMap()
    table = InstanceTable()
    trajectory: list[tuple[float, Pose]] = []
    promotion_lines: list[str] = []
    pose = Pose.identity()

    for i, entry in enumerate(entries):
        frame = first if i == 0 else load_frame(entry, cfg.depth_max)
        seg = load_segmentation(
            entry.seg_dir,
            default_omega=cfg.registration.omega_rgb_default,
            expected_shape=frame.depth.shape,
        )
        omega = _frame_omega(cfg, seg)

        if i > 0:
            result = solve(frame, surfel_map, pose, K, omega, cfg.registration)
            pose = result.pose

        view = surfel_map.render(pose, K)
        fusion = surfel_map.fuse_frame(frame, pose, K, frame_index=i, cfg=cfg.fusion)
        fuse_semantic_frame(surfel_map, table, seg, view, fusion)
        if cfg.refine_enabled:
            refine_step(surfel_map, seg, view, cfg.refine)
            if (i + 1) % cfg.refine.window == 0:
                promo = refine_commit(surfel_map, i, cfg.refine)
                for iid, count in sorted(promo.promoted.items()):
                    promotion_lines.append(f"frame={i} instance={iid} promoted={count}")
        surfel_map.mark_inactive(i, cfg.fusion.inactive_window)
        trajectory.append((frame.timestamp, pose))

    # ---- artifacts
    write_trajectory(cfg.out_dir / "trajectory.txt", trajectory)
    surfel_map.export_ply(cfg.out_dir / "map.ply")
    table.export_text(cfg.out_dir / "instances.txt")
    (cfg.out_dir / "promotions.log").write_text(
        ("\n".join(promotion_lines) + "\n") if promotion_lines else ""
    )

    metrics = _evaluate(cfg, seq, entries, trajectory, surfel_map, table, K, fig_dir)
    metrics["frames"] = len(trajectory)
    metrics["surfels"] = surfel_map.alive_count
    metrics["instances"] = len(table)
    report_mod.write_key_values(cfg.out_dir / "metrics.txt", metrics)
    report_mod.write_text_report(cfg.out_dir / "report.txt", "surfelslam run report", metrics)
    return PipelineResult(
        trajectory=trajectory,
        surfel_map=surfel_map,
        instances=table,
        metrics=metrics,
        out_dir=cfg.out_dir,
    )


def _evaluate(cfg, seq, entries, trajectory, surfel_map, table, K, fig_dir) -> dict:
    metrics: dict = {}
    evals = set(cfg.evals)

    if "ate" in evals and seq.ground_truth:
        try:
            metrics["ate_rmse_m"] = f"{ate_rmse(trajectory, seq.ground_truth):.9f}"
            report_mod.plot_trajectory(
                fig_dir / "trajectory.png", trajectory, seq.ground_truth
            )
        except Exception as exc:  # insufficient overlap stays non-fatal
            metrics["ate_error"] = str(exc)
    elif "ate" in evals:
        metrics["ate_error"] = "no ground truth available"

    if "recon" in evals:
        truth_file = cfg.dataset / "truth" / "scene.json"
        if truth_file.is_file():
            scene = scene_from_json(json.loads(truth_file.read_text()))
            per_object, weights = [], []
            for iid, truth_prims, model_pts in match_truth_instances(
                surfel_map, table, scene
            ):
                mu = reconstruction_error(model_pts, truth_prims)
                metrics[f"recon_mean_m_instance_{iid}"] = f"{mu:.9f}"
                per_object.append(mu)
                weights.append(len(model_pts))
            if per_object:
                overall = float(np.average(per_object, weights=weights))
                metrics["recon_mean_m"] = f"{overall:.9f}"
            else:
                metrics["recon_error"] = "no labeled objects to evaluate"
        else:
            metrics["recon_error"] = "no truth model available"

    if "iou" in evals:
        values = _reprojected_iou(cfg, entries, trajectory, surfel_map, K)
        if values:
            metrics["iou_mean"] = f"{float(np.mean(values)):.6f}"
            report_mod.plot_iou_curve(fig_dir / "iou.png", values)
        else:
            metrics["iou_error"] = "no truth instance maps available"

    if "mem" in evals:
        mem = memory_report(surfel_map, table, max(len(table.labels), 1))
        metrics["memory_instance_based_bytes"] = mem.instance_based_bytes
        metrics["memory_per_element_bytes"] = mem.per_element_bytes
        metrics["memory_ratio"] = f"{mem.ratio:.6f}"
        report_mod.plot_memory(fig_dir / "memory.png", mem)

    return metrics


def match_truth_instances(surfel_map, table, scene, min_surfels: int = 10):
    """Pair mapped instances with truth instances by raw surface proximity.

    Mapped instance ids are allocation order and carry no relation to the
    scene's ids, so each mapped object greedily takes the closest truth
    object (one-to-one). Yields (mapped id, truth primitives, model points).
    """
    from .metrics import _closest_points

    truth_ids = sorted(
        {p.instance_id for p in scene.primitives if p.instance_id is not None}
    )
    clouds = {}
    for iid in sorted(table.instances):
        pts = surfel_map.positions[surfel_map.alive & (surfel_map.labels == iid)]
        if len(pts) >= min_surfels:
            clouds[iid] = pts
    dist = []
    for iid, pts in clouds.items():
        for tid in truth_ids:
            prims = [p for p in scene.primitives if p.instance_id == tid]
            _, d = _closest_points(prims, pts)
            dist.append((float(np.mean(d)), iid, tid))
    dist.sort()
    used_m, used_t = set(), set()
    pairs = []
    for _, iid, tid in dist:
        if iid in used_m or tid in used_t:
            continue
        used_m.add(iid)
        used_t.add(tid)
        prims = [p for p in scene.primitives if p.instance_id == tid]
        pairs.append((iid, prims, clouds[iid]))
    pairs.sort(key=lambda p: p[0])
    return pairs


def _reprojected_iou(cfg, entries, trajectory, surfel_map, K) -> list[float]:
    """Union-of-objects IoU of the final map reprojected at each frame pose."""
    values = []
    for (stamp, pose), entry in zip(trajectory, entries):
        truth_path = cfg.dataset / "truth" / "inst" / f"{entry.frame_id}.png"
        if not truth_path.is_file():
            continue
        true_inst = cv2.imread(str(truth_path), cv2.IMREAD_UNCHANGED)
        if true_inst is None:
            continue
        view = surfel_map.render(pose, K)
        values.append(iou(view.instance > 0, true_inst > 0))
    return values


def run_ablation(cfg: RunConfig, omega_values) -> list[dict]:
    """Run the pipeline once per omega setting; per-row failures are recorded.

    Writes ablation.csv, ablation.txt, and a comparison figure under
    cfg.out_dir; each run's own artifacts land in ablate_<omega>/.
    """
    if not omega_values:
        raise ValueError("need at least one omega value")
    rows = []
    for omega in omega_values:
        sub = replace(
            cfg,
            out_dir=cfg.out_dir / f"ablate_{omega:g}",
            omega_mode="const",
            omega_const=float(omega),
            evals=tuple(set(cfg.evals) | {"ate"}),
        )
        row = {"omega_rgb": float(omega), "ate_rmse": None, "recon_mean": None}
        try:
            result = run_pipeline(sub)
            if "ate_rmse_m" in result.metrics:
                row["ate_rmse"] = float(result.metrics["ate_rmse_m"])
            if "recon_mean_m" in result.metrics:
                row["recon_mean"] = float(result.metrics["recon_mean_m"])
            row["status"] = "ok"
        except (TrackingLostError, DatasetError) as exc:
            row["status"] = f"failed: {exc}"
        rows.append(row)

    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    report_mod.write_ablation_csv(cfg.out_dir / "ablation.csv", rows)
    report_mod.plot_ablation(cfg.out_dir / "figures_ablation.png", rows)
    lines = ["omega_rgb  ate_rmse[m]  recon_mean[m]  status"]
    for r in rows:
        ate = "-" if r["ate_rmse"] is None else f"{r['ate_rmse']:.6f}"
        rec = "-" if r["recon_mean"] is None else f"{r['recon_mean']:.6f}"
        lines.append(f"{r['omega_rgb']:<9g}  {ate:<11}  {rec:<13}  {r['status']}")
    (cfg.out_dir / "ablation.txt").write_text("\n".join(lines) + "\n")
    return rows
