"""Synthetic RGB-D sequences with exact ground truth for verification.

Per-pixel raycasting against analytic primitives (sphere / plane / box),
Lambertian or unlit shading, quadratic depth noise, and segmentation
sidecars with an optional boundary-corruption preset that erodes masks and
plants a soft-probability band just below 0.5.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import cv2
import numpy as np
from scipy import ndimage

from .datasets import (
    InstanceMask,
    SegmentationFrame,
    encode_depth,
    save_segmentation,
    write_trajectory,
)
from .geometry import Intrinsics, Pose, RgbdFrame, interpolate_pose

_EPS = 1e-9


@dataclass(frozen=True)
class Checker:
    """Two-tone checker albedo with a metric period on the surface."""

    color_a: tuple = (0.9, 0.9, 0.9)
    color_b: tuple = (0.15, 0.15, 0.15)
    period: float = 0.12


Albedo = Union[tuple, Checker]


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float
    albedo: Albedo = (0.8, 0.3, 0.3)
    instance_id: Optional[int] = None
    class_id: int = 0

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("sphere radius must be positive")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))


@dataclass(frozen=True)
class Plane:
    """Finite rectangle: point, unit normal, half-extents along in-plane axes."""

    point: np.ndarray
    normal: np.ndarray
    extent: tuple = (2.0, 2.0)
    albedo: Albedo = (0.7, 0.7, 0.7)
    instance_id: Optional[int] = None
    class_id: int = 0

    def __post_init__(self):
        if min(self.extent) <= 0:
            raise ValueError("plane extents must be positive")
        n = _unit(self.normal)
        helper = np.array([0.0, 1.0, 0.0]) if abs(n[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
        e1 = _unit(np.cross(helper, n))
        e2 = np.cross(n, e1)
        object.__setattr__(self, "point", np.asarray(self.point, dtype=np.float64))
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "_e1", e1)
        object.__setattr__(self, "_e2", e2)


@dataclass(frozen=True)
class Box:
    center: np.ndarray
    half_extents: np.ndarray
    albedo: Albedo = (0.3, 0.5, 0.8)
    instance_id: Optional[int] = None
    class_id: int = 0

    def __post_init__(self):
        he = np.asarray(self.half_extents, dtype=np.float64)
        if np.any(he <= 0):
            raise ValueError("box half extents must be positive")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        object.__setattr__(self, "half_extents", he)


ScenePrimitive = Union[Sphere, Plane, Box]


@dataclass
class Scene:
    """Primitive list plus the class label set and lighting setup."""

    primitives: list
    labels: list[str] = field(default_factory=lambda: ["object"])
    light_dir: tuple = (0.3, -0.4, 0.85)
    ambient: float = 0.35
    shading: str = "lambert"  # or "flat"
    background_color: tuple = (0.0, 0.0, 0.0)
    class_confidence: float = 0.9


@dataclass(frozen=True)
class TrajectorySpec:
    """Keyposes with linear translation / slerp rotation interpolation."""

    times: np.ndarray
    poses: list

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        if times.size < 2:
            raise ValueError("a trajectory needs at least 2 keyposes")
        if np.any(np.diff(times) <= 0):
            raise ValueError("keypose times must be strictly increasing")
        if len(self.poses) != times.size:
            raise ValueError("times and poses length mismatch")
        object.__setattr__(self, "times", times)

    def pose_at(self, t: float) -> Pose:
        times = self.times
        if t <= times[0]:
            return self.poses[0]
        if t >= times[-1]:
            return self.poses[-1]
        k = int(np.searchsorted(times, t, side="right")) - 1
        s = (t - times[k]) / (times[k + 1] - times[k])
        if s == 0.0:
            return self.poses[k]
        return interpolate_pose(self.poses[k], self.poses[k + 1], s)


@dataclass(frozen=True)
class NoiseSpec:
    """Sensor/CNN imperfection model used by the renderer."""

    depth_sigma0: float = 0.0  # metres^-1, sigma_d(z) = sigma0 * z^2
    erode_px: int = 0
    band_prob: float = 0.45
    omega_rgb: float = 0.9
    seed: int = 0


def _ray_sphere(origin, dirs, sphere: Sphere):
    oc = origin - sphere.center
    a = np.sum(dirs * dirs, axis=-1)
    b = 2.0 * np.sum(dirs * oc, axis=-1)
    c = float(oc @ oc) - sphere.radius**2
    disc = b * b - 4 * a * c
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    s = (-b - sq) / (2 * a)
    s = np.where(hit & (s > _EPS), s, np.inf)
    return s


def _ray_plane(origin, dirs, plane: Plane):
    denom = dirs @ plane.normal
    num = (plane.point - origin) @ plane.normal
    with np.errstate(divide="ignore", invalid="ignore"):
        s = num / denom
    s = np.where((np.abs(denom) > _EPS) & (s > _EPS), s, np.inf)
    pts = origin + s[..., None] * dirs
    rel = pts - plane.point
    in1 = np.abs(rel @ plane._e1) <= plane.extent[0]
    in2 = np.abs(rel @ plane._e2) <= plane.extent[1]
    return np.where(in1 & in2, s, np.inf)


def _ray_box(origin, dirs, box: Box):
    lo = box.center - box.half_extents
    hi = box.center + box.half_extents
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    t1 = (lo - origin) * inv
    t2 = (hi - origin) * inv
    tmin = np.minimum(t1, t2).max(axis=-1)
    tmax = np.maximum(t1, t2).min(axis=-1)
    hit = (tmax >= tmin) & (tmax > _EPS)
    s = np.where(tmin > _EPS, tmin, tmax)
    return np.where(hit, s, np.inf)


def _normal_at(prim: ScenePrimitive, pts: np.ndarray) -> np.ndarray:
    if isinstance(prim, Sphere):
        return (pts - prim.center) / prim.radius
    if isinstance(prim, Plane):
        return np.broadcast_to(prim.normal, pts.shape).copy()
    rel = (pts - prim.center) / prim.half_extents
    n = np.zeros_like(pts)
    axis = np.argmax(np.abs(rel), axis=-1)
    rows = np.arange(pts.shape[0])
    n[rows, axis] = np.sign(rel[rows, axis])
    return n


def _albedo_at(prim: ScenePrimitive, pts: np.ndarray) -> np.ndarray:
    alb = prim.albedo
    if not isinstance(alb, Checker):
        return np.broadcast_to(np.asarray(alb, dtype=np.float64), pts.shape).copy()
    if isinstance(prim, Plane):
        rel = pts - prim.point
        a = np.floor((rel @ prim._e1) / alb.period)
        b = np.floor((rel @ prim._e2) / alb.period)
        parity = ((a + b) % 2).astype(bool)
    else:
        cells = np.floor(pts / alb.period).sum(axis=-1)
        parity = (cells % 2).astype(bool)
    out = np.where(
        parity[:, None],
        np.asarray(alb.color_b, dtype=np.float64),
        np.asarray(alb.color_a, dtype=np.float64),
    )
    return out


def _class_probs(scene: Scene, class_id: int) -> np.ndarray:
    n = len(scene.labels)
    if n == 1:
        return np.array([1.0])
    conf = scene.class_confidence
    probs = np.full(n, (1.0 - conf) / (n - 1))
    probs[class_id] = conf
    return probs


def _soft_prob_map(
    true_union: np.ndarray, reported_union: np.ndarray, band: np.ndarray, band_prob: float
) -> np.ndarray:
    """Distance-transform falloff: >= 0.5 inside reported masks, a constant
    band value on corrupted boundary pixels, < 0.5 tapering off outside."""
    soft = np.empty(true_union.shape, dtype=np.float32)
    d_out = ndimage.distance_transform_edt(~true_union)
    soft[:] = np.maximum(0.5 - 0.15 * d_out, 0.05)
    if np.any(reported_union):
        d_in = ndimage.distance_transform_edt(reported_union)
        inside = np.minimum(0.5 + 0.1 * d_in, 0.95)
        soft[reported_union] = inside[reported_union]
    soft[band] = band_prob
    return soft


def _trace(scene: Scene, origin: np.ndarray, dirs: np.ndarray):
    """Nearest-hit distance and primitive index per ray (inf / -1 on miss)."""
    depth = np.full(len(dirs), np.inf)
    prim_idx = np.full(len(dirs), -1, dtype=np.int32)
    for i, prim in enumerate(scene.primitives):
        if isinstance(prim, Sphere):
            s = _ray_sphere(origin, dirs, prim)
        elif isinstance(prim, Plane):
            s = _ray_plane(origin, dirs, prim)
        else:
            s = _ray_box(origin, dirs, prim)
        closer = s < depth
        depth[closer] = s[closer]
        prim_idx[closer] = i
    return depth, prim_idx


def _shade(scene: Scene, origin, dirs, depth, prim_idx) -> np.ndarray:
    color = np.zeros((len(dirs), 3), dtype=np.float64)
    color[:] = np.asarray(scene.background_color)
    light = _unit(scene.light_dir)
    for i, prim in enumerate(scene.primitives):
        sel = prim_idx == i
        if not np.any(sel):
            continue
        pts = origin + depth[sel, None] * dirs[sel]
        albedo = _albedo_at(prim, pts)
        if scene.shading == "lambert":
            n = _normal_at(prim, pts)
            # orient toward the camera so shading is view-consistent
            facing = np.sum(n * dirs[sel], axis=-1) > 0
            n[facing] = -n[facing]
            lit = np.maximum(0.0, -(n @ light))
            shade = scene.ambient + (1.0 - scene.ambient) * lit
            color[sel] = albedo * shade[:, None]
        else:
            color[sel] = albedo
    return color


def render_frame(
    scene: Scene,
    pose: Pose,
    K: Intrinsics,
    noise: Optional[NoiseSpec] = None,
    timestamp: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    color_supersample: int = 2,
):
    """Raycast one frame.

    Returns (RgbdFrame, SegmentationFrame, true_instance_map). Color is
    supersampled (box filter over `color_supersample`^2 rays per pixel) the
    way a real sensor integrates over the pixel footprint; depth and the
    instance map stay point-sampled through the pixel center so edges do not
    average into phantom values. The true instance map ignores the noise
    model; the segmentation frame carries the possibly eroded masks and the
    soft probability map.
    """
    if not scene.primitives:
        raise ValueError("scene is empty")
    noise = noise or NoiseSpec()
    h, w = K.height, K.width
    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    origin = pose.translation

    def _dirs(du: float, dv: float) -> np.ndarray:
        d = np.stack(
            [(uu + du - K.cx) / K.fx, (vv + dv - K.cy) / K.fy, np.ones_like(uu)],
            axis=-1,
        ).reshape(-1, 3)
        return d @ pose.rotation.T

    dirs = _dirs(0.0, 0.0)
    depth, prim_idx = _trace(scene, origin, dirs)
    hit = np.isfinite(depth)

    ss = max(1, int(color_supersample))
    if ss == 1:
        color = _shade(scene, origin, dirs, depth, prim_idx)
    else:
        color = np.zeros((h * w, 3), dtype=np.float64)
        offs = (np.arange(ss) + 0.5) / ss - 0.5
        for dv in offs:
            for du in offs:
                d_ss = _dirs(du, dv)
                z_ss, p_ss = _trace(scene, origin, d_ss)
                color += _shade(scene, origin, d_ss, z_ss, p_ss)
        color /= ss * ss

    true_inst = np.zeros(h * w, dtype=np.int32)
    for i, prim in enumerate(scene.primitives):
        if prim.instance_id is not None:
            true_inst[prim_idx == i] = prim.instance_id

    z = np.where(hit, depth, 0.0)
    if noise.depth_sigma0 > 0:
        rng = rng if rng is not None else np.random.default_rng(noise.seed)
        sigma = noise.depth_sigma0 * z**2
        z = np.where(hit, z + rng.normal(0.0, 1.0, z.shape) * sigma, 0.0)
        z[z < 0.05] = 0.0

    depth_map = z.reshape(h, w).astype(np.float32)
    color_map = np.clip(color, 0.0, 1.0).reshape(h, w, 3).astype(np.float32)
    true_map = true_inst.reshape(h, w)

    frame = RgbdFrame(timestamp=timestamp, color=color_map, depth=depth_map)
    seg = _make_segmentation(scene, true_map, noise)
    return frame, seg, true_map


def _make_segmentation(scene: Scene, true_map: np.ndarray, noise: NoiseSpec):
    ids = sorted(int(i) for i in np.unique(true_map) if i > 0)
    class_by_instance = {}
    for prim in scene.primitives:
        if prim.instance_id is not None:
            class_by_instance[prim.instance_id] = prim.class_id

    masks = []
    reported_union = np.zeros(true_map.shape, dtype=bool)
    for inst_id in ids:
        m = true_map == inst_id
        if noise.erode_px > 0:
            m = ndimage.binary_erosion(
                m, structure=np.ones((3, 3), dtype=bool), iterations=noise.erode_px
            )
        if not np.any(m):
            continue
        reported_union |= m
        masks.append(
            InstanceMask(mask=m, class_probs=_class_probs(scene, class_by_instance[inst_id]))
        )

    true_union = true_map > 0
    band = true_union & ~reported_union
    soft = _soft_prob_map(true_union, reported_union, band, noise.band_prob)
    return SegmentationFrame(
        masks=masks, soft_prob=soft, omega_rgb=noise.omega_rgb, labels=list(scene.labels)
    )


def sample_scene_points(scene: Scene, spacing: float = 0.01):
    """Dense surface samples (points, instance ids) for reconstruction truth."""
    pts_all, inst_all = [], []
    for prim in scene.primitives:
        if isinstance(prim, Sphere):
            n = max(64, int(4 * math.pi * prim.radius**2 / spacing**2))
            k = np.arange(n, dtype=np.float64)
            phi = math.pi * (3.0 - math.sqrt(5.0)) * k
            cz = 1.0 - 2.0 * (k + 0.5) / n
            r = np.sqrt(1.0 - cz**2)
            pts = prim.center + prim.radius * np.stack(
                [r * np.cos(phi), r * np.sin(phi), cz], axis=-1
            )
        elif isinstance(prim, Plane):
            a = np.arange(-prim.extent[0], prim.extent[0] + spacing / 2, spacing)
            b = np.arange(-prim.extent[1], prim.extent[1] + spacing / 2, spacing)
            aa, bb = np.meshgrid(a, b)
            pts = (
                prim.point
                + aa.reshape(-1, 1) * prim._e1
                + bb.reshape(-1, 1) * prim._e2
            )
        else:
            faces = []
            he = prim.half_extents
            for axis in range(3):
                for sign in (-1.0, 1.0):
                    o = [0, 1, 2]
                    o.remove(axis)
                    a = np.arange(-he[o[0]], he[o[0]] + spacing / 2, spacing)
                    b = np.arange(-he[o[1]], he[o[1]] + spacing / 2, spacing)
                    aa, bb = np.meshgrid(a, b)
                    f = np.zeros((aa.size, 3))
                    f[:, axis] = sign * he[axis]
                    f[:, o[0]] = aa.ravel()
                    f[:, o[1]] = bb.ravel()
                    faces.append(prim.center + f)
            pts = np.concatenate(faces, axis=0)
        pts_all.append(pts)
        inst_all.append(
            np.full(len(pts), prim.instance_id if prim.instance_id is not None else 0)
        )
    return np.concatenate(pts_all), np.concatenate(inst_all).astype(np.int32)


def _albedo_to_json(albedo: Albedo):
    if isinstance(albedo, Checker):
        return {
            "checker": {
                "color_a": list(albedo.color_a),
                "color_b": list(albedo.color_b),
                "period": albedo.period,
            }
        }
    return {"rgb": [float(c) for c in albedo]}


def _albedo_from_json(d) -> Albedo:
    if "checker" in d:
        c = d["checker"]
        return Checker(tuple(c["color_a"]), tuple(c["color_b"]), c["period"])
    return tuple(d["rgb"])


def scene_to_json(scene: Scene) -> dict:
    prims = []
    for p in scene.primitives:
        rec = {
            "albedo": _albedo_to_json(p.albedo),
            "instance_id": p.instance_id,
            "class_id": p.class_id,
        }
        if isinstance(p, Sphere):
            rec.update(type="sphere", center=list(p.center), radius=p.radius)
        elif isinstance(p, Plane):
            rec.update(
                type="plane",
                point=list(p.point),
                normal=list(p.normal),
                extent=list(p.extent),
            )
        else:
            rec.update(
                type="box", center=list(p.center), half_extents=list(p.half_extents)
            )
        prims.append(rec)
    return {
        "primitives": prims,
        "labels": list(scene.labels),
        "light_dir": list(scene.light_dir),
        "ambient": scene.ambient,
        "shading": scene.shading,
        "background_color": list(scene.background_color),
        "class_confidence": scene.class_confidence,
    }


def scene_from_json(d: dict) -> Scene:
    prims = []
    for rec in d["primitives"]:
        kwargs = dict(
            albedo=_albedo_from_json(rec["albedo"]),
            instance_id=rec["instance_id"],
            class_id=rec["class_id"],
        )
        if rec["type"] == "sphere":
            prims.append(Sphere(rec["center"], rec["radius"], **kwargs))
        elif rec["type"] == "plane":
            prims.append(
                Plane(rec["point"], rec["normal"], tuple(rec["extent"]), **kwargs)
            )
        else:
            prims.append(Box(rec["center"], rec["half_extents"], **kwargs))
    return Scene(
        primitives=prims,
        labels=list(d["labels"]),
        light_dir=tuple(d["light_dir"]),
        ambient=d["ambient"],
        shading=d["shading"],
        background_color=tuple(d["background_color"]),
        class_confidence=d["class_confidence"],
    )


def render_sequence(
    scene: Scene,
    traj: TrajectorySpec,
    K: Intrinsics,
    frame_count: int,
    noise: Optional[NoiseSpec] = None,
    out_dir=None,
    fps: float = 30.0,
) -> Path:
    """Write a TUM-layout dataset (plus sidecars and truth files) to disk.

    Layout: rgb/, depth/, rgb.txt, depth.txt, groundtruth.txt,
    intrinsics.txt, seg/<frame-id>/..., truth/inst/<frame-id>.png (the exact
    instance maps) and truth/scene.json (the analytic scene itself, usable
    as exact reconstruction ground truth).
    """
    if frame_count < 1:
        raise ValueError("frame_count must be >= 1")
    noise = noise or NoiseSpec()
    out = Path(out_dir)
    for sub in ("rgb", "depth", "seg", "truth/inst"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(noise.seed)
    rgb_lines, depth_lines, gt = [], [], []
    for i in range(frame_count):
        t = i / fps
        frame_id = f"{t:.6f}"
        pose = traj.pose_at(t)
        frame, seg, true_map = render_frame(
            scene, pose, K, noise, timestamp=t, rng=rng
        )
        bgr = cv2.cvtColor(
            (frame.color * 255.0).round().astype(np.uint8), cv2.COLOR_RGB2BGR
        )
        cv2.imwrite(str(out / "rgb" / f"{frame_id}.png"), bgr)
        cv2.imwrite(str(out / "depth" / f"{frame_id}.png"), encode_depth(frame.depth))
        rgb_lines.append(f"{frame_id} rgb/{frame_id}.png")
        depth_lines.append(f"{frame_id} depth/{frame_id}.png")
        save_segmentation(out / "seg" / frame_id, seg)
        cv2.imwrite(
            str(out / "truth" / "inst" / f"{frame_id}.png"),
            true_map.astype(np.uint16),
        )
        gt.append((t, pose))

    (out / "rgb.txt").write_text(
        "# timestamp filename\n" + "\n".join(rgb_lines) + "\n"
    )
    (out / "depth.txt").write_text(
        "# timestamp filename\n" + "\n".join(depth_lines) + "\n"
    )
    write_trajectory(out / "groundtruth.txt", gt)
    (out / "intrinsics.txt").write_text(
        f"{K.fx} {K.fy} {K.cx} {K.cy} {K.width} {K.height}\n"
    )
    (out / "truth" / "scene.json").write_text(
        json.dumps(scene_to_json(scene), indent=2, sort_keys=True) + "\n"
    )
    return out


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> Pose:
    """Camera pose at `eye` looking toward `target` (+z forward, +y image-down)."""
    eye = np.asarray(eye, dtype=np.float64)
    z = _unit(np.asarray(target, dtype=np.float64) - eye)
    x = _unit(np.cross(np.asarray(up, dtype=np.float64), z))
    y = np.cross(z, x)
    R = np.stack([x, y, z], axis=-1)
    return Pose(R, eye)


# ---------------------------------------------------------------------------
# Scene presets used by tests and the CLI's synth: datasets


def default_intrinsics(width: int = 320, height: int = 240) -> Intrinsics:
    scale = width / 640.0
    return Intrinsics(
        fx=525.0 * scale,
        fy=525.0 * scale,
        cx=(319.5 + 0.5) * scale - 0.5,
        cy=(239.5 + 0.5) * scale - 0.5,
        width=width,
        height=height,
    )


def _lateral_orbit(frame_count: int, target, step_m: float, roll_deg: float, fps: float = 30.0):
    times, poses = [], []
    target = np.asarray(target, dtype=np.float64)
    for i in range(max(frame_count, 2)):
        base = look_at((step_m * i, 0.0, 0.0), target)
        roll = math.radians(roll_deg * i)
        Rz = np.array(
            [
                [math.cos(roll), -math.sin(roll), 0.0],
                [math.sin(roll), math.cos(roll), 0.0],
                [0.0, 0.0, 1.0],
            ]
        )
        times.append(i / fps)
        poses.append(Pose(base.rotation @ Rz, base.translation))
    return TrajectorySpec(np.array(times), poses)


def _static_trajectory(frame_count: int, fps: float = 30.0):
    times = np.array([i / fps for i in range(max(frame_count, 2))])
    poses = [Pose.identity() for _ in times]
    return TrajectorySpec(times, poses)


def desk_scene() -> Scene:
    """Textured background plane with two spherical object instances."""
    return Scene(
        primitives=[
            Plane(
                point=(0.0, 0.3, 2.2),
                normal=(0.0, -0.25, -1.0),
                extent=(2.5, 2.5),
                albedo=Checker(),
            ),
            Sphere(center=(-0.35, 0.05, 1.6), radius=0.22, albedo=(0.8, 0.25, 0.2),
                   instance_id=1, class_id=0),
            Sphere(center=(0.4, -0.05, 1.7), radius=0.25, albedo=(0.2, 0.35, 0.8),
                   instance_id=2, class_id=1),
        ],
        labels=["ball", "globe"],
    )


def wall_checker_scene() -> Scene:
    """Geometrically flat wall with checker color: degenerate for pure ICP."""
    return Scene(
        primitives=[
            Plane(
                point=(0.0, 0.0, 2.0),
                normal=(0.0, 0.0, -1.0),
                extent=(3.0, 3.0),
                albedo=Checker(period=0.18),
            )
        ],
        labels=["wall"],
        shading="flat",
    )


def structured_colorless_scene() -> Scene:
    """Geometry-rich but zero image gradient (flat shading, one albedo)."""
    grey = (0.55, 0.55, 0.55)
    return Scene(
        primitives=[
            Plane(point=(0.0, 0.4, 2.4), normal=(0.0, -0.3, -1.0), extent=(2.5, 2.5),
                  albedo=grey),
            Sphere(center=(-0.3, 0.0, 1.6), radius=0.25, albedo=grey),
            Box(center=(0.35, 0.1, 1.8), half_extents=(0.18, 0.22, 0.18), albedo=grey),
        ],
        labels=["thing"],
        shading="flat",
    )


def eroded_objects_scene() -> Scene:
    """Plane plus two objects; meant for the mask-corruption preset."""
    return Scene(
        primitives=[
            Plane(
                point=(0.0, 0.2, 2.1),
                normal=(0.0, -0.2, -1.0),
                extent=(2.5, 2.5),
                albedo=Checker(period=0.2),
            ),
            Sphere(center=(-0.3, 0.0, 1.5), radius=0.24, albedo=(0.75, 0.3, 0.2),
                   instance_id=1, class_id=0),
            Box(center=(0.35, 0.05, 1.7), half_extents=(0.16, 0.2, 0.16),
                albedo=(0.25, 0.4, 0.75), instance_id=2, class_id=1),
        ],
        labels=["ball", "box"],
    )


@dataclass(frozen=True)
class Preset:
    scene_fn: object
    trajectory: str  # "orbit" or "static"
    noise: NoiseSpec
    frames: int


PRESETS = {
    "desk": Preset(desk_scene, "orbit", NoiseSpec(omega_rgb=0.9), 50),
    "wall-checker": Preset(wall_checker_scene, "orbit", NoiseSpec(omega_rgb=0.9), 30),
    "structured-colorless": Preset(
        structured_colorless_scene, "orbit", NoiseSpec(omega_rgb=0.9), 30
    ),
    "eroded-objects": Preset(
        eroded_objects_scene,
        "static",
        NoiseSpec(erode_px=2, band_prob=0.45, omega_rgb=0.9),
        20,
    ),
}


def make_preset_dataset(
    name: str, out_dir, frames: Optional[int] = None, width: int = 320, height: int = 240
) -> Path:
    """Render one of the named presets into a TUM-layout directory."""
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choices: {sorted(PRESETS)}")
    preset = PRESETS[name]
    n = frames if frames is not None else preset.frames
    scene = preset.scene_fn()
    K = default_intrinsics(width, height)
    if preset.trajectory == "orbit":
        traj = _lateral_orbit(n, target=(0.0, 0.0, 1.8), step_m=0.005, roll_deg=0.5)
    else:
        traj = _static_trajectory(n)
    return render_sequence(scene, traj, K, n, preset.noise, out_dir)
