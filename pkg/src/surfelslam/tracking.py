"""Frame-to-model pose estimation: Gauss-Newton on a coarse-to-fine pyramid.

The objective is E = E_icp + omega_rgb * E_rgb, both terms Huber-robustified
and normalized by their correspondence counts so the weight means the same
thing at every pyramid level. Correspondences pair the live frame with the
rendered model view at the same pixel; residuals are re-linearized (and pairs
re-gated) every iteration.

Camera intensity is sampled through a C2 bicubic spline rather than bilinear
interpolation; its analytic partial derivatives are what the photometric
Jacobian chains through, so finite differences of the residual agree with the
Jacobian everywhere, not just away from pixel-cell boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from .errors import InsufficientCorrespondencesError, TrackingLostError
from .geometry import (
    Intrinsics,
    Pose,
    RgbdFrame,
    back_project_map,
    build_pyramid,
    compute_normals,
    intensity,
    orthonormalize_rotation,
    se3_exp,
)
from .surfels import ModelView, SurfelMap


@dataclass
class RegistrationConfig:
    levels: int = 3
    iterations: tuple = (4, 5, 10)  # coarse -> fine
    omega_rgb_default: float = 0.1
    convergence_eps: float = 1e-6
    huber_delta_icp: float = 0.05
    huber_delta_rgb: float = 25.0 / 255.0
    min_valid_correspondences: int = 50
    max_step_halvings: int = 5
    depth_gate: float = 0.1
    normal_gate_deg: float = 30.0
    # photometric pixels are redundant; keep every k-th row/column
    rgb_stride: int = 2
    # model re-render passes: pass 2 re-renders the views at the pass-1 pose,
    # which removes the same-pixel pairing bias left by the warm-start render
    render_passes: int = 2

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        for name in ("convergence_eps", "huber_delta_icp", "huber_delta_rgb", "depth_gate"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def iterations_for(self, level: int) -> int:
        """Iteration budget for pyramid level `level` (0 = finest)."""
        sched = list(self.iterations)
        while len(sched) < self.levels:
            sched.append(sched[-1])
        return sched[self.levels - 1 - level]


@dataclass
class RegistrationResult:
    pose: Pose
    final_cost: float
    icp_cost: float
    rgb_cost: float
    correspondence_count: int
    converged: bool
    grad_norm_initial: float = 0.0
    grad_norm_final: float = 0.0
    iterations_run: list = field(default_factory=list)
    step_trace: list = field(default_factory=list)  # (cost_before, cost_after)


class CubicImageInterp:
    """C2 interpolating bicubic B-spline over an image.

    Evaluates the value and both partial derivatives of the same spline in
    one vectorized pass, so the photometric Jacobian is the exact derivative
    of the sampled residual. Queries are clipped to the image rectangle.
    """

    _PAD = 4

    def __init__(self, image: np.ndarray):
        self.height, self.width = image.shape
        padded = np.pad(image.astype(np.float64), self._PAD, mode="reflect")
        self.coeffs = ndimage.spline_filter(padded, order=3, mode="mirror")

    @staticmethod
    def _weights(t: np.ndarray):
        """Cubic B-spline basis (and derivative) at offsets -1..2."""
        n = t.shape[0]
        t2 = t * t
        t3 = t2 * t
        w = np.empty((n, 4))
        w[:, 0] = (1 - t) ** 3 / 6.0
        w[:, 1] = (3 * t3 - 6 * t2 + 4) / 6.0
        w[:, 2] = (-3 * t3 + 3 * t2 + 3 * t + 1) / 6.0
        w[:, 3] = t3 / 6.0
        dw = np.empty((n, 4))
        dw[:, 0] = -((1 - t) ** 2) / 2.0
        dw[:, 1] = (3 * t2 - 4 * t) / 2.0
        dw[:, 2] = (-3 * t2 + 2 * t + 1) / 2.0
        dw[:, 3] = t2 / 2.0
        return w, dw

    def evaluate(self, v: np.ndarray, u: np.ndarray, gradient: bool = False):
        u = np.clip(np.asarray(u, dtype=np.float64), 0.0, self.width - 1.0)
        v = np.clip(np.asarray(v, dtype=np.float64), 0.0, self.height - 1.0)
        x = u + self._PAD
        y = v + self._PAD
        if not gradient:
            # same spline, evaluated through ndimage's C path
            return ndimage.map_coordinates(
                self.coeffs, [y, x], order=3, prefilter=False, mode="mirror"
            )
        ix = np.floor(x).astype(np.int64)
        iy = np.floor(y).astype(np.int64)
        wx, dwx = self._weights(x - ix)
        wy, dwy = self._weights(y - iy)
        offs = np.arange(-1, 3)
        patch = self.coeffs[
            (iy[:, None] + offs)[:, :, None], (ix[:, None] + offs)[:, None, :]
        ]  # (N, 4, 4)
        row = np.einsum("nab,nb->na", patch, wx)
        drow = np.einsum("nab,nb->na", patch, dwx)
        val = np.einsum("na,na->n", wy, row)
        g_u = np.einsum("na,na->n", wy, drow)
        g_v = np.einsum("na,na->n", dwy, row)
        return val, g_u, g_v


@dataclass
class FrameLevel:
    """Per-pyramid-level frame data shared by both residual terms."""

    intrinsics: Intrinsics
    depth: np.ndarray
    gray: np.ndarray
    vertices: np.ndarray  # camera frame, NaN where invalid
    normals: np.ndarray  # camera frame, NaN where invalid
    spline: CubicImageInterp


def prepare_levels(frame: RgbdFrame, K: Intrinsics, levels: int) -> list[FrameLevel]:
    """Build pyramid levels (index 0 = finest) with splines and vertex maps."""
    frames = build_pyramid(frame, levels)
    intr = K.pyramid(levels)
    out = []
    for f, k in zip(frames, intr):
        gray = intensity(f.color)
        out.append(
            FrameLevel(
                intrinsics=k,
                depth=f.depth.astype(np.float64),
                gray=gray,
                vertices=back_project_map(f.depth, k),
                normals=compute_normals(f.depth, k),
                spline=CubicImageInterp(gray),
            )
        )
    return out


def huber_weights(r: np.ndarray, delta: float) -> np.ndarray:
    a = np.abs(r)
    w = np.ones_like(r)
    big = a > delta
    w[big] = delta / a[big]
    return w


def huber_cost(r: np.ndarray, delta: float) -> float:
    """Count-normalized Huber loss of a residual vector."""
    if r.size == 0:
        return 0.0
    a = np.abs(r)
    quad = 0.5 * r**2
    lin = delta * (a - 0.5 * delta)
    return float(np.mean(np.where(a <= delta, quad, lin)))


@dataclass
class IcpCorrespondences:
    points_cam: np.ndarray  # (N, 3) frame vertices
    model_points: np.ndarray  # (N, 3) world
    model_normals: np.ndarray  # (N, 3) world
    pixels: np.ndarray  # (N,) flat v*W+u indices

    def __len__(self):
        return len(self.points_cam)


@dataclass
class RgbCorrespondences:
    model_points: np.ndarray  # (N, 3) world
    model_intensity: np.ndarray  # (N,)
    pixels: np.ndarray

    def __len__(self):
        return len(self.model_points)


def build_icp_correspondences(
    level: FrameLevel, view: ModelView, pose: Pose, cfg: RegistrationConfig
) -> IcpCorrespondences:
    """Same-pixel pairs passing the depth and normal-angle gates at `pose`."""
    valid = (
        (level.depth > 0)
        & np.isfinite(level.normals).all(axis=-1)
        & view.valid
        & (np.abs(view.depth - level.depth) <= cfg.depth_gate)
    )
    n_world = np.einsum("ij,hwj->hwi", pose.rotation, level.normals)
    cos_gate = np.cos(np.radians(cfg.normal_gate_deg))
    with np.errstate(invalid="ignore"):
        valid &= np.sum(n_world * view.normal, axis=-1) >= cos_gate
    vs, us = np.nonzero(valid)
    return IcpCorrespondences(
        points_cam=level.vertices[valid],
        model_points=view.position[valid],
        model_normals=view.normal[valid],
        pixels=vs * level.depth.shape[1] + us,
    )


def icp_residuals(
    level: FrameLevel,
    view: ModelView,
    pose: Pose,
    cfg: Optional[RegistrationConfig] = None,
    corr: Optional[IcpCorrespondences] = None,
):
    """Point-to-plane residuals and their analytic twist Jacobian.

    r_i = n_m . (T p_f - p_m) with T the camera-to-world pose under the
    left-increment convention; J_i = [n_m, (T p_f) x n_m].
    Returns (residuals, jacobian, correspondences).
    """
    cfg = cfg or RegistrationConfig()
    if corr is None:
        corr = build_icp_correspondences(level, view, pose, cfg)
    if len(corr) < cfg.min_valid_correspondences:
        raise InsufficientCorrespondencesError(
            f"{len(corr)} ICP correspondences < {cfg.min_valid_correspondences}"
        )
    q = corr.points_cam @ pose.rotation.T + pose.translation
    diff = q - corr.model_points
    r = np.sum(corr.model_normals * diff, axis=-1)
    J = np.empty((len(corr), 6))
    J[:, :3] = corr.model_normals
    J[:, 3:] = np.cross(q, corr.model_normals)
    return r, J, corr


def icp_residuals_at(corr: IcpCorrespondences, pose: Pose) -> np.ndarray:
    """Residuals only, for a fixed correspondence set (step evaluation)."""
    q = corr.points_cam @ pose.rotation.T + pose.translation
    return np.sum(corr.model_normals * (q - corr.model_points), axis=-1)


def build_rgb_correspondences(
    level: FrameLevel, view: ModelView, pose: Pose, cfg: RegistrationConfig,
    margin: float = 3.0, view_gray: Optional[np.ndarray] = None,
) -> RgbCorrespondences:
    """Model pixels whose warp lands inside the frame with a safety margin.

    Pixels whose model depth disagrees with the frame depth at the same
    pixel are dropped: those are occlusions or silhouette bleed, and their
    intensities pair unrelated surfaces.
    """
    valid = (
        view.valid
        & (level.depth > 0)
        & (np.abs(view.depth - level.depth) <= cfg.depth_gate)
    )
    if cfg.rgb_stride > 1:
        keep = np.zeros_like(valid)
        keep[:: cfg.rgb_stride, :: cfg.rgb_stride] = True
        valid &= keep
    pts = view.position[valid]
    vs, us = np.nonzero(valid)
    if view_gray is None:
        view_gray = intensity(view.color)
    model_i = view_gray[valid]
    inv = pose.inverse()
    y = pts @ inv.rotation.T + inv.translation
    K = level.intrinsics
    z = y[:, 2]
    ok = z > 1e-6
    u = np.where(ok, K.fx * y[:, 0] / np.where(ok, z, 1.0) + K.cx, -1.0)
    v = np.where(ok, K.fy * y[:, 1] / np.where(ok, z, 1.0) + K.cy, -1.0)
    inside = (
        ok
        & (u >= margin)
        & (u <= K.width - 1 - margin)
        & (v >= margin)
        & (v <= K.height - 1 - margin)
    )
    return RgbCorrespondences(
        model_points=pts[inside],
        model_intensity=model_i[inside],
        pixels=vs[inside] * view.depth.shape[1] + us[inside],
    )


def rgb_residuals(
    level: FrameLevel,
    view: ModelView,
    pose: Pose,
    cfg: Optional[RegistrationConfig] = None,
    corr: Optional[RgbCorrespondences] = None,
):
    """Photometric residuals r = I_frame(warp(p_m)) - I_model and Jacobian.

    The warp sends world model points through the inverse pose and the
    pinhole projection; the Jacobian chains the spline's image gradient
    through the projection and the inverse-pose derivative.
    """
    cfg = cfg or RegistrationConfig()
    if corr is None:
        corr = build_rgb_correspondences(level, view, pose, cfg)
    if len(corr) < cfg.min_valid_correspondences:
        raise InsufficientCorrespondencesError(
            f"{len(corr)} photometric correspondences < {cfg.min_valid_correspondences}"
        )
    K = level.intrinsics
    inv = pose.inverse()
    y = corr.model_points @ inv.rotation.T + inv.translation
    z = y[:, 2]
    u = K.fx * y[:, 0] / z + K.cx
    v = K.fy * y[:, 1] / z + K.cy
    val, g_u, g_v = level.spline.evaluate(v, u, gradient=True)
    r = val - corr.model_intensity

    # d(u,v)/dy: projection derivative at the camera-frame point y
    fx, fy = K.fx, K.fy
    du_dy = np.stack([fx / z, np.zeros_like(z), -fx * y[:, 0] / z**2], axis=-1)
    dv_dy = np.stack([np.zeros_like(z), fy / z, -fy * y[:, 1] / z**2], axis=-1)
    # dy/dxi for y = (exp(xi) T)^-1 p: Rinv @ [-I | skew(p)]
    Rinv = inv.rotation
    p = corr.model_points
    dI_du_dy = g_u[:, None] * du_dy + g_v[:, None] * dv_dy  # (N, 3) = dr/dy
    A = dI_du_dy @ Rinv  # chain through the constant rotation
    J = np.empty((len(corr), 6))
    J[:, :3] = -A
    J[:, 3] = A[:, 1] * p[:, 2] - A[:, 2] * p[:, 1]
    J[:, 4] = A[:, 2] * p[:, 0] - A[:, 0] * p[:, 2]
    J[:, 5] = A[:, 0] * p[:, 1] - A[:, 1] * p[:, 0]
    return r, J, corr


def rgb_residuals_at(level: FrameLevel, corr: RgbCorrespondences, pose: Pose) -> np.ndarray:
    K = level.intrinsics
    inv = pose.inverse()
    y = corr.model_points @ inv.rotation.T + inv.translation
    z = np.maximum(y[:, 2], 1e-6)
    u = K.fx * y[:, 0] / z + K.cx
    v = K.fy * y[:, 1] / z + K.cy
    return level.spline.evaluate(v, u) - corr.model_intensity


def _apply_increment(xi: np.ndarray, pose: Pose) -> Pose:
    inc = se3_exp(xi)
    composed = inc @ pose
    return Pose(orthonormalize_rotation(composed.rotation), composed.translation)


def solve(
    frame: RgbdFrame,
    source: Union[SurfelMap, Sequence[ModelView]],
    prev_pose: Pose,
    K: Intrinsics,
    omega_rgb: Optional[float] = None,
    cfg: Optional[RegistrationConfig] = None,
) -> RegistrationResult:
    """Estimate the camera pose of `frame` against the rendered model.

    `source` is either the surfel map (rendered internally at `prev_pose`,
    active surfels only) or a pre-rendered list of ModelViews, one per
    pyramid level with index 0 the finest. The solver seeds with `prev_pose`
    (constant-position motion model) and runs Gauss-Newton coarse to fine
    with step halving.
    """
    cfg = cfg or RegistrationConfig()
    omega = cfg.omega_rgb_default if omega_rgb is None else float(omega_rgb)
    if not (0.0 <= omega <= 1.0):
        raise ValueError(f"omega_rgb {omega} outside [0, 1]")

    levels = prepare_levels(frame, K, cfg.levels)

    def _render_views(at_pose: Pose):
        return [
            source.render(at_pose, lvl.intrinsics, include_inactive=False)
            for lvl in levels
        ]

    if isinstance(source, SurfelMap):
        views = _render_views(prev_pose)
        passes = max(1, cfg.render_passes)
    else:
        views = list(source)
        if len(views) != cfg.levels:
            raise ValueError(f"expected {cfg.levels} model views, got {len(views)}")
        passes = 1
    view_grays = [intensity(v.color) for v in views]

    T = prev_pose
    any_level_ok = False
    converged = False
    rising = 0
    prev_accepted_cost = None
    iterations_run = []
    step_trace = []
    grad_initial = 0.0
    grad_final = 0.0
    first_fine_iteration = True

    for pass_idx in range(passes):
        if pass_idx > 0:
            views = _render_views(T)
            view_grays = [intensity(v.color) for v in views]
        for li in reversed(range(cfg.levels)):
            lvl, view = levels[li], views[li]
            n_iter = cfg.iterations_for(li)
            it_done = 0
            level_converged = False
            prev_accepted_cost = None  # divergence is judged within a level
            level_cost_scale = None
            for _ in range(n_iter):
                try:
                    r_i, J_i, corr_i = icp_residuals(lvl, view, T, cfg)
                except InsufficientCorrespondencesError:
                    break
                any_level_ok = True
                w_i = huber_weights(r_i, cfg.huber_delta_icp)
                cost_i = huber_cost(r_i, cfg.huber_delta_icp)
                H = (J_i.T * w_i) @ J_i / len(r_i)
                g = (J_i.T @ (w_i * r_i)) / len(r_i)
                cost = cost_i
                corr_c = None
                if omega > 0:
                    try:
                        r_c, J_c, corr_c = rgb_residuals(
                            lvl, view, T, cfg,
                            corr=build_rgb_correspondences(
                                lvl, view, T, cfg, view_gray=view_grays[li]
                            ),
                        )
                        w_c = huber_weights(r_c, cfg.huber_delta_rgb)
                        cost_c = huber_cost(r_c, cfg.huber_delta_rgb)
                        H = H + omega * (J_c.T * w_c) @ J_c / len(r_c)
                        g = g + omega * (J_c.T @ (w_c * r_c)) / len(r_c)
                        cost = cost_i + omega * cost_c
                    except InsufficientCorrespondencesError:
                        corr_c = None

                grad_norm = float(np.linalg.norm(g))
                if li == 0 and first_fine_iteration:
                    grad_initial = grad_norm
                    first_fine_iteration = False
                delta = -np.linalg.lstsq(H, g, rcond=None)[0]

                accepted = False
                alpha = 1.0
                for _ in range(cfg.max_step_halvings + 1):
                    T_try = _apply_increment(alpha * delta, T)
                    new_cost = huber_cost(
                        icp_residuals_at(corr_i, T_try), cfg.huber_delta_icp
                    )
                    if corr_c is not None:
                        new_cost += omega * huber_cost(
                            rgb_residuals_at(lvl, corr_c, T_try), cfg.huber_delta_rgb
                        )
                    if new_cost <= cost:
                        accepted = True
                        break
                    alpha *= 0.5
                it_done += 1
                if not accepted:
                    break
                step_trace.append((cost, new_cost))
                if level_cost_scale is None:
                    level_cost_scale = max(cost, 1e-12)
                # divergence guard: correspondence sets are re-gated between
                # iterations, so near-convergence jitter far below the level's
                # starting cost does not count as an increase
                if (
                    prev_accepted_cost is not None
                    and new_cost > prev_accepted_cost + 0.05 * level_cost_scale
                ):
                    rising += 1
                    if rising >= 3:
                        raise TrackingLostError(
                            "cost increased for 3 consecutive accepted steps"
                        )
                else:
                    rising = 0
                prev_accepted_cost = new_cost
                T = T_try
                if float(np.linalg.norm(alpha * delta)) < cfg.convergence_eps:
                    level_converged = True
                    break
            iterations_run.append(it_done)
            if li == 0 and pass_idx == passes - 1:
                converged = level_converged

    if not any_level_ok:
        raise TrackingLostError(
            "insufficient correspondences at every pyramid level"
        )

    # final report at the finest level
    lvl0, view0 = levels[0], views[0]
    icp_cost = 0.0
    rgb_cost = 0.0
    count = 0
    try:
        r_i, J_i, corr_i = icp_residuals(lvl0, view0, T, cfg)
        icp_cost = huber_cost(r_i, cfg.huber_delta_icp)
        count = len(r_i)
        w_i = huber_weights(r_i, cfg.huber_delta_icp)
        g = (J_i.T @ (w_i * r_i)) / len(r_i)
    except InsufficientCorrespondencesError:
        g = np.zeros(6)
    if omega > 0:
        try:
            r_c, J_c, _ = rgb_residuals(
                lvl0, view0, T, cfg,
                corr=build_rgb_correspondences(
                    lvl0, view0, T, cfg, view_gray=view_grays[0]
                ),
            )
            rgb_cost = huber_cost(r_c, cfg.huber_delta_rgb)
            w_c = huber_weights(r_c, cfg.huber_delta_rgb)
            g = g + omega * (J_c.T @ (w_c * r_c)) / len(r_c)
        except InsufficientCorrespondencesError:
            pass
    grad_final = float(np.linalg.norm(g))

    return RegistrationResult(
        pose=T,
        final_cost=icp_cost + omega * rgb_cost,
        icp_cost=icp_cost,
        rgb_cost=rgb_cost,
        correspondence_count=count,
        converged=converged,
        grad_norm_initial=grad_initial,
        grad_norm_final=grad_final,
        iterations_run=iterations_run,
        step_trace=step_trace,
    )
