"""Camera model, rigid transforms, and image-pyramid primitives.

Conventions used throughout the library:
  - image arrays are indexed [v, u] (row, column); u grows rightward
  - depth 0 marks an invalid pixel; valid depths are finite and positive
  - Pose maps camera coordinates to world coordinates (camera-to-world)
  - twists are 6-vectors [translation; rotation] applied as a
    left-multiplied increment: pose' = se3_exp(xi) @ pose
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import BehindCameraError, InvalidDepthError, PyramidDimensionError

ORTHONORMAL_TOL = 1e-9


def skew(v: np.ndarray) -> np.ndarray:
    """3x3 cross-product matrix of a 3-vector."""
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def orthonormalize_rotation(R: np.ndarray) -> np.ndarray:
    """Project a near-rotation onto SO(3) via SVD (bounds solver drift)."""
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.linalg.det(U @ Vt)])
    return U @ D @ Vt


def so3_exp(phi: np.ndarray) -> np.ndarray:
    """Rodrigues' formula; stable for small angles via Taylor terms."""
    theta2 = float(phi @ phi)
    Phi = skew(phi)
    if theta2 < 1e-16:
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        theta = math.sqrt(theta2)
        a = math.sin(theta) / theta
        b = (1.0 - math.cos(theta)) / theta2
    return np.eye(3) + a * Phi + b * (Phi @ Phi)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector of R; handles the small-angle and near-pi branches."""
    trace = float(np.trace(R))
    cos_theta = max(-1.0, min(1.0, (trace - 1.0) / 2.0))
    theta = math.acos(cos_theta)
    if theta < 1e-7:
        return 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta > math.pi - 1e-4:
        # near pi the sine factor is ill-conditioned; recover the axis from
        # the symmetric part instead
        S = 0.5 * (R + np.eye(3))
        axis = np.sqrt(np.maximum(np.diag(S), 0.0))
        k = int(np.argmax(axis))
        axis = S[:, k] / max(axis[k], 1e-12)
        axis = axis / np.linalg.norm(axis)
        # fix the sign using the antisymmetric part where it is nonzero
        w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        if w @ axis < 0:
            axis = -axis
        return theta * axis
    factor = theta / (2.0 * math.sin(theta))
    return factor * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])


@dataclass(frozen=True)
class Pose:
    """Rigid-body transform: x_world = rotation @ x_cam + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {R.shape}")
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise ValueError("pose contains non-finite values")
        err = np.abs(R.T @ R - np.eye(3)).max()
        if err > 1e-6:
            raise ValueError(f"rotation is not orthonormal (max error {err:.2e})")
        if abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(T: np.ndarray) -> "Pose":
        return Pose(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one (3,) point or an (N, 3) stack."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def rotate(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    @staticmethod
    def from_quaternion(t: np.ndarray, q: np.ndarray) -> "Pose":
        """Build from translation and (qx, qy, qz, qw), TUM component order."""
        return Pose(quaternion_to_rotation(q), np.asarray(t, dtype=np.float64))

    def to_quaternion(self) -> np.ndarray:
        """(qx, qy, qz, qw) with positive scalar part."""
        return rotation_to_quaternion(self.rotation)


def se3_exp(xi: np.ndarray) -> Pose:
    """Exponential map of a twist [rho; phi] onto a Pose."""
    xi = np.asarray(xi, dtype=np.float64).reshape(6)
    rho, phi = xi[:3], xi[3:]
    theta2 = float(phi @ phi)
    Phi = skew(phi)
    if theta2 < 1e-16:
        b = 0.5 - theta2 / 24.0
        c = 1.0 / 6.0 - theta2 / 120.0
    else:
        theta = math.sqrt(theta2)
        b = (1.0 - math.cos(theta)) / theta2
        c = (theta - math.sin(theta)) / (theta2 * theta)
    V = np.eye(3) + b * Phi + c * (Phi @ Phi)
    return Pose(so3_exp(phi), V @ rho)


def se3_log(pose: Pose) -> np.ndarray:
    """Inverse of :func:`se3_exp`."""
    phi = so3_log(pose.rotation)
    theta2 = float(phi @ phi)
    Phi = skew(phi)
    if theta2 < 1e-16:
        Vinv = np.eye(3) - 0.5 * Phi + (1.0 / 12.0) * (Phi @ Phi)
    else:
        theta = math.sqrt(theta2)
        half = 0.5 * theta
        cot = half / math.tan(half)
        Vinv = np.eye(3) - 0.5 * Phi + ((1.0 - cot) / theta2) * (Phi @ Phi)
    return np.concatenate([Vinv @ pose.translation, phi])


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrix from (qx, qy, qz, qw); normalizes the input."""
    x, y, z, w = np.asarray(q, dtype=np.float64).reshape(4)
    n = math.sqrt(x * x + y * y + z * z + w * w)
    if n < 1e-12:
        raise ValueError("zero-norm quaternion")
    x, y, z, w = x / n, y / n, z / n, w / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotation_to_quaternion(R: np.ndarray) -> np.ndarray:
    """(qx, qy, qz, qw) from a rotation matrix (Shepperd's method)."""
    m = np.asarray(R, dtype=np.float64)
    trace = m[0, 0] + m[1, 1] + m[2, 2]
    if trace > 0:
        s = math.sqrt(trace + 1.0) * 2.0
        w = 0.25 * s
        x = (m[2, 1] - m[1, 2]) / s
        y = (m[0, 2] - m[2, 0]) / s
        z = (m[1, 0] - m[0, 1]) / s
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        w = (m[2, 1] - m[1, 2]) / s
        x = 0.25 * s
        y = (m[0, 1] + m[1, 0]) / s
        z = (m[0, 2] + m[2, 0]) / s
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        w = (m[0, 2] - m[2, 0]) / s
        x = (m[0, 1] + m[1, 0]) / s
        y = 0.25 * s
        z = (m[1, 2] + m[2, 1]) / s
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        w = (m[1, 0] - m[0, 1]) / s
        x = (m[0, 2] + m[2, 0]) / s
        y = (m[1, 2] + m[2, 1]) / s
        z = 0.25 * s
    q = np.array([x, y, z, w])
    if w < 0:
        q = -q
    return q / np.linalg.norm(q)


def slerp(q0: np.ndarray, q1: np.ndarray, s: float) -> np.ndarray:
    """Spherical-linear interpolation between unit quaternions."""
    q0 = np.asarray(q0, dtype=np.float64)
    q1 = np.asarray(q1, dtype=np.float64)
    dot = float(q0 @ q1)
    if dot < 0:
        q1 = -q1
        dot = -dot
    if dot > 1.0 - 1e-10:
        out = (1.0 - s) * q0 + s * q1
        return out / np.linalg.norm(out)
    theta = math.acos(max(-1.0, min(1.0, dot)))
    return (math.sin((1.0 - s) * theta) * q0 + math.sin(s * theta) * q1) / math.sin(theta)


def interpolate_pose(p0: Pose, p1: Pose, s: float) -> Pose:
    """Linear translation + slerp rotation between two poses."""
    q = slerp(p0.to_quaternion(), p1.to_quaternion(), s)
    t = (1.0 - s) * p0.translation + s * p1.translation
    return Pose(quaternion_to_rotation(q), t)


class PixelCoord(NamedTuple):
    """Continuous pixel coordinates; u is the column, v the row."""

    u: float
    v: float


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera parameters for a width x height image."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def half(self) -> "Intrinsics":
        """Intrinsics of the next (half-resolution) pyramid level."""
        if self.width % 2 or self.height % 2:
            raise PyramidDimensionError(
                f"cannot halve {self.width}x{self.height} intrinsics"
            )
        return Intrinsics(
            fx=self.fx / 2.0,
            fy=self.fy / 2.0,
            cx=(self.cx + 0.5) / 2.0 - 0.5,
            cy=(self.cy + 0.5) / 2.0 - 0.5,
            width=self.width // 2,
            height=self.height // 2,
        )

    def pyramid(self, levels: int) -> list["Intrinsics"]:
        out = [self]
        for _ in range(levels - 1):
            out.append(out[-1].half())
        return out


@dataclass(frozen=True)
class RgbdFrame:
    """One RGB-D observation: color in [0, 1], depth in metres (0 invalid)."""

    timestamp: float
    color: np.ndarray
    depth: np.ndarray

    def __post_init__(self):
        if self.color.shape[:2] != self.depth.shape:
            raise ValueError(
                f"color {self.color.shape[:2]} and depth {self.depth.shape} disagree"
            )

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]


def back_project(u: PixelCoord, depth: float, K: Intrinsics) -> np.ndarray:
    """Lift pixel u with depth d to a camera-frame 3D point."""
    if not np.isfinite(depth) or depth <= 0:
        raise InvalidDepthError(f"depth {depth!r} is not a positive finite value")
    return np.array(
        [
            (u[0] - K.cx) * depth / K.fx,
            (u[1] - K.cy) * depth / K.fy,
            depth,
        ]
    )


def project(p: np.ndarray, K: Intrinsics) -> PixelCoord:
    """Perspective projection of a camera-frame point to pixel coordinates."""
    p = np.asarray(p, dtype=np.float64)
    if p[2] <= 0:
        raise BehindCameraError(f"point with z={p[2]!r} is behind the camera")
    return PixelCoord(K.fx * p[0] / p[2] + K.cx, K.fy * p[1] / p[2] + K.cy)


def back_project_map(depth: np.ndarray, K: Intrinsics) -> np.ndarray:
    """Vectorized back-projection; invalid pixels map to NaN vertices."""
    h, w = depth.shape
    us = np.arange(w, dtype=np.float64)
    vs = np.arange(h, dtype=np.float64)
    uu, vv = np.meshgrid(us, vs)
    d = depth.astype(np.float64)
    z = np.where(d > 0, d, np.nan)
    return np.stack(
        [(uu - K.cx) * z / K.fx, (vv - K.cy) * z / K.fy, z], axis=-1
    )


def project_points(points: np.ndarray, K: Intrinsics):
    """Project (N, 3) camera-frame points; returns ((N, 2) uv, valid mask)."""
    pts = np.asarray(points, dtype=np.float64)
    z = pts[:, 2]
    valid = z > 1e-9
    zs = np.where(valid, z, 1.0)
    uv = np.stack(
        [K.fx * pts[:, 0] / zs + K.cx, K.fy * pts[:, 1] / zs + K.cy], axis=-1
    )
    return uv, valid


def compute_normals(depth: np.ndarray, K: Intrinsics) -> np.ndarray:
    """Per-pixel normals from the depth map, oriented toward the camera.

    Uses gradients of the vertex map (one-sided at the borders), so every
    pixel with valid depth and valid neighbors gets a normal; pixels next to
    holes come out NaN.
    """
    verts = back_project_map(depth, K)
    dv = np.gradient(verts, axis=0)
    du = np.gradient(verts, axis=1)
    n = np.cross(du, dv)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        n = n / norm
    # orient against the viewing ray so n . p < 0
    flip = np.sum(n * verts, axis=-1) > 0
    n[flip] = -n[flip]
    n[~np.isfinite(n).all(axis=-1)] = np.nan
    return n


def intensity(color: np.ndarray) -> np.ndarray:
    """Luma conversion used by the photometric term."""
    c = color.astype(np.float64)
    return 0.299 * c[..., 0] + 0.587 * c[..., 1] + 0.114 * c[..., 2]


def _median_downsample_depth(depth: np.ndarray) -> np.ndarray:
    """Halve a depth map taking the lower median of valid values per 2x2 block.

    The element median (never an average of two observations) avoids creating
    phantom surfaces across depth discontinuities; blocks with no valid depth
    stay invalid.
    """
    h, w = depth.shape
    blocks = depth.reshape(h // 2, 2, w // 2, 2).transpose(0, 2, 1, 3).reshape(
        h // 2, w // 2, 4
    )
    valid = blocks > 0
    counts = valid.sum(axis=-1)
    padded = np.where(valid, blocks, np.inf)
    padded = np.sort(padded, axis=-1)
    pick = np.clip((counts - 1) // 2, 0, 3)
    out = np.take_along_axis(padded, pick[..., None], axis=-1)[..., 0]
    out[counts == 0] = 0.0
    return out.astype(depth.dtype)


def _box_downsample_color(color: np.ndarray) -> np.ndarray:
    h, w = color.shape[:2]
    blocks = color.reshape(h // 2, 2, w // 2, 2, 3).astype(np.float64)
    return blocks.mean(axis=(1, 3)).astype(color.dtype)


def build_pyramid(frame: RgbdFrame, levels: int) -> list[RgbdFrame]:
    """Coarse-to-fine image pyramid; level 0 is the input frame."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    div = 2 ** (levels - 1)
    if frame.width % div or frame.height % div:
        raise PyramidDimensionError(
            f"{frame.width}x{frame.height} not divisible by {div}"
        )
    out = [frame]
    for _ in range(1, levels):
        prev = out[-1]
        out.append(
            RgbdFrame(
                timestamp=prev.timestamp,
                color=_box_downsample_color(prev.color),
                depth=_median_downsample_depth(prev.depth),
            )
        )
    return out
