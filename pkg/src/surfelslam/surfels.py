"""Fused surfel cloud: frame fusion, splatted model rendering, PLY export.

The map is stored struct-of-arrays so per-frame operations stay vectorized.
Surfel indices are stable for the lifetime of the map: removal (free-space
carving) only clears the `alive` flag and never compacts the arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import Intrinsics, Pose, RgbdFrame, back_project_map, compute_normals

BACKGROUND = 0
MAX_SPLAT_RADIUS_PX = 8

_DISK_OFFSETS = {}


def _disk_offsets(radius_px: int) -> np.ndarray:
    """Integer (du, dv) offsets covering a disk of the given pixel radius."""
    if radius_px not in _DISK_OFFSETS:
        r = radius_px
        grid = np.arange(-r, r + 1)
        du, dv = np.meshgrid(grid, grid)
        keep = du**2 + dv**2 <= r * r
        _DISK_OFFSETS[radius_px] = np.stack([du[keep], dv[keep]], axis=-1)
    return _DISK_OFFSETS[radius_px]


@dataclass
class FusionConfig:
    """Association gates and update rules for fuse_frame."""

    delta_depth: float = 0.05  # metres
    delta_angle_deg: float = 20.0
    radius_min: float = 0.001
    radius_max: float = 0.05
    weight_cap: float = 100.0
    carve_margin: float = 0.05
    carve_weight_max: float = 10.0  # only low-confidence surfels get carved
    inactive_window: int = 200  # frames without observation before retirement


@dataclass
class ModelView:
    """Splatted rendering of the map from one camera pose."""

    pose: Pose
    intrinsics: Intrinsics
    depth: np.ndarray  # (H, W) camera-space z of the winning surfel, 0 invalid
    color: np.ndarray  # (H, W, 3)
    normal: np.ndarray  # (H, W, 3) world frame
    position: np.ndarray  # (H, W, 3) world frame, exact surfel centers
    index: np.ndarray  # (H, W) surfel index, -1 invalid
    instance: np.ndarray  # (H, W) instance label of the winner, 0 elsewhere

    @property
    def valid(self) -> np.ndarray:
        return self.index >= 0


@dataclass
class FusionReport:
    """What fuse_frame did: per-pixel correspondence bookkeeping."""

    matched_pixels: np.ndarray  # (M, 2) [v, u]
    matched_surfels: np.ndarray  # (M,)
    created_pixels: np.ndarray  # (N, 2) [v, u]
    created_surfels: np.ndarray  # (N,)
    carved_surfels: np.ndarray


class SurfelMap:
    """Growable surfel cloud with semantic side channels."""

    _FIELDS = (
        ("positions", np.float64, 3),
        ("normals", np.float64, 3),
        ("colors", np.float64, 3),
        ("weights", np.float64, None),
        ("radii", np.float64, None),
        ("t0", np.int64, None),
        ("t_last", np.int64, None),
        ("labels", np.int32, None),
        ("p_nonbg", np.float64, None),
        ("p_obs", np.int64, None),
        ("confidence", np.int32, None),
        ("active", np.bool_, None),
        ("alive", np.bool_, None),
    )

    def __init__(self, capacity: int = 1024):
        self._n = 0
        self._cap = max(int(capacity), 16)
        for name, dtype, width in self._FIELDS:
            shape = (self._cap,) if width is None else (self._cap, width)
            setattr(self, "_" + name, np.zeros(shape, dtype=dtype))

    def __len__(self) -> int:
        return self._n

    def _grow(self, extra: int) -> None:
        need = self._n + extra
        if need <= self._cap:
            return
        new_cap = self._cap
        while new_cap < need:
            new_cap *= 2
        for name, dtype, width in self._FIELDS:
            old = getattr(self, "_" + name)
            shape = (new_cap,) if width is None else (new_cap, width)
            buf = np.zeros(shape, dtype=dtype)
            buf[: self._n] = old[: self._n]
            setattr(self, "_" + name, buf)
        self._cap = new_cap

    # live views over the populated prefix -------------------------------
    @property
    def positions(self):
        return self._positions[: self._n]

    @property
    def normals(self):
        return self._normals[: self._n]

    @property
    def colors(self):
        return self._colors[: self._n]

    @property
    def weights(self):
        return self._weights[: self._n]

    @property
    def radii(self):
        return self._radii[: self._n]

    @property
    def t0(self):
        return self._t0[: self._n]

    @property
    def t_last(self):
        return self._t_last[: self._n]

    @property
    def labels(self):
        return self._labels[: self._n]

    @property
    def p_nonbg(self):
        return self._p_nonbg[: self._n]

    @property
    def p_obs(self):
        return self._p_obs[: self._n]

    @property
    def confidence(self):
        return self._confidence[: self._n]

    @property
    def active(self):
        return self._active[: self._n]

    @property
    def alive(self):
        return self._alive[: self._n]

    @property
    def alive_count(self) -> int:
        return int(np.count_nonzero(self.alive))

    def add(
        self,
        positions,
        normals,
        colors,
        radii,
        frame_index: int = 0,
        labels=None,
        weights=None,
    ) -> np.ndarray:
        """Append surfels; returns the new indices."""
        positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        k = len(positions)
        self._grow(k)
        sl = slice(self._n, self._n + k)
        self._positions[sl] = positions
        n = np.atleast_2d(np.asarray(normals, dtype=np.float64))
        self._normals[sl] = n / np.linalg.norm(n, axis=-1, keepdims=True)
        self._colors[sl] = np.atleast_2d(np.asarray(colors, dtype=np.float64))
        self._radii[sl] = np.asarray(radii, dtype=np.float64)
        self._weights[sl] = 1.0 if weights is None else np.asarray(weights, dtype=np.float64)
        self._t0[sl] = frame_index
        self._t_last[sl] = frame_index
        self._labels[sl] = BACKGROUND if labels is None else np.asarray(labels, dtype=np.int32)
        self._p_nonbg[sl] = 0.0
        self._p_obs[sl] = 0
        self._confidence[sl] = 0
        self._active[sl] = True
        self._alive[sl] = True
        out = np.arange(self._n, self._n + k)
        self._n += k
        return out

    # ------------------------------------------------------------------
    def render(
        self,
        pose: Pose,
        K: Intrinsics,
        include_inactive: bool = True,
    ) -> ModelView:
        """Splat surfels as screen-space disks with z-buffering.

        Each surfel covers a disk of radius r*f/z pixels around its projected
        center; the nearest surfel wins each pixel. Depth ties (same 1 cm
        bucket) go to the splat whose center is closest to the pixel, then to
        the lowest index, which keeps rendering deterministic.
        """
        h, w = K.height, K.width
        view = ModelView(
            pose=pose,
            intrinsics=K,
            depth=np.zeros((h, w)),
            color=np.zeros((h, w, 3)),
            normal=np.zeros((h, w, 3)),
            position=np.zeros((h, w, 3)),
            index=np.full((h, w), -1, dtype=np.int64),
            instance=np.zeros((h, w), dtype=np.int32),
        )
        if self._n == 0:
            return view

        sel = self.alive.copy()
        if not include_inactive:
            sel &= self.active
        idx = np.nonzero(sel)[0]
        if idx.size == 0:
            return view

        inv = pose.inverse()
        p_cam = self.positions[idx] @ inv.rotation.T + inv.translation
        z = p_cam[:, 2]
        front = z > 1e-6
        idx, p_cam, z = idx[front], p_cam[front], z[front]
        if idx.size == 0:
            return view

        u = K.fx * p_cam[:, 0] / z + K.cx
        v = K.fy * p_cam[:, 1] / z + K.cy
        # foreshorten the splat by the view angle so grazing surfels do not
        # smear across silhouettes
        ray = p_cam / np.linalg.norm(p_cam, axis=-1, keepdims=True)
        n_cam = self.normals[idx] @ inv.rotation.T
        cos_view = np.clip(np.abs(np.sum(n_cam * ray, axis=-1)), 0.05, 1.0)
        rad_px = np.clip(
            np.round(self.radii[idx] * K.fx / z * cos_view).astype(np.int64),
            0,
            MAX_SPLAT_RADIUS_PX,
        )
        margin = rad_px.astype(np.float64)
        on_screen = (
            (u >= -margin) & (u <= w - 1 + margin) & (v >= -margin) & (v <= h - 1 + margin)
        )
        idx, u, v, z, rad_px = (
            idx[on_screen],
            u[on_screen],
            v[on_screen],
            z[on_screen],
            rad_px[on_screen],
        )
        if idx.size == 0:
            return view
        n_cam = n_cam[on_screen]
        p_cam = p_cam[on_screen]

        cu = np.round(u).astype(np.int64)
        cv = np.round(v).astype(np.int64)
        n_dot_p = np.sum(n_cam * p_cam, axis=-1)

        pix_parts, z_parts, r2_parts, id_parts = [], [], [], []
        for r in np.unique(rad_px):
            grp = rad_px == r
            offs = _disk_offsets(int(r))
            pu = cu[grp][:, None] + offs[:, 0][None, :]
            pv = cv[grp][:, None] + offs[:, 1][None, :]
            inside = (pu >= 0) & (pu < w) & (pv >= 0) & (pv < h)
            d2 = (pu - u[grp][:, None]) ** 2 + (pv - v[grp][:, None]) ** 2
            # depth where the covered pixel's ray crosses the surfel's disk
            # plane, so same-surface splats agree and z-order is exact
            ng = n_cam[grp]
            denom = (
                ng[:, None, 0] * (pu - K.cx) / K.fx
                + ng[:, None, 1] * (pv - K.cy) / K.fy
                + ng[:, None, 2]
            )
            zc = z[grp][:, None]
            safe = np.abs(denom) > 0.05
            t = np.where(safe, n_dot_p[grp][:, None] / np.where(safe, denom, 1.0), zc)
            rad_m = self.radii[idx[grp]][:, None]
            t = np.clip(t, zc - 2 * rad_m, zc + 2 * rad_m)
            src = np.broadcast_to(np.arange(grp.sum())[:, None], pu.shape)
            pix_parts.append((pv[inside] * w + pu[inside]))
            z_parts.append(t[inside])
            r2_parts.append(d2[inside])
            id_parts.append(idx[grp][src[inside]])

        pix = np.concatenate(pix_parts)
        if pix.size == 0:
            return view
        zs = np.concatenate(z_parts)
        r2 = np.concatenate(r2_parts)
        ids = np.concatenate(id_parts)
        # continuous ordering: depth plus a center-proximity penalty. The
        # penalty (2 cm per squared pixel of center distance) outweighs
        # tangent-plane extrapolation error on curved surfaces, so a pixel's
        # own ray surfel beats off-center neighbors, while surfaces that are
        # genuinely far nearer still occlude.
        key = zs + 2e-2 * r2

        order = np.lexsort((ids, key, pix))
        pix_sorted = pix[order]
        first = np.ones(pix_sorted.size, dtype=bool)
        first[1:] = pix_sorted[1:] != pix_sorted[:-1]
        win = order[first]

        flat_pix = pix[win]
        winner = ids[win]
        view.index.reshape(-1)[flat_pix] = winner
        view.instance.reshape(-1)[flat_pix] = self.labels[winner]

        # depth / color / normal: blend splats lying within 2 mm of the
        # winning depth with a hat kernel over the center distance. A splat
        # centered on the pixel reproduces its attributes exactly;
        # fractional centers resample bilinearly, which antialiases the
        # model maps under motion. Pixels whose shell carries no weight
        # (occlusion boundaries) keep the winner's values.
        depth_flat = view.depth.reshape(-1)
        color_flat = view.color.reshape(-1, 3)
        normal_flat = view.normal.reshape(-1, 3)
        depth_flat[flat_pix] = zs[win]
        color_flat[flat_pix] = self.colors[winner]
        normal_flat[flat_pix] = self.normals[winner]

        t_win = np.zeros(h * w)
        t_win[flat_pix] = zs[win]
        near = (np.abs(zs - t_win[pix]) <= 0.002) & (r2 < 1.0)
        if np.any(near):
            wgt = 1.0 - np.sqrt(r2[near])
            npix = pix[near]
            nids = ids[near]
            norm = np.zeros(h * w)
            np.add.at(norm, npix, wgt)
            covered = norm > 1e-9

            acc = np.zeros(h * w)
            np.add.at(acc, npix, wgt * zs[near])
            depth_flat[covered] = acc[covered] / norm[covered]

            acc3 = np.zeros((h * w, 3))
            np.add.at(acc3, npix, wgt[:, None] * self.colors[nids])
            color_flat[covered] = acc3[covered] / norm[covered][:, None]

            acc3.fill(0.0)
            np.add.at(acc3, npix, wgt[:, None] * self.normals[nids])
            nn = np.linalg.norm(acc3[covered], axis=-1)
            ok = nn > 1e-9
            rows = np.nonzero(covered)[0][ok]
            normal_flat[rows] = acc3[rows] / nn[ok][:, None]

        # model vertex: the blended depth back-projected along the pixel ray,
        # expressed in world coordinates (ray-consistent with depth & color)
        vs_pix = flat_pix // w
        us_pix = flat_pix % w
        zb = depth_flat[flat_pix]
        pts_cam = np.stack(
            [
                (us_pix - K.cx) * zb / K.fx,
                (vs_pix - K.cy) * zb / K.fy,
                zb,
            ],
            axis=-1,
        )
        view.position.reshape(-1, 3)[flat_pix] = (
            pts_cam @ pose.rotation.T + pose.translation
        )
        return view

    # ------------------------------------------------------------------
    def fuse_frame(
        self,
        frame: RgbdFrame,
        pose: Pose,
        K: Intrinsics,
        frame_index: int,
        instance_map: Optional[np.ndarray] = None,
        cfg: Optional[FusionConfig] = None,
    ) -> FusionReport:
        """Integrate one frame at the given pose.

        Surfel centers are point-projected into the frame; per pixel, the
        candidate with the smallest depth gap that passes the depth and
        normal-angle gates is matched and updated by confidence-weighted
        averaging. Valid pixels with no matched surfel spawn new surfels
        labeled from `instance_map` (background when absent). Unmatched
        low-confidence surfels observed well in front of the measured
        surface are carved.
        """
        cfg = cfg or FusionConfig()
        h, w = frame.depth.shape

        depth = frame.depth.astype(np.float64)
        verts = back_project_map(depth, K)
        normals_cam = compute_normals(depth, K)
        valid = (depth > 0) & np.isfinite(normals_cam).all(axis=-1)

        verts_w = np.einsum("ij,hwj->hwi", pose.rotation, verts) + pose.translation
        normals_w = np.einsum("ij,hwj->hwi", pose.rotation, normals_cam)

        # --- point-project all live surfels into the frame
        live = np.nonzero(self.alive)[0]
        matched_surfels = np.zeros(0, dtype=np.int64)
        matched_cells = np.zeros((0, 2), dtype=np.int64)
        carved = np.zeros(0, dtype=np.int64)
        if live.size:
            inv = pose.inverse()
            p_cam = self.positions[live] @ inv.rotation.T + inv.translation
            z = p_cam[:, 2]
            cu = np.round(K.fx * p_cam[:, 0] / np.where(z > 1e-9, z, 1.0) + K.cx).astype(np.int64)
            cv = np.round(K.fy * p_cam[:, 1] / np.where(z > 1e-9, z, 1.0) + K.cy).astype(np.int64)
            proj_ok = (z > 1e-9) & (cu >= 0) & (cu < w) & (cv >= 0) & (cv < h)
            live, p_cam, z, cu, cv = (
                live[proj_ok],
                p_cam[proj_ok],
                z[proj_ok],
                cu[proj_ok],
                cv[proj_ok],
            )
            d_f = depth[cv, cu]
            pix_ok = valid[cv, cu]
            zdiff = np.abs(z - d_f)
            cos_gate = np.cos(np.radians(cfg.delta_angle_deg))
            ndot = np.sum(self.normals[live] * normals_w[cv, cu], axis=-1)
            cand = pix_ok & (zdiff <= cfg.delta_depth) & (ndot >= cos_gate)

            # best candidate per pixel: smallest depth gap, then lowest index
            cells = cv[cand] * w + cu[cand]
            order = np.lexsort((live[cand], zdiff[cand], cells))
            cells_sorted = cells[order]
            first = np.ones(cells_sorted.size, dtype=bool)
            first[1:] = cells_sorted[1:] != cells_sorted[:-1]
            win = order[first]
            matched_surfels = live[cand][win]
            matched_flat = cells_sorted[first]
            matched_cells = np.stack(
                [matched_flat // w, matched_flat % w], axis=-1
            )

            # free-space carving: unmatched low-weight surfels in front of
            # the observed surface
            in_front = (
                (d_f > 0)
                & (z < d_f - cfg.carve_margin)
                & (self.weights[live] <= cfg.carve_weight_max)
            )
            carve_mask = np.zeros(self._n, dtype=bool)
            carve_mask[live[in_front]] = True
            carve_mask[matched_surfels] = False
            carved = np.nonzero(carve_mask)[0]
            if carved.size:
                self._alive[carved] = False

        # --- weighted-average update of matched surfels (1:1 per pixel)
        if matched_surfels.size:
            mv, mu = matched_cells[:, 0], matched_cells[:, 1]
            w_old = self.weights[matched_surfels][:, None]
            for attr, obs in (
                (self._positions, verts_w[mv, mu]),
                (self._colors, frame.color.astype(np.float64)[mv, mu]),
                (self._normals, normals_w[mv, mu]),
            ):
                attr[matched_surfels] = (w_old * attr[matched_surfels] + obs) / (
                    w_old + 1.0
                )
            norms = np.linalg.norm(self._normals[matched_surfels], axis=-1, keepdims=True)
            norms[norms < 1e-12] = 1.0
            self._normals[matched_surfels] /= norms
            self._weights[matched_surfels] = np.minimum(
                w_old[:, 0] + 1.0, cfg.weight_cap
            )
            self._t_last[matched_surfels] = frame_index
            self._active[matched_surfels] = True

        # --- new surfels for valid pixels without a matched surfel
        create = valid.copy()
        if matched_surfels.size:
            create[matched_cells[:, 0], matched_cells[:, 1]] = False
        cre_v, cre_u = np.nonzero(create)
        if cre_v.size:
            d = depth[create]
            nz = np.abs(normals_cam[create][:, 2])
            radii = np.clip(
                d * np.sqrt(2.0) / K.fx * np.minimum(1.0 / np.maximum(nz, 1e-6), 2.0),
                cfg.radius_min,
                cfg.radius_max,
            )
            labels = (
                instance_map[create].astype(np.int32)
                if instance_map is not None
                else None
            )
            new_idx = self.add(
                verts_w[create],
                normals_w[create],
                frame.color.astype(np.float64)[create],
                radii,
                frame_index=frame_index,
                labels=labels,
            )
        else:
            new_idx = np.zeros(0, dtype=np.int64)

        return FusionReport(
            matched_pixels=matched_cells,
            matched_surfels=matched_surfels,
            created_pixels=np.stack([cre_v, cre_u], axis=-1),
            created_surfels=new_idx,
            carved_surfels=carved,
        )

    # ------------------------------------------------------------------
    def mark_inactive(self, frame_index: int, window: Optional[int] = None) -> int:
        """Retire stale background surfels from registration.

        Surfels carrying an object instance label are always kept active.
        Returns the number newly flagged inactive.
        """
        window = window if window is not None else FusionConfig().inactive_window
        stale = (
            self.alive
            & self.active
            & (self.labels == BACKGROUND)
            & (frame_index - self.t_last > window)
        )
        self._active[: self._n][stale] = False
        return int(np.count_nonzero(stale))

    # ------------------------------------------------------------------
    def export_ply(self, path) -> None:
        """ASCII PLY with per-vertex position/normal/color/radius/weight/instance."""
        keep = np.nonzero(self.alive)[0]
        lines = [
            "ply",
            "format ascii 1.0",
            "comment surfel cloud: x y z are metres, nx ny nz the unit normal,",
            "comment red green blue the 0-255 color, radius the disk radius in",
            "comment metres, weight the fusion confidence, instance the object",
            "comment instance id (0 = background)",
            f"element vertex {keep.size}",
            "property float64 x",
            "property float64 y",
            "property float64 z",
            "property float64 nx",
            "property float64 ny",
            "property float64 nz",
            "property uchar red",
            "property uchar green",
            "property uchar blue",
            "property float64 radius",
            "property float64 weight",
            "property int instance",
            "end_header",
        ]
        rgb = np.clip(np.round(self.colors[keep] * 255.0), 0, 255).astype(int)
        for row, i in enumerate(keep):
            p = self.positions[i]
            n = self.normals[i]
            lines.append(
                " ".join(
                    [repr(float(v)) for v in (*p, *n)]
                    + [str(c) for c in rgb[row]]
                    + [repr(float(self.radii[i])), repr(float(self.weights[i]))]
                    + [str(int(self.labels[i]))]
                )
            )
        Path(path).write_text("\n".join(lines) + "\n")

    @staticmethod
    def load_ply(path) -> "SurfelMap":
        text = Path(path).read_text().splitlines()
        try:
            start = text.index("end_header") + 1
        except ValueError:
            raise ValueError(f"{path} is not a PLY file produced by export_ply")
        m = SurfelMap()
        rows = [line.split() for line in text[start:] if line.strip()]
        if not rows:
            return m
        vals = [[float(x) for x in row] for row in rows]
        arr = np.array(vals)
        m.add(
            positions=arr[:, 0:3],
            normals=arr[:, 3:6],
            colors=arr[:, 6:9] / 255.0,
            radii=arr[:, 9],
            weights=arr[:, 10],
            labels=arr[:, 11].astype(np.int32),
        )
        return m
