"""Surfel map: splatted rendering, fusion, inactivity, PLY export."""

import numpy as np
import pytest

from surfelslam import synth
from surfelslam.geometry import Intrinsics, Pose, se3_exp
from surfelslam.surfels import FusionConfig, SurfelMap

K = Intrinsics(fx=70.0, fy=70.0, cx=40.0, cy=30.0, width=80, height=60)


def single_surfel_map(position, normal=(0, 0, -1), color=(0.5, 0.2, 0.1), radius=0.004):
    m = SurfelMap()
    m.add(np.array([position], float), np.array([normal], float),
          np.array([color], float), np.array([radius]))
    return m


class TestRender:
    def test_single_surfel_on_axis(self):
        m = single_surfel_map((0, 0, 1.0))
        view = m.render(Pose.identity(), K)
        assert view.depth[30, 40] == pytest.approx(1.0, abs=1e-12)
        assert view.index[30, 40] == 0
        np.testing.assert_allclose(view.position[30, 40], [0, 0, 1.0], atol=1e-12)

    def test_empty_map_all_invalid(self):
        view = SurfelMap().render(Pose.identity(), K)
        assert not view.valid.any()
        assert (view.depth == 0).all()

    def test_zbuffer_front_surfel_wins(self):
        m = SurfelMap()
        m.add(
            np.array([[0, 0, 2.0], [0, 0, 1.0]]),
            np.array([[0, 0, -1.0], [0, 0, -1.0]]),
            np.array([[1, 0, 0], [0, 1, 0]], float),
            np.array([0.01, 0.01]),
        )
        view = m.render(Pose.identity(), K)
        assert view.index[30, 40] == 1
        assert view.depth[30, 40] == pytest.approx(1.0)

    def test_behind_camera_not_rendered(self):
        m = single_surfel_map((0, 0, -1.0))
        view = m.render(Pose.identity(), K)
        assert not view.valid.any()

    def test_instance_label_carried(self):
        m = SurfelMap()
        m.add(np.array([[0, 0, 1.0]]), np.array([[0, 0, -1.0]]),
              np.array([[1, 1, 1.0]]), np.array([0.01]), labels=np.array([7]))
        view = m.render(Pose.identity(), K)
        assert view.instance[30, 40] == 7


@pytest.fixture()
def plane_frame():
    scene = synth.Scene(
        primitives=[synth.Plane(point=(0, 0, 2.0), normal=(0, 0, -1), extent=(4, 4))]
    )
    frame, _, _ = synth.render_frame(scene, Pose.identity(), K)
    return frame


class TestFusion:
    def test_empty_map_one_surfel_per_valid_pixel(self, plane_frame):
        m = SurfelMap()
        report = m.fuse_frame(plane_frame, Pose.identity(), K, 0)
        assert len(m) == K.width * K.height
        assert len(report.created_surfels) == len(m)
        assert len(report.matched_surfels) == 0

    def test_refusing_same_frame_is_idempotent(self, plane_frame):
        m = SurfelMap()
        m.fuse_frame(plane_frame, Pose.identity(), K, 0)
        w_before = m.weights.copy()
        report = m.fuse_frame(plane_frame, Pose.identity(), K, 1)
        assert len(m) == K.width * K.height
        assert len(report.created_surfels) == 0
        assert len(report.carved_surfels) == 0
        assert (m.weights > w_before).all()
        assert (m.t_last == 1).all()

    def test_two_noisy_plane_observations_average_closer(self):
        scene = synth.Scene(
            primitives=[synth.Plane(point=(0, 0, 2.0), normal=(0, 0, -1), extent=(4, 4))]
        )
        noise = synth.NoiseSpec(depth_sigma0=0.001)
        rng = np.random.default_rng(5)
        f1, _, _ = synth.render_frame(scene, Pose.identity(), K, noise, rng=rng)
        f2, _, _ = synth.render_frame(scene, Pose.identity(), K, noise, rng=rng)
        m = SurfelMap()
        m.fuse_frame(f1, Pose.identity(), K, 0)
        rms_single = np.sqrt(np.mean((m.positions[:, 2] - 2.0) ** 2))
        m.fuse_frame(f2, Pose.identity(), K, 1)
        rms_fused = np.sqrt(np.mean((m.positions[m.alive][:, 2] - 2.0) ** 2))
        assert rms_fused < rms_single

    def test_normals_stay_unit_after_updates(self, plane_frame):
        m = SurfelMap()
        for i in range(4):
            m.fuse_frame(plane_frame, Pose.identity(), K, i)
        np.testing.assert_allclose(
            np.linalg.norm(m.normals, axis=-1), 1.0, atol=1e-6
        )

    def test_equal_weight_update_is_order_insensitive(self):
        obs_a = np.array([0.0, 0.0, 2.0])
        obs_b = np.array([0.01, 0.0, 2.02])
        normal = np.array([0.0, 0.0, -1.0])

        def fuse_orders(first, second):
            m = SurfelMap()
            m.add(first, normal, np.array([0.5, 0.5, 0.5]), np.array([0.004]))
            w = m.weights[0]
            m.positions[0] = (w * m.positions[0] + second) / (w + 1)
            return m.positions[0]

        ab = fuse_orders(obs_a, obs_b)
        ba = fuse_orders(obs_b, obs_a)
        np.testing.assert_allclose(ab, ba, atol=1e-6)

    def test_render_after_fuse_reproduces_depth(self):
        scene = synth.desk_scene()
        Kd = synth.default_intrinsics(160, 120)
        frame, _, _ = synth.render_frame(scene, Pose.identity(), Kd)
        m = SurfelMap()
        m.fuse_frame(frame, Pose.identity(), Kd, 0)
        view = m.render(Pose.identity(), Kd)
        valid = view.valid & (frame.depth > 0)
        agree = np.abs(view.depth - frame.depth)[valid] <= FusionConfig().delta_depth
        assert agree.mean() >= 0.99

    def test_instance_map_labels_new_surfels(self, plane_frame):
        inst = np.zeros(plane_frame.depth.shape, dtype=np.int32)
        inst[10:20, 10:20] = 3
        m = SurfelMap()
        m.fuse_frame(plane_frame, Pose.identity(), K, 0, instance_map=inst)
        labeled = m.labels.reshape(-1)
        assert (labeled == 3).sum() == 100

    def test_free_space_violation_carves_low_weight_blob(self, plane_frame):
        m = SurfelMap()
        # ghost surfel floating half a metre in front of the plane
        m.add(np.array([[0, 0, 1.5]]), np.array([[0, 0, -1.0]]),
              np.array([[1, 0, 0.0]]), np.array([0.004]))
        m.fuse_frame(plane_frame, Pose.identity(), K, 0)
        assert not m.alive[0]

    def test_established_surfels_survive_carving(self, plane_frame):
        m = SurfelMap()
        m.add(np.array([[0, 0, 1.5]]), np.array([[0, 0, -1.0]]),
              np.array([[1, 0, 0.0]]), np.array([0.004]),
              weights=np.array([50.0]))
        m.fuse_frame(plane_frame, Pose.identity(), K, 0)
        assert m.alive[0]


class TestInactivity:
    def make_map(self):
        m = SurfelMap()
        m.add(
            np.array([[0, 0, 1.0], [0.1, 0, 1.0]]),
            np.array([[0, 0, -1.0], [0, 0, -1.0]]),
            np.array([[0.5, 0.5, 0.5], [0.5, 0.5, 0.5]]),
            np.array([0.004, 0.004]),
            frame_index=0,
            labels=np.array([0, 4]),  # background, object
        )
        return m

    def test_stale_background_goes_inactive(self):
        m = self.make_map()
        window = 200
        m.mark_inactive(window + 1, window)
        assert not m.active[0]

    def test_object_surfels_always_active(self):
        m = self.make_map()
        window = 200
        m.mark_inactive(10 * window, window)
        assert m.active[1]
        assert not m.active[0]

    def test_recently_updated_background_stays_active(self):
        m = self.make_map()
        window = 200
        m.t_last[0] = 150
        m.mark_inactive(200, window)
        assert m.active[0]

    def test_inactive_excluded_from_registration_render(self):
        m = self.make_map()
        m.mark_inactive(1000, 200)
        full = m.render(Pose.identity(), K, include_inactive=True)
        active_only = m.render(Pose.identity(), K, include_inactive=False)
        assert (full.index == 0).any()
        assert not (active_only.index == 0).any()
        assert (active_only.index == 1).any()


class TestPlyExport:
    def test_empty_map_valid_file(self, tmp_path):
        SurfelMap().export_ply(tmp_path / "m.ply")
        text = (tmp_path / "m.ply").read_text()
        assert "element vertex 0" in text
        assert text.splitlines()[0] == "ply"

    def test_single_surfel_attributes_survive_reload(self, tmp_path):
        m = SurfelMap()
        m.add(np.array([[0.25, -0.5, 1.75]]), np.array([[0, 1, 0.0]]),
              np.array([[1.0, 0.5, 0.0]]), np.array([0.0123]),
              labels=np.array([5]))
        m.export_ply(tmp_path / "m.ply")
        back = SurfelMap.load_ply(tmp_path / "m.ply")
        assert len(back) == 1
        np.testing.assert_allclose(back.positions[0], [0.25, -0.5, 1.75], atol=1e-12)
        np.testing.assert_allclose(back.normals[0], [0, 1, 0], atol=1e-12)
        assert back.labels[0] == 5
        assert back.radii[0] == pytest.approx(0.0123)

    def test_export_reload_export_byte_identical(self, tmp_path, plane_frame):
        m = SurfelMap()
        m.fuse_frame(plane_frame, Pose.identity(), K, 0)
        m.export_ply(tmp_path / "a.ply")
        SurfelMap.load_ply(tmp_path / "a.ply").export_ply(tmp_path / "b.ply")
        assert (tmp_path / "a.ply").read_bytes() == (tmp_path / "b.ply").read_bytes()

    def test_dead_surfels_not_exported(self, tmp_path):
        m = SurfelMap()
        m.add(np.array([[0, 0, 1.0], [0, 0, 2.0]]),
              np.array([[0, 0, -1.0], [0, 0, -1.0]]),
              np.array([[1, 1, 1.0], [1, 1, 1.0]]), np.array([0.01, 0.01]))
        m.alive[1] = False
        m.export_ply(tmp_path / "m.ply")
        assert "element vertex 1" in (tmp_path / "m.ply").read_text()
