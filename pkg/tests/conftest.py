"""Shared fixtures: small synthetic scenes rendered once per session."""

import numpy as np
import pytest

from surfelslam.geometry import Intrinsics, Pose
from surfelslam import synth


@pytest.fixture(scope="session")
def small_intrinsics() -> Intrinsics:
    """80x60 camera, 3-level-pyramid friendly."""
    return synth.default_intrinsics(80, 60)


@pytest.fixture(scope="session")
def mini_intrinsics() -> Intrinsics:
    return synth.default_intrinsics(160, 120)


@pytest.fixture(scope="session")
def desk_frame(mini_intrinsics):
    """One noise-free desk-scene frame at the identity pose."""
    scene = synth.desk_scene()
    frame, seg, inst = synth.render_frame(scene, Pose.identity(), mini_intrinsics)
    return scene, frame, seg, inst


@pytest.fixture(scope="session")
def flat_wall_frame(small_intrinsics):
    """Fronto-parallel wall at z=2 filling the view."""
    scene = synth.Scene(
        primitives=[
            synth.Plane(point=(0, 0, 2.0), normal=(0, 0, -1.0), extent=(3.0, 3.0))
        ],
        labels=["wall"],
        shading="flat",
    )
    frame, seg, inst = synth.render_frame(scene, Pose.identity(), small_intrinsics)
    return scene, frame, seg, inst


def rotation_angle_deg(Ra: np.ndarray, Rb: np.ndarray) -> float:
    cos = (np.trace(Ra.T @ Rb) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))


def pose_error(a: Pose, b: Pose):
    """(translation metres, rotation degrees) between two poses."""
    return (
        float(np.linalg.norm(a.translation - b.translation)),
        rotation_angle_deg(a.rotation, b.rotation),
    )
