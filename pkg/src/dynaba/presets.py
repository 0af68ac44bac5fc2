"""Named simulation configurations.

group1 and group2 are corridor worlds: the camera drives a straight line
while static landmarks sit on a cylinder around the path, depth-staggered so
that exactly eight are inside the sensing window at every frame and each one
is visible for only a handful of frames.  The tracked object travels ahead
of the camera for the whole sequence.  groups 3-4 add turns, with statics
spread widely enough to stay in view.  All coordinates are invented fixture
data.
"""

import math

import numpy as np

from . import geometry as geo
from .geometry import Pose, Rotation
from .simulation import (FovConfig, NoiseConfig, ObjectSpec, PartSpec,
                         SimConfig, Waypoint)


def spin_drift_twist(center, step, axis, angle) -> tuple:
    """Per-frame twist rotating a part about its own center while the center
    translates by ``step``."""
    c = np.asarray(center, dtype=float)
    axis = np.asarray(axis, dtype=float)
    rot = Rotation.exp(axis / np.linalg.norm(axis) * angle)
    t = c + np.asarray(step, dtype=float) - rot.apply(c)
    return tuple(geo.log(Pose(rot, t)))


def ring_corridor(path_length: float, radius: float = 4.0,
                  spacing: float = 2.0, lanes: int = 9,
                  half_angle_deg: float = 75.0) -> tuple:
    """Landmarks on a cylinder around a straight +x path; returns
    (positions, max_range).

    Each lane repeats a landmark every ``spacing`` meters and is visible for
    a forward window of length spacing*(lanes-1)/lanes; lane phases are
    staggered by spacing/lanes, so at any camera position exactly one lane
    is between landmarks and exactly lanes-1 landmarks are in view.
    """
    cot = 1.0 / math.tan(math.radians(half_angle_deg))
    window = spacing * (lanes - 1) / lanes
    reach = window + radius * cot
    max_range = math.hypot(reach, radius)
    x_lo, x_hi = radius * cot, path_length + reach
    rng = np.random.default_rng(20240817)  # fixture geometry, seed-independent
    positions = []
    for lane in range(lanes):
        base = (0.137 + lane / lanes) * spacing
        m = math.ceil((x_lo - base) / spacing)
        while base + m * spacing <= x_hi:
            ang = rng.uniform(0.0, 2.0 * math.pi)
            positions.append((base + m * spacing,
                              radius * math.cos(ang), radius * math.sin(ang)))
            m += 1
    return tuple(positions), max_range


_NOISE = NoiseConfig(init_translation_sigma=0.05,
                     init_rotation_sigma_deg=2.9,
                     measurement_sigma=0.05)

# Corridor groups drift more per frame: the odometry walk is the error source
# the optimizer must beat, so give it realistic 0.4 m/frame-scale noise.
_CORRIDOR_NOISE = NoiseConfig(init_translation_sigma=0.09,
                              init_rotation_sigma_deg=4.0,
                              measurement_sigma=0.05)


def rolling_twist(axis, angle: float, advance: float = 0.4) -> tuple:
    """Screw motion whose rotation axis is parallel to its translation, so
    the part spins while traveling in a straight line (a constant twist with
    any other axis orbits a fixed world axis instead)."""
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    speed = advance / a[0]  # +x progress matches the camera step
    return tuple(np.concatenate((a * angle, a * speed)))


def _followed_object(n_points: int = 4) -> ObjectSpec:
    """Three rigid parts traveling ahead of a camera that advances 0.4 m per
    frame, rolling about their own travel directions."""
    specs = (
        ((2.4, 0.9, 0.5), (1.0, 0.05, 0.00), 0.10),
        ((2.6, -0.9, -0.4), (1.0, -0.04, 0.03), -0.08),
        ((2.2, 0.1, -0.8), (1.0, 0.00, -0.05), 0.12),
    )
    parts = []
    for center, axis, angle in specs:
        parts.append(PartSpec(twist=rolling_twist(axis, angle),
                              n_points=n_points, center=center, extent=0.55))
    return ObjectSpec(tuple(parts))


def group1() -> SimConfig:
    length = 17 * 0.4
    positions, max_range = ring_corridor(length)
    return SimConfig(
        name="group1", n_frames=18, seed=0,
        waypoints=(Waypoint(0, (0.0, 0.0, 0.0)), Waypoint(17, (length, 0.0, 0.0))),
        static_positions=positions,
        objects=(_followed_object(),), noise=_CORRIDOR_NOISE,
        fov=FovConfig(max_range=max_range, half_angle_deg=75.0),
        ratio_target=1.8)


def group2() -> SimConfig:
    length = 35 * 0.4
    positions, max_range = ring_corridor(length)
    return SimConfig(
        name="group2", n_frames=36, seed=0,
        waypoints=(Waypoint(0, (0.0, 0.0, 0.0)), Waypoint(35, (length, 0.0, 0.0))),
        static_positions=positions,
        objects=(_followed_object(),), noise=_CORRIDOR_NOISE,
        fov=FovConfig(max_range=max_range, half_angle_deg=75.0),
        ratio_target=1.8)


def default() -> SimConfig:
    """Small always-visible world: 10 static landmarks against 18 dynamic
    points, the 1:1.8 static-to-dynamic target exactly."""
    parts = []
    centers = ((5.4, 1.2, 0.6), (6.4, -1.2, -0.4), (7.4, 0.3, -0.8))
    steps = ((0.08, -0.02, 0.01), (0.07, 0.04, -0.01), (0.05, -0.02, 0.02))
    angles = (0.05, -0.04, 0.04)
    axes = ((0.0, 0.0, 1.0), (0.3, 1.0, 0.2), (1.0, 0.3, 0.5))
    for c, s, a, axis in zip(centers, steps, angles, axes):
        parts.append(PartSpec(twist=spin_drift_twist(c, s, axis, a),
                              n_points=6, center=c, extent=0.55))
    return SimConfig(
        name="default", n_frames=18, seed=0,
        waypoints=(Waypoint(0, (0.0, 0.0, 0.0)), Waypoint(17, (1.7, 0.0, 0.0))),
        n_static=10, static_extent=((4.0, 9.0), (-2.5, 2.5), (-2.0, 2.0)),
        objects=(ObjectSpec(tuple(parts)),), noise=_NOISE,
        fov=FovConfig(max_range=40.0, half_angle_deg=75.0),
        ratio_target=1.8)


def group3() -> SimConfig:
    """Longer run with a 90 degree left turn mid-sequence."""
    obj = ObjectSpec(tuple(
        PartSpec(twist=spin_drift_twist(c, s, axis, a), n_points=4,
                 center=c, extent=0.55)
        for c, s, axis, a in (
            ((5.5, 2.5, 0.5), (0.0, 0.04, 0.005), (0.0, 0.0, 1.0), 0.03),
            ((6.0, 4.0, -0.3), (-0.01, 0.03, -0.005), (0.2, 1.0, 0.3), -0.03),
            ((4.5, 4.5, -0.6), (0.01, 0.03, 0.005), (1.0, 0.2, 0.6), 0.025))))
    return SimConfig(
        name="group3", n_frames=54, seed=0,
        waypoints=(Waypoint(0, (0.0, 0.0, 0.0), 0.0),
                   Waypoint(20, (2.0, 0.0, 0.0), 0.0),
                   Waypoint(33, (3.0, 1.0, 0.0), 90.0),
                   Waypoint(53, (3.0, 3.0, 0.0), 90.0)),
        n_static=10, static_extent=((2.0, 8.0), (0.5, 9.0), (-2.0, 2.0)),
        objects=(obj,), noise=_NOISE,
        fov=FovConfig(max_range=40.0, half_angle_deg=85.0),
        ratio_target=1.8)


def group4() -> SimConfig:
    """Longest run: an S-shaped path with two opposite turns."""
    obj = ObjectSpec(tuple(
        PartSpec(twist=spin_drift_twist(c, s, axis, a), n_points=4,
                 center=c, extent=0.55)
        for c, s, axis, a in (
            ((6.0, 2.5, 0.5), (0.0, 0.03, 0.004), (0.0, 0.0, 1.0), 0.025),
            ((6.8, 4.0, -0.3), (-0.008, 0.025, -0.004), (0.2, 1.0, 0.3), -0.025),
            ((5.2, 4.3, -0.6), (0.008, 0.025, 0.004), (1.0, 0.2, 0.6), 0.02))))
    return SimConfig(
        name="group4", n_frames=72, seed=0,
        waypoints=(Waypoint(0, (0.0, 0.0, 0.0), 0.0),
                   Waypoint(20, (2.0, 0.0, 0.0), 0.0),
                   Waypoint(32, (3.0, 1.0, 0.0), 90.0),
                   Waypoint(46, (3.0, 3.0, 0.0), 90.0),
                   Waypoint(58, (4.0, 4.0, 0.0), 0.0),
                   Waypoint(71, (5.5, 4.0, 0.0), 0.0)),
        n_static=12, static_extent=((2.0, 10.0), (0.5, 9.0), (-2.0, 2.0)),
        objects=(obj,), noise=_NOISE,
        fov=FovConfig(max_range=40.0, half_angle_deg=85.0),
        ratio_target=1.8)


def human_14() -> SimConfig:
    """A 14-key-point walking figure grouped into five rigid parts.

    The joint coordinates are invented fixture data (standing figure, meters,
    5 m ahead of the camera start); every part shares one translation so the
    body stays coherent over the sequence.
    """
    walk = (0.0, 0.0, 0.0, 0.08, 0.01, 0.0)
    x = 5.0
    torso = PartSpec(twist=walk, shape=(
        (x, 0.00, 1.00), (x, 0.12, 0.95), (x, -0.12, 0.95), (x, 0.00, 1.50)))
    left_arm = PartSpec(twist=walk, shape=(
        (x, 0.22, 1.45), (x, 0.30, 1.15), (x, 0.33, 0.85)))
    right_arm = PartSpec(twist=walk, shape=(
        (x, -0.22, 1.45), (x, -0.30, 1.15), (x, -0.33, 0.85)))
    left_leg = PartSpec(twist=walk, shape=((x, 0.13, 0.55), (x, 0.14, 0.10)))
    right_leg = PartSpec(twist=walk, shape=((x, -0.13, 0.55), (x, -0.14, 0.10)))
    return SimConfig(
        name="human14", n_frames=18, seed=0,
        waypoints=(Waypoint(0, (0.0, -0.2, 1.0)), Waypoint(17, (1.7, -0.2, 1.0))),
        n_static=8, static_extent=((4.0, 9.0), (-2.5, 2.5), (-0.5, 2.5)),
        objects=(ObjectSpec((torso, left_arm, right_arm, left_leg, right_leg)),),
        noise=_NOISE, fov=FovConfig(max_range=40.0, half_angle_deg=75.0),
        ratio_target=1.8)


_PRESETS = {
    "default": default,
    "group1": group1,
    "group2": group2,
    "group3": group3,
    "group4": group4,
    "human14": human_14,
}

PRESET_NAMES = tuple(sorted(_PRESETS))


def get_preset(name: str) -> SimConfig:
    try:
        return _PRESETS[name]()
    except KeyError:
        raise KeyError(f"unknown preset '{name}'; available: "
                       + ", ".join(PRESET_NAMES)) from None
