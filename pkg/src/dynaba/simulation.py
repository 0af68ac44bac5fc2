"""Seeded simulation of a camera moving past rigid articulated objects.

The world contains static landmarks and objects made of rigid parts.  Each
part is a small point cloud that moves by one constant per-frame transform,
so pairwise distances inside a part never change.  A finite field of view
(range plus cone half-angle around the camera +x axis) selects which points
produce measurements; measurements are the true camera-frame point plus iid
Gaussian noise.

Randomness is split into independent streams keyed by entity so that, for
example, adding a landmark never changes the draws of existing ones.  Stream
spawn keys: (0, i) static position, (1, l, r) part cloud, (2, i, k) static
measurement noise, (3, l, r, i, k) dynamic measurement noise, (4, k) pose
initialization noise, (5,) outlier injection.
"""

from __future__ import annotations

import dataclasses
import enum
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
import yaml
from numpy.random import SeedSequence, default_rng

from . import factor_graph as fg
from . import geometry as geo
from . import metrics
from .factor_graph import FactorGraph, Values
from .geometry import Pose, Rotation
from .solver import SolverConfig, solve

_MIN_SIGMA = 1e-6  # covariance floor so noiseless runs stay well conditioned
_MIN_SEPARATION = 1e-6

M_TO_CM = 100.0  # the single SI -> report-unit conversion site


class AblationMode(enum.Enum):
    BEFORE_BA = "BeforeBA"
    STATIC_ONLY = "StaticOnly"
    NO_MOTION = "NoMotion"
    NO_RIGIDITY = "NoRigidity"
    FULL = "Full"


_DYNAMIC_MODES = (AblationMode.NO_MOTION, AblationMode.NO_RIGIDITY, AblationMode.FULL)
_MOTION_MODES = (AblationMode.NO_RIGIDITY, AblationMode.FULL)
_RIGIDITY_MODES = (AblationMode.NO_MOTION, AblationMode.FULL)


@dataclass(frozen=True)
class Waypoint:
    """Camera position and planar heading (yaw about +z) pinned to a frame."""

    frame: int
    position: tuple
    yaw_deg: float = 0.0

    def __post_init__(self):
        pos = tuple(float(c) for c in self.position)
        if len(pos) != 3 or not all(math.isfinite(c) for c in pos):
            raise ValueError("waypoint position must be a finite 3-vector")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "frame", int(self.frame))
        object.__setattr__(self, "yaw_deg", float(self.yaw_deg))
        if self.frame < 0:
            raise ValueError("waypoint frame must be non-negative")


@dataclass(frozen=True)
class NoiseConfig:
    init_translation_sigma: float = 0.05
    init_rotation_sigma_deg: float = 2.9
    measurement_sigma: float = 0.05

    def __post_init__(self):
        for name in ("init_translation_sigma", "init_rotation_sigma_deg",
                     "measurement_sigma"):
            v = float(getattr(self, name))
            if not (math.isfinite(v) and v >= 0.0):
                raise ValueError(f"noise.{name} must be >= 0")
            object.__setattr__(self, name, v)

    @property
    def exact(self) -> bool:
        return (self.init_translation_sigma == 0.0
                and self.init_rotation_sigma_deg == 0.0
                and self.measurement_sigma == 0.0)


@dataclass(frozen=True)
class FovConfig:
    """Sensing volume: range cut plus a cone half-angle around camera +x."""

    max_range: float = math.inf
    half_angle_deg: float = 180.0

    def __post_init__(self):
        object.__setattr__(self, "max_range", float(self.max_range))
        object.__setattr__(self, "half_angle_deg", float(self.half_angle_deg))
        if not self.max_range > 0.0:
            raise ValueError("fov.max_range must be positive")
        if not 0.0 < self.half_angle_deg <= 180.0:
            raise ValueError("fov.half_angle_deg must be in (0, 180]")


@dataclass(frozen=True)
class PartSpec:
    """One rigid part: either an explicit point cloud or a seeded random one.

    ``twist`` is the constant per-frame motion, applied in the world frame.
    """

    twist: tuple
    shape: tuple | None = None
    n_points: int | None = None
    center: tuple | None = None
    extent: float | None = None

    def __post_init__(self):
        tw = tuple(float(c) for c in self.twist)
        if len(tw) != 6 or not all(math.isfinite(c) for c in tw):
            raise ValueError("part twist must be a finite 6-vector")
        object.__setattr__(self, "twist", tw)
        if self.shape is not None:
            if self.n_points is not None or self.center is not None \
                    or self.extent is not None:
                raise ValueError("give either an explicit shape or "
                                 "(points, center, extent), not both")
            pts = tuple(tuple(float(c) for c in p) for p in self.shape)
            if not pts or any(len(p) != 3 for p in pts):
                raise ValueError("part shape must be a non-empty list of 3-vectors")
            _check_separation(np.array(pts), "part shape")
            object.__setattr__(self, "shape", pts)
        else:
            if self.n_points is None or self.center is None or self.extent is None:
                raise ValueError("random part needs points, center, and extent")
            n = int(self.n_points)
            if n < 1:
                raise ValueError("part point count must be positive")
            ctr = tuple(float(c) for c in self.center)
            if len(ctr) != 3:
                raise ValueError("part center must be a 3-vector")
            ext = float(self.extent)
            if not ext > 0.0:
                raise ValueError("part extent must be positive")
            object.__setattr__(self, "n_points", n)
            object.__setattr__(self, "center", ctr)
            object.__setattr__(self, "extent", ext)

    @property
    def count(self) -> int:
        return len(self.shape) if self.shape is not None else self.n_points


def _check_separation(points: np.ndarray, what: str) -> None:
    n = len(points)
    for a in range(n):
        for b in range(a + 1, n):
            if np.linalg.norm(points[a] - points[b]) <= _MIN_SEPARATION:
                raise ValueError(f"{what}: points {a} and {b} closer than "
                                 f"{_MIN_SEPARATION}")


@dataclass(frozen=True)
class ObjectSpec:
    parts: tuple

    def __post_init__(self):
        parts = tuple(self.parts)
        if not parts or not all(isinstance(p, PartSpec) for p in parts):
            raise ValueError("object needs at least one PartSpec")
        object.__setattr__(self, "parts", parts)

    @property
    def total_points(self) -> int:
        return sum(p.count for p in self.parts)


@dataclass(frozen=True)
class SimConfig:
    name: str = "default"
    n_frames: int = 18
    seed: int = 0
    waypoints: tuple = (Waypoint(0, (0.0, 0.0, 0.0)), Waypoint(17, (1.7, 0.0, 0.0)))
    n_static: int = 10
    static_extent: tuple = ((4.0, 9.0), (-2.5, 2.5), (-2.0, 2.0))
    static_positions: tuple | None = None  # explicit layout, overrides count
    objects: tuple = ()
    noise: NoiseConfig = NoiseConfig()
    fov: FovConfig = FovConfig()
    ratio_target: float = 1.8
    rigidity_topology: str = "spanning"

    def __post_init__(self):
        if int(self.n_frames) < 2:
            raise ValueError("n_frames must be at least 2")
        object.__setattr__(self, "n_frames", int(self.n_frames))
        object.__setattr__(self, "seed", int(self.seed))
        if int(self.n_static) < 1:
            raise ValueError("n_static must be positive")
        object.__setattr__(self, "n_static", int(self.n_static))
        wps = tuple(self.waypoints)
        if not wps or not all(isinstance(w, Waypoint) for w in wps):
            raise ValueError("waypoints must be a non-empty Waypoint list")
        frames = [w.frame for w in wps]
        if frames != sorted(set(frames)):
            raise ValueError("waypoint frames must be strictly increasing")
        if frames[0] != 0 or frames[-1] != self.n_frames - 1:
            raise ValueError("waypoints must span frames 0 .. n_frames-1")
        object.__setattr__(self, "waypoints", wps)
        ext = tuple(tuple(float(c) for c in pair) for pair in self.static_extent)
        if len(ext) != 3 or any(len(p) != 2 or not p[0] < p[1] for p in ext):
            raise ValueError("static_extent must be three (lo, hi) pairs with lo < hi")
        object.__setattr__(self, "static_extent", ext)
        if self.static_positions is not None:
            pts = tuple(tuple(float(c) for c in p) for p in self.static_positions)
            if not pts or any(len(p) != 3 or not all(math.isfinite(c) for c in p)
                              for p in pts):
                raise ValueError("static_positions must be finite 3-vectors")
            object.__setattr__(self, "static_positions", pts)
            object.__setattr__(self, "n_static", len(pts))
        objs = tuple(self.objects)
        if not all(isinstance(o, ObjectSpec) for o in objs):
            raise ValueError("objects must be ObjectSpec instances")
        object.__setattr__(self, "objects", objs)
        if not isinstance(self.noise, NoiseConfig) or not isinstance(self.fov, FovConfig):
            raise ValueError("noise/fov must be NoiseConfig/FovConfig instances")
        if not float(self.ratio_target) > 0.0:
            raise ValueError("ratio_target must be positive")
        object.__setattr__(self, "ratio_target", float(self.ratio_target))
        if self.rigidity_topology not in ("spanning", "clique"):
            raise ValueError("rigidity_topology must be 'spanning' or 'clique'")

    def n_dynamic_points(self) -> int:
        return sum(o.total_points for o in self.objects)

    def landmark_ratio(self) -> float:
        """Dynamic-to-static landmark count ratio (targets ratio_target)."""
        return self.n_dynamic_points() / self.n_static


def segment_pairs_for(n_points: int, topology: str) -> tuple:
    """Constrained index pairs inside one part: a chain closed by one cross
    pair, or every pair when topology is 'clique'."""
    if n_points < 2:
        return ()
    if topology == "clique":
        return tuple((a, b) for a in range(n_points) for b in range(a + 1, n_points))
    pairs = [(a, a + 1) for a in range(n_points - 1)]
    if n_points >= 3:
        pairs.append((0, n_points - 1))
    return tuple(pairs)


@dataclass(eq=False)
class GroundTruth:
    """True world state: poses, points, per-part motions, segment lengths."""

    camera_poses: tuple
    static_points: np.ndarray
    dynamic_points: dict  # (l, r) -> array (n_frames, n_pts, 3)
    motions: dict         # (l, r) -> Pose, the constant per-frame transform
    segment_pairs: dict   # (l, r) -> tuple of (i, j)
    segment_lengths: dict  # (l, r, i, j) -> float, from frame-0 geometry

    def trajectory(self) -> metrics.Trajectory:
        return metrics.Trajectory(tuple(range(len(self.camera_poses))),
                                  self.camera_poses)

    def tracks(self) -> dict:
        out = {}
        for (l, r), pts in self.dynamic_points.items():
            for k in range(pts.shape[0]):
                for i in range(pts.shape[1]):
                    out[(l, r, i, k)] = pts[k, i]
        return out


@dataclass(eq=False)
class SimDataset:
    """Per-frame camera-frame measurements plus visibility bookkeeping."""

    config: SimConfig
    measurements: tuple  # per frame: tuple of (VariableId, measured 3-vector)
    static_visible: np.ndarray          # (n_frames, n_static) bool
    dynamic_visible: dict               # (l, r) -> (n_frames, n_pts) bool
    warnings: tuple

    def measurement_count(self) -> int:
        return sum(len(row) for row in self.measurements)


def _camera_path(config: SimConfig) -> tuple:
    wps = config.waypoints
    poses = []
    for k in range(config.n_frames):
        seg = 0
        while seg + 1 < len(wps) and wps[seg + 1].frame < k:
            seg += 1
        if seg + 1 == len(wps):
            a = b = wps[seg]
            u = 0.0
        else:
            a, b = wps[seg], wps[seg + 1]
            u = (k - a.frame) / (b.frame - a.frame)
        pos = (1.0 - u) * np.array(a.position) + u * np.array(b.position)
        yaw = math.radians((1.0 - u) * a.yaw_deg + u * b.yaw_deg)
        poses.append(Pose(Rotation.exp([0.0, 0.0, yaw]), pos))
    return tuple(poses)


def _stream(seed: int, *key) -> np.random.Generator:
    return default_rng(SeedSequence(seed, spawn_key=key))


def _in_fov(p_cam: np.ndarray, fov: FovConfig) -> bool:
    dist = float(np.linalg.norm(p_cam))
    if dist > fov.max_range:
        return False
    if fov.half_angle_deg >= 180.0 or dist == 0.0:
        return True
    return p_cam[0] >= dist * math.cos(math.radians(fov.half_angle_deg))


def generate(config: SimConfig) -> tuple:
    """Build the true world and its measured dataset; returns (gt, dataset).

    Deterministic in config.seed.  Dynamic points at frame k+1 are computed
    by applying the part transform to the frame-k points with the same
    routine the motion residual uses, so ground truth satisfies the motion
    model bitwise.
    """
    seed = config.seed
    poses = _camera_path(config)
    if config.static_positions is not None:
        statics = np.array(config.static_positions)
    else:
        lows = np.array([pair[0] for pair in config.static_extent])
        highs = np.array([pair[1] for pair in config.static_extent])
        statics = np.array([_stream(seed, 0, i).uniform(lows, highs)
                            for i in range(config.n_static)])
    # rigid parts: frame-0 clouds, then exact transport
    dynamic, motions, seg_pairs, seg_lengths = {}, {}, {}, {}
    for l, obj in enumerate(config.objects):
        for r, part in enumerate(obj.parts):
            if part.shape is not None:
                cloud = np.array(part.shape)
            else:
                rng = _stream(seed, 1, l, r)
                ctr = np.array(part.center)
                cloud = ctr + rng.uniform(-part.extent, part.extent,
                                          size=(part.n_points, 3))
                _check_separation(cloud, f"object {l} part {r}")
            motion = geo.exp(np.array(part.twist))
            pts = np.empty((config.n_frames, len(cloud), 3))
            pts[0] = cloud
            for k in range(config.n_frames - 1):
                for i in range(len(cloud)):
                    pts[k + 1, i] = geo.act(motion, pts[k, i])
            dynamic[(l, r)] = pts
            motions[(l, r)] = motion
            pairs = segment_pairs_for(len(cloud), config.rigidity_topology)
            seg_pairs[(l, r)] = pairs
            for (i, j) in pairs:
                seg_lengths[(l, r, i, j)] = float(
                    np.linalg.norm(cloud[i] - cloud[j]))
    gt = GroundTruth(poses, statics, dynamic, motions, seg_pairs, seg_lengths)

    sigma = config.noise.measurement_sigma
    measurements, warnings = [], []
    static_visible = np.zeros((config.n_frames, config.n_static), dtype=bool)
    dynamic_visible = {key: np.zeros((config.n_frames, pts.shape[1]), dtype=bool)
                       for key, pts in dynamic.items()}
    for k, pose in enumerate(poses):
        inv = geo.inverse(pose)
        row = []
        for i in range(config.n_static):
            pc = geo.act(inv, statics[i])
            if _in_fov(pc, config.fov):
                static_visible[k, i] = True
                if sigma > 0.0:
                    pc = pc + sigma * _stream(seed, 2, i, k).normal(size=3)
                row.append((fg.static_point(i), pc))
        if not static_visible[k].any():
            warnings.append(f"frame {k}: no visible static landmarks")
        for (l, r), pts in dynamic.items():
            for i in range(pts.shape[1]):
                pc = geo.act(inv, pts[k, i])
                if _in_fov(pc, config.fov):
                    dynamic_visible[(l, r)][k, i] = True
                    if sigma > 0.0:
                        pc = pc + sigma * _stream(seed, 3, l, r, i, k).normal(size=3)
                    row.append((fg.dynamic_point(l, r, i, k), pc))
        measurements.append(tuple(row))
    dataset = SimDataset(config, tuple(measurements), static_visible,
                         dynamic_visible, tuple(warnings))
    return gt, dataset


def ground_truth_values(gt: GroundTruth) -> Values:
    """True state as a Values map (motions per frame pair, all constant)."""
    vals = Values()
    n = len(gt.camera_poses)
    for k, pose in enumerate(gt.camera_poses):
        vals.set(fg.camera(k), pose)
    for i in range(len(gt.static_points)):
        vals.set(fg.static_point(i), gt.static_points[i])
    for (l, r), pts in gt.dynamic_points.items():
        for k in range(n):
            for i in range(pts.shape[1]):
                vals.set(fg.dynamic_point(l, r, i, k), pts[k, i])
        for k in range(n - 1):
            vals.set(fg.object_motion(l, r, k), gt.motions[(l, r)])
    for (l, r, i, j), s in gt.segment_lengths.items():
        vals.set(fg.segment_length(l, r, i, j), s)
    return vals


def initialization_noise_twists(config: SimConfig, n: int) -> np.ndarray:
    """Per-frame pose noise twists [rot, trans]; row 0 is drawn but unused
    (the first pose anchors the gauge)."""
    sig_r = math.radians(config.noise.init_rotation_sigma_deg)
    sig_t = config.noise.init_translation_sigma
    out = np.empty((n, 6))
    for k in range(n):
        rng = _stream(config.seed, 4, k)
        out[k, :3] = sig_r * rng.normal(size=3)
        out[k, 3:] = sig_t * rng.normal(size=3)
    return out


def perturb_initialization(gt: GroundTruth, config: SimConfig,
                           dataset: SimDataset | None = None) -> Values:
    """Noisy starting state: odometry-style pose walk, points back-projected
    from their first measurement, segments from first-frame point estimates,
    motions identity.

    The dataset is regenerated from the config when not supplied (generation
    is deterministic, so the result is identical either way).
    """
    if dataset is None:
        _, dataset = generate(config)
    noise = config.noise
    vals = Values()
    n = config.n_frames

    if noise.init_translation_sigma == 0.0 and noise.init_rotation_sigma_deg == 0.0:
        init_poses = list(gt.camera_poses)
    else:
        twists = initialization_noise_twists(config, n)
        init_poses = [gt.camera_poses[0]]
        for k in range(1, n):
            rel = geo.compose(geo.inverse(gt.camera_poses[k - 1]),
                              gt.camera_poses[k])
            step = geo.compose(rel, geo.exp(twists[k]))
            init_poses.append(geo.compose(init_poses[-1], step))
    for k, pose in enumerate(init_poses):
        vals.set(fg.camera(k), pose)

    if noise.exact:
        # the noiseless limit reproduces the generating state bitwise
        # (motions stay identity: that part of the contract is unconditional)
        for i in range(len(gt.static_points)):
            vals.set(fg.static_point(i), gt.static_points[i])
        for (l, r), pts in gt.dynamic_points.items():
            for k in range(n):
                for i in range(pts.shape[1]):
                    vals.set(fg.dynamic_point(l, r, i, k), pts[k, i])
        for (l, r, i, j), s in gt.segment_lengths.items():
            vals.set(fg.segment_length(l, r, i, j), s)
    else:
        first_static, dyn_meas = {}, {}
        for k, row in enumerate(dataset.measurements):
            for vid, z in row:
                if vid.kind == fg.VarKind.STATIC_POINT:
                    first_static.setdefault(vid, (k, z))
                else:
                    l, r, i, frame = vid.index
                    dyn_meas.setdefault((l, r, i), []).append((frame, z))
        for vid, (k, z) in first_static.items():
            vals.set(vid, geo.act(init_poses[k], z))
        for (l, r, i), obs in dyn_meas.items():
            by_frame = dict(obs)
            lo, hi = min(by_frame), max(by_frame)
            prev = None
            for k in range(lo, hi + 1):
                if k in by_frame:
                    prev = geo.act(init_poses[k], by_frame[k])
                # identity motion init carries the estimate across gaps
                vals.set(fg.dynamic_point(l, r, i, k), prev)
        for (l, r), pairs in gt.segment_pairs.items():
            for (i, j) in pairs:
                for k in range(n):
                    a, b = fg.dynamic_point(l, r, i, k), fg.dynamic_point(l, r, j, k)
                    if a in vals and b in vals:
                        vals.set(fg.segment_length(l, r, i, j),
                                 float(np.linalg.norm(vals.get(a) - vals.get(b))))
                        break

    for (l, r) in gt.dynamic_points:
        for k in range(n - 1):
            vals.set(fg.object_motion(l, r, k), Pose.identity())
    return vals


def _grouped_measurements(dataset: SimDataset) -> tuple:
    static_meas, dyn_meas = {}, {}
    for k, row in enumerate(dataset.measurements):
        for vid, z in row:
            if vid.kind == fg.VarKind.STATIC_POINT:
                static_meas.setdefault(vid.index[0], []).append((k, z))
            else:
                l, r, i, frame = vid.index
                dyn_meas.setdefault((l, r, i), []).append((frame, z))
    return static_meas, dyn_meas


def build_graph(dataset: SimDataset, init: Values, mode: AblationMode) -> FactorGraph:
    """Assemble the optimization problem for one ablation mode.

    StaticOnly keeps static observations only; NoMotion adds dynamic
    observations and rigidity; NoRigidity adds dynamic observations and
    motion; Full uses everything.  The first camera is held to fix the
    gauge.  BeforeBA has no graph: score the initialization directly.
    """
    if mode == AblationMode.BEFORE_BA:
        raise ValueError("BeforeBA evaluates the initialization; there is "
                         "no graph to build")
    config = dataset.config
    if mode in _DYNAMIC_MODES and not config.objects:
        raise ValueError(f"mode {mode.value} needs dynamic objects, "
                         "but the dataset has none")
    sig = max(config.noise.measurement_sigma, _MIN_SIGMA)
    cov_obs = sig * sig * np.eye(3)
    cov_rig = 2.0 * sig * sig
    cov_mot = 2.0 * sig * sig * np.eye(3)

    static_meas, dyn_meas = _grouped_measurements(dataset)
    graph = FactorGraph()
    for k in range(config.n_frames):
        graph.add_variable(fg.camera(k))
    graph.hold_constant(fg.camera(0))
    for i in sorted(static_meas):
        graph.add_variable(fg.static_point(i))

    declared = {}  # (l, r, i) -> sorted declared frames
    if mode in _DYNAMIC_MODES:
        for (l, r, i) in sorted(dyn_meas):
            ks = sorted(k for k, _ in dyn_meas[(l, r, i)])
            if mode in _MOTION_MODES:
                frames = list(range(ks[0], ks[-1] + 1))
            else:
                frames = ks
            declared[(l, r, i)] = frames
            for k in frames:
                graph.add_variable(fg.dynamic_point(l, r, i, k))

    rigidity_plan = []
    if mode in _RIGIDITY_MODES:
        for (l, r) in sorted({key[:2] for key in declared}):
            n_pts = max(i for (ll, rr, i) in declared if (ll, rr) == (l, r)) + 1
            for (i, j) in segment_pairs_for(n_pts, config.rigidity_topology):
                frames = sorted(set(declared.get((l, r, i), ()))
                                & set(declared.get((l, r, j), ())))
                if frames:
                    graph.add_variable(fg.segment_length(l, r, i, j))
                    rigidity_plan.append((l, r, i, j, frames))

    motion_plan = []
    if mode in _MOTION_MODES:
        used = set()
        for (l, r, i), frames in sorted(declared.items()):
            steps = [k for k in frames[:-1] if k + 1 in frames]
            motion_plan.append((l, r, i, steps))
            for k in steps:
                if (l, r, k) not in used:
                    used.add((l, r, k))
                    graph.add_variable(fg.object_motion(l, r, k))

    for k, row in enumerate(dataset.measurements):
        for vid, z in row:
            if vid.kind == fg.VarKind.STATIC_POINT or vid in graph.variables:
                graph.add_factor(fg.ObservationFactor(fg.camera(k), vid, z, cov_obs))
    for (l, r, i, j, frames) in rigidity_plan:
        seg = fg.segment_length(l, r, i, j)
        for k in frames:
            graph.add_factor(fg.RigidityFactor(
                fg.dynamic_point(l, r, i, k), fg.dynamic_point(l, r, j, k),
                seg, cov_rig))
    for (l, r, i, steps) in motion_plan:
        for k in steps:
            graph.add_factor(fg.MotionFactor(
                fg.dynamic_point(l, r, i, k), fg.dynamic_point(l, r, i, k + 1),
                fg.object_motion(l, r, k), cov_mot))
    graph.check_values(init)
    return graph


def build_reprojection_graph(dataset: SimDataset, init: Values) -> FactorGraph:
    """Observation factors only (no rigidity, no motion): the per-iteration
    timing baseline.  Dynamic points appear only at their measured frames."""
    config = dataset.config
    sig = max(config.noise.measurement_sigma, _MIN_SIGMA)
    cov_obs = sig * sig * np.eye(3)
    graph = FactorGraph()
    for k in range(config.n_frames):
        graph.add_variable(fg.camera(k))
    graph.hold_constant(fg.camera(0))
    seen = set()
    for k, row in enumerate(dataset.measurements):
        for vid, _ in row:
            if vid not in seen:
                seen.add(vid)
                graph.add_variable(vid)
    for k, row in enumerate(dataset.measurements):
        for vid, z in row:
            graph.add_factor(fg.ObservationFactor(fg.camera(k), vid, z, cov_obs))
    return graph


def trajectory_from_values(values: Values) -> metrics.Trajectory:
    frames, poses = [], []
    for vid, value in sorted(values.items(), key=lambda kv: kv[0].index):
        if vid.kind == fg.VarKind.CAMERA_POSE:
            frames.append(vid.index[0])
            poses.append(value)
    if not frames:
        raise ValueError("values contain no camera poses")
    return metrics.Trajectory(tuple(frames), tuple(poses))


def tracks_from_values(values: Values) -> dict:
    return {vid.index: value for vid, value in values.items()
            if vid.kind == fg.VarKind.DYNAMIC_POINT}


# ---------------------------------------------------------------------------
# outlier injection (for the pruning experiment)

def inject_motion_outliers(graph: FactorGraph, fraction: float,
                           magnitude: float, seed: int = 0) -> tuple:
    """Corrupt a random fraction of motion factors with a gross bias.

    Each chosen factor gets a constant offset of the given magnitude in a
    random direction, the signature of a wrong between-frame track
    association.  Returns (corrupted graph, set of corrupted factor
    indices); factor indices are preserved, the input graph is untouched.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    slots = [idx for idx, f in enumerate(graph.factors)
             if isinstance(f, fg.MotionFactor)]
    if not slots:
        raise ValueError("graph has no motion factors to corrupt")
    n_corrupt = max(1, round(fraction * len(slots)))
    rng = _stream(seed, 5)
    chosen = {slots[i] for i in rng.choice(len(slots), size=n_corrupt,
                                           replace=False)}
    corrupted = fg.FactorGraph()
    for vid in graph.variables:
        corrupted.add_variable(vid)
    for idx, f in enumerate(graph.factors):
        if idx in chosen:
            d = rng.normal(size=3)
            f = dataclasses.replace(f, bias=magnitude * d / np.linalg.norm(d))
        corrupted.add_factor(f)
    for vid in graph.held:
        corrupted.hold_constant(vid)
    return corrupted, chosen


# ---------------------------------------------------------------------------
# ablation driver

@dataclass(eq=False)
class AblationCell:
    group: str
    mode: str
    seed: int
    status: str
    ate_m: float
    rpe_rot_deg: float
    rpe_trans_m: float
    dynamic_ate_m: float | None
    iterations: int
    solve_seconds: float

    @property
    def failed(self) -> bool:
        return self.status == "Degenerate"


REPROJECTION_LABEL = "Reprojection"


def run_single_cell(config: SimConfig, mode: AblationMode, seed: int,
                    solver_config: SolverConfig | None = None) -> AblationCell:
    """One (mode, seed) experiment: generate, perturb, solve, score."""
    cfg = dataclasses.replace(config, seed=seed)
    gt, dataset = generate(cfg)
    init = perturb_initialization(gt, cfg, dataset)
    if mode == AblationMode.BEFORE_BA:
        est, status, iterations, seconds = init, "Initialization", 0, 0.0
        est_tracks = tracks_from_values(init)
    else:
        graph = build_graph(dataset, init, mode)
        t0 = time.perf_counter()
        est, report = solve(graph, init, solver_config)
        seconds = time.perf_counter() - t0
        status, iterations = report.status.value, len(report.iterations)
        # solve leaves non-graph values untouched; only report what this
        # mode actually estimated
        est_tracks = {vid.index: est.get(vid) for vid in graph.variables
                      if vid.kind == fg.VarKind.DYNAMIC_POINT}
    return _scored_cell(cfg, gt, est, est_tracks, mode.value, status,
                        iterations, seconds)


def run_reprojection_cell(config: SimConfig, seed: int,
                          solver_config: SolverConfig | None = None
                          ) -> AblationCell:
    """Timing-baseline experiment: observation factors only, dynamic points
    free per frame, same solver and scoring as the ablation cells."""
    cfg = dataclasses.replace(config, seed=seed)
    gt, dataset = generate(cfg)
    init = perturb_initialization(gt, cfg, dataset)
    graph = build_reprojection_graph(dataset, init)
    t0 = time.perf_counter()
    est, report = solve(graph, init, solver_config)
    seconds = time.perf_counter() - t0
    est_tracks = {vid.index: est.get(vid) for vid in graph.variables
                  if vid.kind == fg.VarKind.DYNAMIC_POINT}
    return _scored_cell(cfg, gt, est, est_tracks, REPROJECTION_LABEL,
                        report.status.value, len(report.iterations), seconds)


def _scored_cell(cfg, gt, est, est_tracks, label, status, iterations,
                 seconds) -> AblationCell:
    gt_traj = gt.trajectory()
    est_traj = trajectory_from_values(est)
    ate_m = metrics.ate(est_traj, gt_traj)
    rpe_rot, rpe_trans = metrics.rpe(est_traj, gt_traj)
    dyn = None
    if est_tracks:
        dyn = metrics.dynamic_point_ate(est_tracks, gt.tracks(),
                                        metrics.align(est_traj, gt_traj))
    return AblationCell(cfg.name, label, cfg.seed, status, ate_m,
                        rpe_rot, rpe_trans, dyn, iterations, seconds)


def _cell_from_args(args) -> AblationCell:
    config, mode, seed, solver_config = args
    if mode == REPROJECTION_LABEL:
        return run_reprojection_cell(config, seed, solver_config)
    return run_single_cell(config, mode, seed, solver_config)


@dataclass(eq=False)
class AblationResult:
    group: str
    modes: tuple   # AblationMode members, row order
    seeds: tuple
    cells: list
    baseline_cells: list = dataclasses.field(default_factory=list)

    def cells_for(self, mode: AblationMode) -> list:
        return [c for c in self.cells if c.mode == mode.value]

    @property
    def n_failed(self) -> int:
        return sum(1 for c in self.cells if c.failed)

    def summary(self, mode: AblationMode) -> dict:
        """Mean/std (SI units) over non-failed cells of one mode."""
        cells = self.cells_for(mode)
        ok = [c for c in cells if not c.failed]
        out = {"n_seeds": len(cells), "n_failed": len(cells) - len(ok)}
        for field, key in (("ate_m", "ate_m"), ("rpe_rot_deg", "rpe_rot_deg"),
                           ("rpe_trans_m", "rpe_trans_m"),
                           ("dynamic_ate_m", "dyn_ate_m")):
            vals = [getattr(c, field) for c in ok
                    if getattr(c, field) is not None]
            if vals:
                arr = np.array(vals)
                std = float(np.std(arr, ddof=1)) if len(arr) > 1 else 0.0
                out[key + "_mean"], out[key + "_std"] = float(np.mean(arr)), std
            else:
                out[key + "_mean"] = out[key + "_std"] = None
        return out


def run_ablation(config: SimConfig, modes, seeds,
                 solver_config: SolverConfig | None = None,
                 workers: int = 1,
                 timing_baseline: bool = False) -> AblationResult:
    """Grid of (mode, seed) cells; each cell is pure given its arguments, so
    results are identical for any worker count.  Cells are assembled in
    mode-major order.  With ``timing_baseline`` an extra observation-only
    solve per seed feeds the timing table's baseline row; it never touches
    the results table."""
    modes = tuple(AblationMode(m) if not isinstance(m, AblationMode) else m
                  for m in modes)
    if isinstance(seeds, int):
        seeds = range(seeds)
    seeds = tuple(int(s) for s in seeds)
    if not modes or not seeds:
        raise ValueError("need at least one mode and one seed")
    args = [(config, mode, seed, solver_config)
            for mode in modes for seed in seeds]
    n_grid = len(args)
    if timing_baseline:
        args += [(config, REPROJECTION_LABEL, seed, solver_config)
                 for seed in seeds]
    if workers <= 1:
        cells = [_cell_from_args(a) for a in args]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_cell_from_args, args))
    return AblationResult(config.name, modes, seeds, cells[:n_grid],
                          cells[n_grid:])


def _fmt(x) -> str:
    return "" if x is None else format(float(x), ".9g")


ABLATION_CSV_HEADER = ("group,mode,seeds,failed,ate_cm_mean,ate_cm_std,"
                       "rpe_rot_deg_mean,rpe_rot_deg_std,rpe_trans_cm_mean,"
                       "rpe_trans_cm_std,dyn_ate_cm_mean,dyn_ate_cm_std")

TIMING_CSV_HEADER = "group,mode,cells,solve_ms_mean,ms_per_iteration_mean"


def ablation_to_csv(result: AblationResult) -> str:
    """Result table with lengths in centimeters, rotations in degrees."""
    lines = [ABLATION_CSV_HEADER]
    for mode in result.modes:
        s = result.summary(mode)
        cm = [None if s[k] is None else s[k] * M_TO_CM
              for k in ("ate_m_mean", "ate_m_std")]
        trans_cm = [None if s[k] is None else s[k] * M_TO_CM
                    for k in ("rpe_trans_m_mean", "rpe_trans_m_std")]
        dyn_cm = [None if s[k] is None else s[k] * M_TO_CM
                  for k in ("dyn_ate_m_mean", "dyn_ate_m_std")]
        lines.append(",".join([
            result.group, mode.value, str(s["n_seeds"]), str(s["n_failed"]),
            _fmt(cm[0]), _fmt(cm[1]),
            _fmt(s["rpe_rot_deg_mean"]), _fmt(s["rpe_rot_deg_std"]),
            _fmt(trans_cm[0]), _fmt(trans_cm[1]),
            _fmt(dyn_cm[0]), _fmt(dyn_cm[1])]))
    return "\n".join(lines) + "\n"


def ablation_timing_csv(result: AblationResult) -> str:
    """Wall-clock summary (not deterministic, kept out of the results CSV).

    The baseline row, present when the sweep ran with a timing baseline,
    is the observation-only problem solved by the same machinery; comparing
    its per-iteration time against the Full row shows the overhead of the
    rigidity and motion structure.
    """
    lines = [TIMING_CSV_HEADER]
    groups = [(REPROJECTION_LABEL,
               [c for c in result.baseline_cells if not c.failed])]
    groups += [(mode.value,
                [c for c in result.cells_for(mode) if not c.failed])
               for mode in result.modes if mode != AblationMode.BEFORE_BA]
    for label, cells in groups:
        if not cells:
            continue
        total_s = sum(c.solve_seconds for c in cells)
        total_it = sum(c.iterations for c in cells)
        per_iter = 1e3 * total_s / total_it if total_it else 0.0
        lines.append(",".join([
            result.group, label, str(len(cells)),
            _fmt(1e3 * total_s / len(cells)), _fmt(per_iter)]))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# config file format

def _require(section: dict, where: str, *keys):
    for key in keys:
        if key not in section:
            raise ValueError(f"config: '{where}.{key}' is required"
                             if where else f"config: '{key}' is required")


def _reject_unknown(section: dict, where: str, allowed) -> None:
    for key in section:
        if key not in allowed:
            raise ValueError(f"config: unknown key '{key}'"
                             + (f" in '{where}'" if where else ""))


def config_from_yaml(text: str) -> SimConfig:
    """Parse a simulation config; unknown or missing keys are errors."""
    raw = yaml.safe_load(text)
    if not isinstance(raw, dict):
        raise ValueError("config: top level must be a mapping")
    _reject_unknown(raw, "", {"name", "n_frames", "seed", "camera_path",
                              "static", "objects", "noise", "fov",
                              "ratio_target", "rigidity_topology"})
    _require(raw, "", "n_frames", "camera_path", "static", "noise", "fov")

    waypoints = []
    for idx, wp in enumerate(raw["camera_path"]):
        _reject_unknown(wp, f"camera_path[{idx}]", {"frame", "position", "yaw_deg"})
        _require(wp, f"camera_path[{idx}]", "frame", "position")
        waypoints.append(Waypoint(wp["frame"], tuple(wp["position"]),
                                  wp.get("yaw_deg", 0.0)))

    static = raw["static"]
    _reject_unknown(static, "static", {"count", "extent", "positions"})
    static_positions = None
    if "positions" in static:
        if "count" in static or "extent" in static:
            raise ValueError("config: 'static.positions' excludes count/extent")
        static_positions = tuple(tuple(p) for p in static["positions"])
    else:
        _require(static, "static", "count", "extent")

    noise = raw["noise"]
    _reject_unknown(noise, "noise", {"init_translation_sigma",
                                     "init_rotation_sigma_deg",
                                     "measurement_sigma"})
    _require(noise, "noise", "init_translation_sigma",
             "init_rotation_sigma_deg", "measurement_sigma")

    fov = raw["fov"]
    _reject_unknown(fov, "fov", {"max_range", "half_angle_deg"})
    _require(fov, "fov", "max_range", "half_angle_deg")

    objects = []
    for l, obj in enumerate(raw.get("objects") or ()):
        _reject_unknown(obj, f"objects[{l}]", {"parts"})
        _require(obj, f"objects[{l}]", "parts")
        parts = []
        for r, part in enumerate(obj["parts"]):
            where = f"objects[{l}].parts[{r}]"
            _reject_unknown(part, where, {"twist", "shape", "points",
                                          "center", "extent"})
            _require(part, where, "twist")
            if "shape" in part:
                parts.append(PartSpec(twist=tuple(part["twist"]),
                                      shape=tuple(tuple(p) for p in part["shape"])))
            else:
                _require(part, where, "points", "center", "extent")
                parts.append(PartSpec(twist=tuple(part["twist"]),
                                      n_points=part["points"],
                                      center=tuple(part["center"]),
                                      extent=part["extent"]))
        objects.append(ObjectSpec(tuple(parts)))

    defaults = SimConfig()
    return SimConfig(
        name=str(raw.get("name", "default")),
        n_frames=raw["n_frames"],
        seed=raw.get("seed", 0),
        waypoints=tuple(waypoints),
        n_static=static.get("count", defaults.n_static),
        static_extent=tuple(tuple(pair) for pair in
                            static.get("extent", defaults.static_extent)),
        static_positions=static_positions,
        objects=tuple(objects),
        noise=NoiseConfig(noise["init_translation_sigma"],
                          noise["init_rotation_sigma_deg"],
                          noise["measurement_sigma"]),
        fov=FovConfig(float(fov["max_range"]), fov["half_angle_deg"]),
        ratio_target=raw.get("ratio_target", 1.8),
        rigidity_topology=raw.get("rigidity_topology", "spanning"),
    )


def config_to_yaml(config: SimConfig) -> str:
    doc = {
        "name": config.name,
        "n_frames": config.n_frames,
        "seed": config.seed,
        "camera_path": [{"frame": w.frame, "position": list(w.position),
                         "yaw_deg": w.yaw_deg} for w in config.waypoints],
        "static": ({"positions": [list(p) for p in config.static_positions]}
                   if config.static_positions is not None else
                   {"count": config.n_static,
                    "extent": [list(pair) for pair in config.static_extent]}),
        "objects": [
            {"parts": [
                {"twist": list(p.twist), "shape": [list(q) for q in p.shape]}
                if p.shape is not None else
                {"twist": list(p.twist), "points": p.n_points,
                 "center": list(p.center), "extent": p.extent}
                for p in obj.parts]}
            for obj in config.objects],
        "noise": {"init_translation_sigma": config.noise.init_translation_sigma,
                  "init_rotation_sigma_deg": config.noise.init_rotation_sigma_deg,
                  "measurement_sigma": config.noise.measurement_sigma},
        "fov": {"max_range": config.fov.max_range,
                "half_angle_deg": config.fov.half_angle_deg},
        "ratio_target": config.ratio_target,
        "rigidity_topology": config.rigidity_topology,
    }
    return yaml.safe_dump(doc, sort_keys=False)
