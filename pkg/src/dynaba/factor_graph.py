"""Typed variables and factors for bundle adjustment over dynamic scenes.

Variable kinds:

* ``CameraPose(k)``: camera-to-world transform at frame k.
* ``StaticPoint(i)``: world-frame landmark.
* ``DynamicPoint(l, r, i, k)``: world-frame position of point i on rigid part
  r of object l at frame k.
* ``SegmentLength(l, r, i, j)``: distance between points i and j on one rigid
  part, optimized jointly with the points.
* ``ObjectMotion(l, r, k)``: world-frame rigid transform taking part r of
  object l from frame k to frame k+1.

Factor kinds and residuals:

* Observation: r = act(inverse(pose), world_point) - z, with z a 3D point
  measured in the camera frame (range sensor model, not pixel projection).
* Rigidity: r = ||p_i - p_j|| - s, a signed scalar.
* Motion: r = p_next - act(T, p_prev).

Pose and motion Jacobians use left-multiplicative twist perturbations,
matching :func:`dynaba.geometry.act_jacobians`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, Rotation, act, inverse, skew

# Rigidity factors are degenerate below this point separation (meters).
RIGIDITY_MIN_SEPARATION = 1e-9


class GraphIntegrityError(ValueError):
    """A factor or lookup references a variable that is missing or mistyped."""


class DegenerateGeometryError(ValueError):
    """Factor geometry admits no well-defined Jacobian (coincident points)."""


class VarKind(enum.IntEnum):
    CAMERA_POSE = 0
    STATIC_POINT = 1
    DYNAMIC_POINT = 2
    SEGMENT_LENGTH = 3
    OBJECT_MOTION = 4


_KIND_TOKEN = {
    VarKind.CAMERA_POSE: "CameraPose",
    VarKind.STATIC_POINT: "StaticPoint",
    VarKind.DYNAMIC_POINT: "DynamicPoint",
    VarKind.SEGMENT_LENGTH: "SegmentLength",
    VarKind.OBJECT_MOTION: "ObjectMotion",
}
_TOKEN_KIND = {v: k for k, v in _KIND_TOKEN.items()}

# index tuple arity per kind
_KIND_ARITY = {
    VarKind.CAMERA_POSE: 1,
    VarKind.STATIC_POINT: 1,
    VarKind.DYNAMIC_POINT: 4,
    VarKind.SEGMENT_LENGTH: 4,
    VarKind.OBJECT_MOTION: 3,
}

# tangent dimension per kind (used by the solver)
KIND_DIM = {
    VarKind.CAMERA_POSE: 6,
    VarKind.STATIC_POINT: 3,
    VarKind.DYNAMIC_POINT: 3,
    VarKind.SEGMENT_LENGTH: 1,
    VarKind.OBJECT_MOTION: 6,
}


@dataclass(frozen=True)
class VariableId:
    kind: VarKind
    index: tuple

    def __post_init__(self):
        idx = tuple(int(v) for v in self.index)
        if len(idx) != _KIND_ARITY[self.kind]:
            raise ValueError(
                f"{_KIND_TOKEN[self.kind]} takes {_KIND_ARITY[self.kind]} indices, "
                f"got {len(idx)}")
        if any(v < 0 for v in idx):
            raise ValueError(f"negative index in {_KIND_TOKEN[self.kind]}{idx}")
        object.__setattr__(self, "index", idx)

    def token(self) -> str:
        return "/".join([_KIND_TOKEN[self.kind]] + [str(v) for v in self.index])

    @staticmethod
    def parse(token: str) -> "VariableId":
        parts = token.split("/")
        kind = _TOKEN_KIND.get(parts[0])
        if kind is None:
            raise ValueError(f"unknown variable kind {parts[0]!r}")
        try:
            idx = tuple(int(p) for p in parts[1:])
        except ValueError:
            raise ValueError(f"non-integer index in {token!r}") from None
        return VariableId(kind, idx)

    def __repr__(self) -> str:
        return self.token()


def camera(k: int) -> VariableId:
    return VariableId(VarKind.CAMERA_POSE, (k,))


def static_point(i: int) -> VariableId:
    return VariableId(VarKind.STATIC_POINT, (i,))


def dynamic_point(obj: int, part: int, point: int, frame: int) -> VariableId:
    return VariableId(VarKind.DYNAMIC_POINT, (obj, part, point, frame))


def segment_length(obj: int, part: int, i: int, j: int) -> VariableId:
    return VariableId(VarKind.SEGMENT_LENGTH, (obj, part, i, j))


def object_motion(obj: int, part: int, frame: int) -> VariableId:
    """Motion of (obj, part) from ``frame`` to ``frame + 1``."""
    return VariableId(VarKind.OBJECT_MOTION, (obj, part, frame))


def _check_spd(omega) -> np.ndarray:
    m = np.asarray(omega, dtype=float)
    if m.shape != (3, 3):
        raise ValueError(f"covariance must be 3x3, got shape {m.shape}")
    if not np.allclose(m, m.T, atol=1e-12):
        raise ValueError("covariance must be symmetric")
    try:
        np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        raise ValueError("covariance must be positive definite") from None
    m = m.copy()
    m.setflags(write=False)
    return m


@dataclass(frozen=True)
class ObservationFactor:
    """Point measured in the camera frame; ties one pose to one landmark."""

    camera: VariableId
    point: VariableId
    measurement: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        if self.camera.kind != VarKind.CAMERA_POSE:
            raise ValueError(f"camera must be a CameraPose id, got {self.camera}")
        if self.point.kind not in (VarKind.STATIC_POINT, VarKind.DYNAMIC_POINT):
            raise ValueError(f"point must be a Static/DynamicPoint id, got {self.point}")
        z = np.array(self.measurement, dtype=float)
        if z.shape != (3,) or not np.all(np.isfinite(z)):
            raise ValueError("measurement must be a finite 3-vector")
        z.setflags(write=False)
        object.__setattr__(self, "measurement", z)
        object.__setattr__(self, "covariance", _check_spd(self.covariance))

    def variables(self) -> tuple:
        return (self.camera, self.point)


@dataclass(frozen=True)
class RigidityFactor:
    """Holds two points of one rigid part at the optimized segment length."""

    point_i: VariableId
    point_j: VariableId
    segment: VariableId
    covariance: float

    def __post_init__(self):
        pi, pj, seg = self.point_i, self.point_j, self.segment
        for p in (pi, pj):
            if p.kind != VarKind.DYNAMIC_POINT:
                raise ValueError(f"rigidity endpoints must be DynamicPoint ids, got {p}")
        if seg.kind != VarKind.SEGMENT_LENGTH:
            raise ValueError(f"segment must be a SegmentLength id, got {seg}")
        if pi == pj:
            raise ValueError("rigidity endpoints must be distinct")
        if pi.index[:2] != pj.index[:2] or pi.index[3] != pj.index[3]:
            raise ValueError(
                f"rigidity endpoints must share object, part, and frame: {pi} vs {pj}")
        if seg.index[:2] != pi.index[:2] or {seg.index[2], seg.index[3]} != {
                pi.index[2], pj.index[2]}:
            raise ValueError(f"segment {seg} does not name the points of {pi}, {pj}")
        cov = float(self.covariance)
        if not (cov > 0.0 and np.isfinite(cov)):
            raise ValueError("covariance must be a positive scalar")
        object.__setattr__(self, "covariance", cov)

    def variables(self) -> tuple:
        return (self.point_i, self.point_j, self.segment)


@dataclass(frozen=True)
class MotionFactor:
    """One point of a rigid part carried between consecutive frames by a shared transform.

    ``bias`` is an optional constant offset on the carried position,
    normally zero; a nonzero bias models a gross between-frame
    mismatch (wrong track association) and is what the outlier
    injection tooling writes.
    """

    point_prev: VariableId
    point_next: VariableId
    motion: VariableId
    covariance: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        pp, pn, mo = self.point_prev, self.point_next, self.motion
        for p in (pp, pn):
            if p.kind != VarKind.DYNAMIC_POINT:
                raise ValueError(f"motion endpoints must be DynamicPoint ids, got {p}")
        if mo.kind != VarKind.OBJECT_MOTION:
            raise ValueError(f"motion must be an ObjectMotion id, got {mo}")
        if pp.index[:3] != pn.index[:3]:
            raise ValueError(f"motion endpoints must be the same physical point: {pp} vs {pn}")
        if pn.index[3] != pp.index[3] + 1:
            raise ValueError(f"motion endpoints must be on consecutive frames: {pp} vs {pn}")
        if mo.index != (pp.index[0], pp.index[1], pp.index[3]):
            raise ValueError(f"motion id {mo} does not match endpoints {pp} -> {pn}")
        object.__setattr__(self, "covariance", _check_spd(self.covariance))
        b = np.zeros(3) if self.bias is None else np.array(self.bias, dtype=float)
        if b.shape != (3,) or not np.all(np.isfinite(b)):
            raise ValueError("bias must be a finite 3-vector")
        b.setflags(write=False)
        object.__setattr__(self, "bias", b)

    def variables(self) -> tuple:
        return (self.point_prev, self.point_next, self.motion)


Factor = ObservationFactor | RigidityFactor | MotionFactor


class Values:
    """State map: VariableId -> Pose | 3-vector | scalar, typed by variable kind."""

    def __init__(self):
        self._data: dict[VariableId, object] = {}

    def set(self, vid: VariableId, value) -> None:
        if vid.kind in (VarKind.CAMERA_POSE, VarKind.OBJECT_MOTION):
            if not isinstance(value, Pose):
                raise TypeError(f"{vid} expects a Pose, got {type(value).__name__}")
        elif vid.kind == VarKind.SEGMENT_LENGTH:
            value = float(value)
            if not np.isfinite(value):
                raise ValueError(f"{vid} expects a finite scalar")
        else:
            value = np.array(value, dtype=float)
            if value.shape != (3,) or not np.all(np.isfinite(value)):
                raise ValueError(f"{vid} expects a finite 3-vector")
            value.setflags(write=False)
        self._data[vid] = value

    def get(self, vid: VariableId):
        try:
            return self._data[vid]
        except KeyError:
            raise GraphIntegrityError(f"no value for {vid}") from None

    def __contains__(self, vid: VariableId) -> bool:
        return vid in self._data

    def __len__(self) -> int:
        return len(self._data)

    def ids(self):
        return self._data.keys()

    def items(self):
        return self._data.items()

    def copy(self) -> "Values":
        out = Values()
        out._data = dict(self._data)
        return out


@dataclass
class FactorGraph:
    """Variable declarations, factor list, and gauge-fixing (held-constant) ids.

    Factors are identified by their insertion index into :attr:`factors`;
    the pruning solver reports removals by these indices.
    """

    variables: dict = field(default_factory=dict)  # VariableId -> VarKind
    factors: list = field(default_factory=list)
    held: set = field(default_factory=set)

    def add_variable(self, vid: VariableId) -> VariableId:
        if vid in self.variables:
            raise GraphIntegrityError(f"duplicate variable {vid}")
        self.variables[vid] = vid.kind
        return vid

    def add_factor(self, factor: Factor) -> int:
        for vid in factor.variables():
            if vid not in self.variables:
                raise GraphIntegrityError(f"factor references undeclared variable {vid}")
        self.factors.append(factor)
        return len(self.factors) - 1

    def hold_constant(self, vid: VariableId) -> None:
        if vid not in self.variables:
            raise GraphIntegrityError(f"cannot hold undeclared variable {vid}")
        self.held.add(vid)

    def check_values(self, values: Values) -> None:
        """Every declared variable must carry a value (kind agreement is enforced by Values.set)."""
        for vid in self.variables:
            if vid not in values:
                raise GraphIntegrityError(f"no value for declared variable {vid}")


def residual(factor: Factor, values: Values) -> np.ndarray:
    if isinstance(factor, ObservationFactor):
        pose = values.get(factor.camera)
        point = values.get(factor.point)
        return act(inverse(pose), point) - factor.measurement
    if isinstance(factor, RigidityFactor):
        d = values.get(factor.point_i) - values.get(factor.point_j)
        s = values.get(factor.segment)
        return np.array([np.linalg.norm(d) - s])
    if isinstance(factor, MotionFactor):
        t = values.get(factor.motion)
        return (values.get(factor.point_next)
                - act(t, values.get(factor.point_prev)) - factor.bias)
    raise TypeError(f"unknown factor type {type(factor).__name__}")


def jacobians(factor: Factor, values: Values) -> list:
    """Jacobian blocks as ``[(VariableId, matrix), ...]`` in factor variable order.

    Pose and motion blocks differentiate with respect to a left twist
    [omega, v]; point blocks with respect to the point itself.
    """
    if isinstance(factor, ObservationFactor):
        pose = values.get(factor.camera)
        point = values.get(factor.point)
        rt = pose.rotation.matrix.T
        j_pose = np.hstack((rt @ skew(point), -rt))
        return [(factor.camera, j_pose), (factor.point, rt.copy())]
    if isinstance(factor, RigidityFactor):
        d = values.get(factor.point_i) - values.get(factor.point_j)
        n = float(np.linalg.norm(d))
        if n <= RIGIDITY_MIN_SEPARATION:
            raise DegenerateGeometryError(
                f"rigidity endpoints {factor.point_i}, {factor.point_j} are coincident "
                f"(separation {n:.3e})")
        u = (d / n)[None, :]
        return [(factor.point_i, u), (factor.point_j, -u),
                (factor.segment, np.array([[-1.0]]))]
    if isinstance(factor, MotionFactor):
        t = values.get(factor.motion)
        y = act(t, values.get(factor.point_prev))
        j_motion = np.hstack((skew(y), -np.eye(3)))
        return [(factor.point_prev, -t.rotation.matrix.copy()),
                (factor.point_next, np.eye(3)),
                (factor.motion, j_motion)]
    raise TypeError(f"unknown factor type {type(factor).__name__}")


def factor_chi2(factor: Factor, values: Values) -> float:
    """Quadratic form r^T Omega^-1 r of one factor."""
    r = residual(factor, values)
    if isinstance(factor, RigidityFactor):
        return float(r[0] * r[0] / factor.covariance)
    return float(r @ np.linalg.solve(factor.covariance, r))


def cost(graph: FactorGraph, values: Values) -> float:
    """Total weighted cost: sum over factors of r^T Omega^-1 r."""
    return sum(factor_chi2(f, values) for f in graph.factors)


# ---------------------------------------------------------------------------
# Plain-text serialization: one variable, factor, hold, or value per line,
# numbers at 17 significant digits.  Used for fixtures and CLI interchange.

def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


def _fmt_all(xs) -> str:
    return " ".join(_fmt(x) for x in np.asarray(xs, dtype=float).ravel())


def graph_to_text(graph: FactorGraph) -> str:
    lines = []
    for vid in graph.variables:
        lines.append(f"var {vid.token()}")
    for f in graph.factors:
        if isinstance(f, ObservationFactor):
            lines.append(f"factor Observation {f.camera.token()} {f.point.token()} "
                         f"{_fmt_all(f.measurement)} {_fmt_all(f.covariance)}")
        elif isinstance(f, RigidityFactor):
            lines.append(f"factor Rigidity {f.point_i.token()} {f.point_j.token()} "
                         f"{f.segment.token()} {_fmt(f.covariance)}")
        elif isinstance(f, MotionFactor):
            line = (f"factor Motion {f.point_prev.token()} {f.point_next.token()} "
                    f"{f.motion.token()} {_fmt_all(f.covariance)}")
            if np.any(f.bias):
                line += f" {_fmt_all(f.bias)}"
            lines.append(line)
        else:
            raise TypeError(f"unknown factor type {type(f).__name__}")
    for vid in sorted(graph.held, key=lambda v: (v.kind, v.index)):
        lines.append(f"hold {vid.token()}")
    return "\n".join(lines) + "\n"


def graph_from_text(text: str) -> FactorGraph:
    graph = FactorGraph()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            if parts[0] == "var":
                graph.add_variable(VariableId.parse(parts[1]))
            elif parts[0] == "hold":
                graph.hold_constant(VariableId.parse(parts[1]))
            elif parts[0] == "factor":
                kind = parts[1]
                if kind == "Observation":
                    nums = [float(x) for x in parts[4:]]
                    if len(nums) != 12:
                        raise ValueError("Observation needs 3 measurement + 9 covariance numbers")
                    graph.add_factor(ObservationFactor(
                        VariableId.parse(parts[2]), VariableId.parse(parts[3]),
                        np.array(nums[:3]), np.array(nums[3:]).reshape(3, 3)))
                elif kind == "Rigidity":
                    graph.add_factor(RigidityFactor(
                        VariableId.parse(parts[2]), VariableId.parse(parts[3]),
                        VariableId.parse(parts[4]), float(parts[5])))
                elif kind == "Motion":
                    nums = [float(x) for x in parts[5:]]
                    if len(nums) not in (9, 12):
                        raise ValueError(
                            "Motion needs 9 covariance numbers, optionally 3 bias numbers")
                    bias = np.array(nums[9:]) if len(nums) == 12 else None
                    graph.add_factor(MotionFactor(
                        VariableId.parse(parts[2]), VariableId.parse(parts[3]),
                        VariableId.parse(parts[4]), np.array(nums[:9]).reshape(3, 3),
                        bias))
                else:
                    raise ValueError(f"unknown factor kind {kind!r}")
            else:
                raise ValueError(f"unknown directive {parts[0]!r}")
        except (ValueError, IndexError, GraphIntegrityError) as e:
            raise ValueError(f"graph text line {lineno}: {e}") from None
    return graph


def values_to_text(values: Values) -> str:
    lines = []
    for vid, val in values.items():
        if isinstance(val, Pose):
            nums = _fmt_all(np.concatenate((val.rotation.wxyz, val.translation)))
        elif isinstance(val, float):
            nums = _fmt(val)
        else:
            nums = _fmt_all(val)
        lines.append(f"{vid.token()} {nums}")
    return "\n".join(lines) + "\n"


def values_from_text(text: str) -> Values:
    values = Values()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            vid = VariableId.parse(parts[0])
            nums = [float(x) for x in parts[1:]]
            if vid.kind in (VarKind.CAMERA_POSE, VarKind.OBJECT_MOTION):
                if len(nums) != 7:
                    raise ValueError("pose value needs 7 numbers (qw qx qy qz tx ty tz)")
                values.set(vid, Pose(Rotation(np.array(nums[:4])), np.array(nums[4:])))
            elif vid.kind == VarKind.SEGMENT_LENGTH:
                if len(nums) != 1:
                    raise ValueError("segment value needs 1 number")
                values.set(vid, nums[0])
            else:
                if len(nums) != 3:
                    raise ValueError("point value needs 3 numbers")
                values.set(vid, np.array(nums))
        except ValueError as e:
            raise ValueError(f"values text line {lineno}: {e}") from None
    return values
