"""SO(3)/SE(3) primitives: rotations, rigid transforms, exp/log maps, Jacobians.

Conventions used throughout the package:

* Rotations are unit quaternions ``(w, x, y, z)`` canonicalized to ``w >= 0``.
* A twist is a 6-vector ``[omega, v]`` with the rotational part first
  (radians) and the translational part second (meters).
* Perturbations of poses are left-multiplicative: a pose ``P`` updated by a
  twist ``xi`` becomes ``exp(xi) @ P``.  All pose Jacobians in this package
  are taken with respect to that convention.

All types are immutable values; operations are pure functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

# Below this rotation angle the closed forms of exp/log/V are replaced by
# second-order Taylor expansions to avoid catastrophic cancellation.
SMALL_ANGLE = 1e-8

# log() is refused this close to the pi branch point.
LOG_ANGLE_MARGIN = 1e-6


class LogMapError(ValueError):
    """Rotation angle too close to pi for an unambiguous logarithm."""


def _as_vec3(v) -> np.ndarray:
    a = np.asarray(v, dtype=float)
    if a.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {a.shape}")
    return a


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix: skew(a) @ b == cross(a, b)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass(frozen=True, eq=False)
class Rotation:
    """Unit quaternion (w, x, y, z); normalized and sign-canonicalized on construction."""

    wxyz: np.ndarray

    def __post_init__(self):
        q = np.array(self.wxyz, dtype=float)
        if q.shape != (4,):
            raise ValueError(f"quaternion must have 4 components, got shape {q.shape}")
        norm = np.linalg.norm(q)
        if not np.isfinite(norm) or norm == 0.0:
            raise ValueError("quaternion has zero or non-finite norm")
        q = q / norm
        if q[0] < 0.0:
            q = -q
        q.setflags(write=False)
        object.__setattr__(self, "wxyz", q)

    @staticmethod
    def identity() -> "Rotation":
        return Rotation(np.array([1.0, 0.0, 0.0, 0.0]))

    @staticmethod
    def exp(omega) -> "Rotation":
        """SO(3) exponential of a rotation vector (axis * angle, radians)."""
        omega = _as_vec3(omega)
        angle = float(np.linalg.norm(omega))
        if angle < SMALL_ANGLE:
            # sin(a/2)/a ~ 1/2 - a^2/48
            half_sinc = 0.5 - angle * angle / 48.0
            w = math.cos(0.5 * angle)
        else:
            half_sinc = math.sin(0.5 * angle) / angle
            w = math.cos(0.5 * angle)
        return Rotation(np.concatenate(([w], half_sinc * omega)))

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Rotation":
        """Quaternion from a (numerically) orthonormal rotation matrix."""
        m = np.asarray(m, dtype=float)
        # Shepperd's method: pick the largest of the four squared components.
        t = np.trace(m)
        q = np.empty(4)
        if t > m[0, 0] and t > m[1, 1] and t > m[2, 2]:
            s = math.sqrt(1.0 + t) * 2.0
            q[:] = (0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s,
                    (m[1, 0] - m[0, 1]) / s)
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
            q[:] = ((m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s,
                    (m[0, 2] + m[2, 0]) / s)
        elif m[1, 1] > m[2, 2]:
            s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
            q[:] = ((m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s,
                    (m[1, 2] + m[2, 1]) / s)
        else:
            s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
            q[:] = ((m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s,
                    (m[1, 2] + m[2, 1]) / s, 0.25 * s)
        return Rotation(q)

    @cached_property
    def matrix(self) -> np.ndarray:
        """3x3 rotation matrix."""
        w, x, y, z = self.wxyz
        xx, yy, zz = x * x, y * y, z * z
        xy, xz, yz = x * y, x * z, y * z
        wx, wy, wz = w * x, w * y, w * z
        m = np.array([
            [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
            [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
            [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
        ])
        m.setflags(write=False)
        return m

    @property
    def angle(self) -> float:
        """Rotation angle in [0, pi]."""
        s = float(np.linalg.norm(self.wxyz[1:]))
        return 2.0 * math.atan2(s, float(self.wxyz[0]))

    def log(self) -> np.ndarray:
        """Rotation vector; raises :class:`LogMapError` within 1e-6 of pi."""
        w = float(self.wxyz[0])
        xyz = self.wxyz[1:]
        s = float(np.linalg.norm(xyz))
        angle = 2.0 * math.atan2(s, w)
        if angle >= math.pi - LOG_ANGLE_MARGIN:
            raise LogMapError(
                f"rotation angle {angle:.9f} rad is within {LOG_ANGLE_MARGIN} of pi; "
                "logarithm branch is ambiguous")
        if s < SMALL_ANGLE:
            # angle/sin(angle/2) ~ 2 + angle^2/12 for small angles, w ~ 1
            return xyz * (2.0 / w) * (1.0 - s * s / (3.0 * w * w))
        return xyz * (angle / s)

    def multiply(self, other: "Rotation") -> "Rotation":
        w1, x1, y1, z1 = self.wxyz
        w2, x2, y2, z2 = other.wxyz
        return Rotation(np.array([
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]))

    def inverse(self) -> "Rotation":
        w, x, y, z = self.wxyz
        return Rotation(np.array([w, -x, -y, -z]))

    def apply(self, v) -> np.ndarray:
        return self.matrix @ _as_vec3(v)

    def __repr__(self) -> str:
        w, x, y, z = self.wxyz
        return f"Rotation(w={w:.6g}, x={x:.6g}, y={y:.6g}, z={z:.6g})"


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform: rotation followed by translation (meters)."""

    rotation: Rotation
    translation: np.ndarray

    def __post_init__(self):
        t = np.array(self.translation, dtype=float)
        if t.shape != (3,):
            raise ValueError(f"translation must be a 3-vector, got shape {t.shape}")
        if not np.all(np.isfinite(t)):
            raise ValueError("translation has non-finite components")
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(Rotation.identity(), np.zeros(3))

    @staticmethod
    def from_rt(r: np.ndarray, t) -> "Pose":
        return Pose(Rotation.from_matrix(r), _as_vec3(t))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.matrix
        m[:3, 3] = self.translation
        return m

    def __repr__(self) -> str:
        t = self.translation
        return f"Pose(t=({t[0]:.6g}, {t[1]:.6g}, {t[2]:.6g}), {self.rotation!r})"


def _v_matrix(omega: np.ndarray) -> np.ndarray:
    """Left Jacobian of SO(3): couples rotation into translation in exp()."""
    angle = float(np.linalg.norm(omega))
    k = skew(omega)
    k2 = k @ k
    if angle < SMALL_ANGLE:
        return np.eye(3) + 0.5 * k + k2 / 6.0
    a2 = angle * angle
    half_sin = math.sin(0.5 * angle)
    # 2 sin^2(a/2)/a^2 == (1 - cos a)/a^2 without the cancellation near 0
    return (np.eye(3)
            + (2.0 * half_sin * half_sin / a2) * k
            + ((angle - math.sin(angle)) / (a2 * angle)) * k2)


def _v_matrix_inv(omega: np.ndarray) -> np.ndarray:
    angle = float(np.linalg.norm(omega))
    k = skew(omega)
    k2 = k @ k
    if angle < SMALL_ANGLE:
        return np.eye(3) - 0.5 * k + k2 / 12.0
    a2 = angle * angle
    # (a/2) cot(a/2) rewrite of a sin a / (2 (1 - cos a)); stable for small a
    half = 0.5 * angle
    coeff = (1.0 - half * math.cos(half) / math.sin(half)) / a2
    return np.eye(3) - 0.5 * k + coeff * k2


def exp(xi) -> Pose:
    """SE(3) exponential of a twist [omega, v]."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (6,):
        raise ValueError(f"twist must have 6 components, got shape {xi.shape}")
    omega, v = xi[:3], xi[3:]
    return Pose(Rotation.exp(omega), _v_matrix(omega) @ v)


def log(p: Pose) -> np.ndarray:
    """SE(3) logarithm; inverse of :func:`exp` for rotation angles below pi."""
    omega = p.rotation.log()
    v = _v_matrix_inv(omega) @ p.translation
    return np.concatenate((omega, v))


def compose(a: Pose, b: Pose) -> Pose:
    """a then b applied from the right: (a*b).act(p) == a.act(b.act(p))."""
    return Pose(a.rotation.multiply(b.rotation),
                a.rotation.apply(b.translation) + a.translation)


def inverse(p: Pose) -> Pose:
    rinv = p.rotation.inverse()
    return Pose(rinv, -rinv.apply(p.translation))


def act(p: Pose, point) -> np.ndarray:
    """Apply the rigid transform to a point: R @ p + t."""
    return p.rotation.apply(point) + p.translation


def act_jacobians(p: Pose, point) -> tuple[np.ndarray, np.ndarray]:
    """Derivatives of act(P, q) for a left twist on P and for the point q.

    Returns ``(J_pose, J_point)`` with shapes (3, 6) and (3, 3).  The pose
    block is ordered [omega, v]; its translational half is the identity,
    a consequence of the left-multiplicative convention.
    """
    y = act(p, point)
    j_pose = np.hstack((-skew(y), np.eye(3)))
    return j_pose, p.rotation.matrix.copy()


# ---------------------------------------------------------------------------
# Batched variants used by the solver's vectorized linearization.  These
# mirror the scalar forms above; tests cross-check the two paths.

def skew_batch(v: np.ndarray) -> np.ndarray:
    """Cross-product matrices for an (n, 3) array -> (n, 3, 3)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros((v.shape[0], 3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out


def so3_exp_batch(omegas: np.ndarray) -> np.ndarray:
    """Rodrigues formula for an (n, 3) array of rotation vectors -> (n, 3, 3)."""
    omegas = np.asarray(omegas, dtype=float)
    angles = np.linalg.norm(omegas, axis=1)
    k = skew_batch(omegas)
    k2 = k @ k
    small = angles < SMALL_ANGLE
    a2 = angles * angles
    safe_a = np.where(small, 1.0, angles)
    half_sin = np.sin(0.5 * angles)
    sin_coeff = np.where(small, 1.0 - a2 / 6.0, np.sin(angles) / safe_a)
    cos_coeff = np.where(small, 0.5 - a2 / 24.0,
                         2.0 * half_sin * half_sin / (safe_a * safe_a))
    return (np.eye(3)[None, :, :]
            + sin_coeff[:, None, None] * k
            + cos_coeff[:, None, None] * k2)


def se3_exp_batch(twists: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched SE(3) exp: (n, 6) twists -> rotations (n, 3, 3), translations (n, 3)."""
    twists = np.asarray(twists, dtype=float)
    omegas, vs = twists[:, :3], twists[:, 3:]
    rs = so3_exp_batch(omegas)
    angles = np.linalg.norm(omegas, axis=1)
    k = skew_batch(omegas)
    k2 = k @ k
    small = angles < SMALL_ANGLE
    a2 = angles * angles
    safe_a = np.where(small, 1.0, angles)
    half_sin = np.sin(0.5 * angles)
    b = np.where(small, 0.5 - a2 / 24.0, 2.0 * half_sin * half_sin / (safe_a * safe_a))
    c = np.where(small, 1.0 / 6.0, (angles - np.sin(angles)) / (safe_a * safe_a * safe_a))
    v_mats = np.eye(3)[None, :, :] + b[:, None, None] * k + c[:, None, None] * k2
    ts = np.einsum("nij,nj->ni", v_mats, vs)
    return rs, ts
