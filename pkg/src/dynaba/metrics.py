"""Trajectory evaluation: absolute translation error and relative pose error.

Conventions:

* ATE aligns the estimate to ground truth with a closed-form rigid
  SE(3) fit over translations (no scale) and reports the RMSE of the
  remaining translation errors.  The minimizing transform is used even for
  degenerate frame sets, so the reported value is the minimum achievable
  RMSE; the standalone :func:`align` falls back to first-pose anchoring
  when the fit is not unique and that fallback is flagged in reports.
* RPE compares relative motions over a step of ``delta`` positions in the
  sequence of common frames; a single global transform on either input
  leaves it unchanged.
* Dynamic-point ATE reuses the camera alignment, since object points share
  the camera gauge.

Units are meters and degrees.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, Rotation, act, compose, inverse

_DEGENERACY_TOL = 1e-9


@dataclass(frozen=True)
class Trajectory:
    """Camera path: parallel lists of strictly increasing frame indices and poses."""

    frames: tuple
    poses: tuple

    def __post_init__(self):
        frames = tuple(int(f) for f in self.frames)
        poses = tuple(self.poses)
        if len(frames) != len(poses):
            raise ValueError("frames and poses must have equal length")
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise ValueError("frame indices must be strictly increasing")
        if not all(isinstance(p, Pose) for p in poses):
            raise TypeError("poses must be Pose instances")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "poses", poses)

    def __len__(self) -> int:
        return len(self.frames)

    def pose_at(self, frame: int) -> Pose:
        try:
            return self.poses[self.frames.index(frame)]
        except ValueError:
            raise KeyError(f"no pose for frame {frame}") from None

    def translations(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses])


def common_frames(est: Trajectory, gt: Trajectory) -> list:
    shared = set(est.frames) & set(gt.frames)
    return sorted(shared)


def _matched_translations(est, gt, frames):
    te = np.array([est.pose_at(f).translation for f in frames])
    tg = np.array([gt.pose_at(f).translation for f in frames])
    return te, tg


def _procrustes(source: np.ndarray, target: np.ndarray) -> Pose:
    """Rigid transform A minimizing sum ||A(source_k) - target_k||^2 (no scale)."""
    cs = source.mean(axis=0)
    ct = target.mean(axis=0)
    h = (source - cs).T @ (target - ct)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return Pose(Rotation.from_matrix(r), ct - r @ cs)


def _is_unique_fit(points: np.ndarray) -> bool:
    """The rotation is unique only if the set spans at least two dimensions."""
    if points.shape[0] < 3:
        return False
    centered = points - points.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    return s[1] > _DEGENERACY_TOL * max(s[0], 1.0)


def align(est: Trajectory, gt: Trajectory) -> Pose:
    """Rigid transform taking the estimate into the ground-truth frame.

    Uses the closed-form translation fit when it is unique (at least three
    common frames, non-collinear); otherwise anchors the first common pose:
    A = gt_0 * est_0^-1.
    """
    pose, _ = _align_with_flag(est, gt)
    return pose


def _align_with_flag(est, gt):
    frames = common_frames(est, gt)
    if not frames:
        raise ValueError("trajectories share no frames")
    te, tg = _matched_translations(est, gt, frames)
    if _is_unique_fit(te) and _is_unique_fit(tg):
        return _procrustes(te, tg), False
    return compose(gt.pose_at(frames[0]), inverse(est.pose_at(frames[0]))), True


def ate(est: Trajectory, gt: Trajectory) -> float:
    """Minimum RMSE of translation errors over rigid alignments of the estimate."""
    return _ate_detail(est, gt)[0]


def _ate_detail(est, gt, first_pose=False):
    frames = common_frames(est, gt)
    if not frames:
        raise ValueError("trajectories share no frames")
    te, tg = _matched_translations(est, gt, frames)
    if first_pose:
        transform = compose(gt.pose_at(frames[0]), inverse(est.pose_at(frames[0])))
    else:
        transform = _procrustes(te, tg)
    aligned = te @ transform.rotation.matrix.T + transform.translation
    errors = np.linalg.norm(aligned - tg, axis=1)
    return float(np.sqrt(np.mean(errors ** 2))), frames, errors, transform


def ate_first_pose(est: Trajectory, gt: Trajectory) -> float:
    """ATE with the estimate anchored at the first common pose (no fitting)."""
    return _ate_detail(est, gt, first_pose=True)[0]


def rpe(est: Trajectory, gt: Trajectory, delta: int = 1) -> tuple:
    """(rotation RMSE in degrees, translation RMSE in meters) of relative motions.

    Steps pair the m-th and (m+delta)-th common frames, so a uniform
    relabeling of frame indices does not change the result.
    """
    rot, trans, _ = _rpe_detail(est, gt, delta)
    return rot, trans


def _rpe_detail(est, gt, delta):
    if delta < 1:
        raise ValueError("delta must be >= 1")
    frames = common_frames(est, gt)
    if len(frames) < delta + 1:
        raise ValueError(
            f"need at least {delta + 1} common frames for delta={delta}, "
            f"have {len(frames)}")
    rot_sq, trans_sq, series = [], [], []
    for m in range(len(frames) - delta):
        a, b = frames[m], frames[m + delta]
        rel_gt = compose(inverse(gt.pose_at(a)), gt.pose_at(b))
        rel_est = compose(inverse(est.pose_at(a)), est.pose_at(b))
        err = compose(inverse(rel_gt), rel_est)
        ang = math.degrees(err.rotation.angle)
        tr = float(np.linalg.norm(err.translation))
        rot_sq.append(ang ** 2)
        trans_sq.append(tr ** 2)
        series.append((a, ang, tr))
    return (float(np.sqrt(np.mean(rot_sq))), float(np.sqrt(np.mean(trans_sq))),
            series)


def dynamic_point_ate(est_tracks: dict, gt_tracks: dict,
                      alignment: Pose | None = None) -> float:
    """RMSE of dynamic-point errors under the camera alignment transform.

    Tracks are keyed by (object, part, point, frame).  Only keys present in
    both inputs contribute; an empty intersection is an error.
    """
    keys = sorted(set(est_tracks) & set(gt_tracks))
    if not keys:
        raise ValueError("estimated and ground-truth tracks share no points")
    a = alignment or Pose.identity()
    est = np.array([est_tracks[k] for k in keys]) @ a.rotation.matrix.T \
        + a.translation
    gt = np.array([gt_tracks[k] for k in keys])
    return float(np.sqrt(np.mean(np.sum((est - gt) ** 2, axis=1))))


@dataclass
class MetricReport:
    ate_rmse: float                  # meters
    rpe_rot_rmse: float              # degrees
    rpe_trans_rmse: float            # meters
    alignment: Pose
    alignment_fallback: bool
    ate_series: list = field(default_factory=list)   # (frame, meters)
    rpe_series: list = field(default_factory=list)   # (frame, degrees, meters)
    dynamic_ate: float | None = None # meters

    def __post_init__(self):
        for name in ("ate_rmse", "rpe_rot_rmse", "rpe_trans_rmse"):
            v = getattr(self, name)
            if not (np.isnan(v) or v >= 0.0):
                raise ValueError(f"{name} must be non-negative")


def evaluate(est: Trajectory, gt: Trajectory, delta: int = 1,
             est_tracks: dict | None = None,
             gt_tracks: dict | None = None) -> MetricReport:
    """ATE + RPE of a camera trajectory, plus dynamic-point ATE when tracks given."""
    ate_rmse, frames, errors, _ = _ate_detail(est, gt)
    transform, fallback = _align_with_flag(est, gt)
    rot, trans, rpe_series = _rpe_detail(est, gt, delta)
    dyn = None
    if est_tracks is not None and gt_tracks is not None:
        dyn = dynamic_point_ate(est_tracks, gt_tracks, transform)
    return MetricReport(
        ate_rmse=ate_rmse, rpe_rot_rmse=rot, rpe_trans_rmse=trans,
        alignment=transform, alignment_fallback=fallback,
        ate_series=[(f, float(e)) for f, e in zip(frames, errors)],
        rpe_series=rpe_series, dynamic_ate=dyn)


def report_to_text(report: MetricReport) -> str:
    """Flat key-value record, one entry per line."""
    q = report.alignment.rotation.wxyz
    t = report.alignment.translation
    lines = [
        f"ate_rmse_m {report.ate_rmse:.17g}",
        f"rpe_rot_rmse_deg {report.rpe_rot_rmse:.17g}",
        f"rpe_trans_rmse_m {report.rpe_trans_rmse:.17g}",
        "dynamic_ate_m " + (f"{report.dynamic_ate:.17g}"
                            if report.dynamic_ate is not None else "-"),
        "alignment " + " ".join(f"{v:.17g}" for v in (*q, *t)),
        f"alignment_fallback {int(report.alignment_fallback)}",
    ]
    for f, e in report.ate_series:
        lines.append(f"ate_frame {f} {e:.17g}")
    for f, r, t_err in report.rpe_series:
        lines.append(f"rpe_step {f} {r:.17g} {t_err:.17g}")
    return "\n".join(lines) + "\n"


CSV_HEADER = "ate_rmse_m,rpe_rot_rmse_deg,rpe_trans_rmse_m,dynamic_ate_m,alignment_fallback"


def report_to_csv_row(report: MetricReport) -> str:
    dyn = f"{report.dynamic_ate:.17g}" if report.dynamic_ate is not None else ""
    return (f"{report.ate_rmse:.17g},{report.rpe_rot_rmse:.17g},"
            f"{report.rpe_trans_rmse:.17g},{dyn},{int(report.alignment_fallback)}")


# ---------------------------------------------------------------------------
# Trajectory file format: one line per frame,
# "frame tx ty tz qx qy qz qw" at 9 significant digits.

def trajectory_to_tum(traj: Trajectory) -> str:
    lines = []
    for f, p in zip(traj.frames, traj.poses):
        w, x, y, z = p.rotation.wxyz
        tx, ty, tz = p.translation
        nums = " ".join(f"{v:.9g}" for v in (tx, ty, tz, x, y, z, w))
        lines.append(f"{f} {nums}")
    return "\n".join(lines) + "\n"


def trajectory_from_tum(text: str) -> Trajectory:
    frames, poses = [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise ValueError(
                f"trajectory line {lineno}: expected 8 fields "
                f"(frame tx ty tz qx qy qz qw), got {len(parts)}")
        try:
            frame = int(parts[0])
            tx, ty, tz, qx, qy, qz, qw = (float(v) for v in parts[1:])
        except ValueError:
            raise ValueError(f"trajectory line {lineno}: non-numeric field") from None
        try:
            pose = Pose(Rotation(np.array([qw, qx, qy, qz])), np.array([tx, ty, tz]))
        except ValueError as e:
            raise ValueError(f"trajectory line {lineno}: {e}") from None
        frames.append(frame)
        poses.append(pose)
    try:
        return Trajectory(tuple(frames), tuple(poses))
    except ValueError as e:
        raise ValueError(f"trajectory file: {e}") from None
