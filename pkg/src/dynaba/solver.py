"""Sparse Levenberg-Marquardt for dynamic-scene bundle adjustment.

The solver minimizes the weighted factor-graph cost over camera poses, static
and dynamic points, segment lengths, and object motions.  Gauge freedom is
removed by holding at least one camera pose constant.  An optional pruning
loop alternates solving with chi-square rejection of rigidity and motion
factors, which absorbs gross outliers that would otherwise drag the estimate.

Linearization is batched per factor kind: residuals and Jacobian blocks for
all factors of one kind are computed with stacked array arithmetic, and the
sparse Jacobian is rebuilt from a precomputed coordinate pattern.  The result
is bit-deterministic for a fixed graph and configuration.
"""

from __future__ import annotations

import enum
import logging
import time
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csc_matrix, csr_matrix
from scipy.sparse.linalg import splu

from .factor_graph import (
    RIGIDITY_MIN_SEPARATION,
    FactorGraph,
    GraphIntegrityError,
    KIND_DIM,
    MotionFactor,
    ObservationFactor,
    RigidityFactor,
    Values,
    VarKind,
    factor_chi2,
)
from .geometry import Pose, Rotation, se3_exp_batch, skew_batch

logger = logging.getLogger(__name__)

# Damping has no practical lower bound; this floor only avoids denormals.
_LAMBDA_FLOOR = 1e-12


@dataclass
class SolverConfig:
    """Levenberg-Marquardt and pruning hyperparameters."""

    max_iterations: int = 100
    initial_lambda: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 0.1
    cost_tolerance: float = 1e-8   # relative decrease per accepted step
    step_tolerance: float = 1e-10  # update norm
    prune_rigidity_chi2: float = 3.84  # chi-square, 1 dof, 95%
    prune_motion_chi2: float = 7.81    # chi-square, 3 dof, 95%
    prune_rounds: int = 0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        for name in ("initial_lambda", "lambda_up", "lambda_down",
                     "cost_tolerance", "step_tolerance",
                     "prune_rigidity_chi2", "prune_motion_chi2"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be positive")
        if self.lambda_down >= 1.0 or self.lambda_up <= 1.0:
            raise ValueError("lambda factors must bracket 1 (down < 1 < up)")
        if self.prune_rounds < 0:
            raise ValueError("prune_rounds must be >= 0")


class SolveStatus(enum.Enum):
    CONVERGED = "Converged"
    MAX_ITERATIONS = "MaxIterations"
    DEGENERATE = "Degenerate"


@dataclass(frozen=True)
class IterationRecord:
    index: int
    cost: float        # cost after the iteration (unchanged if rejected)
    lam: float
    step_norm: float
    accepted: bool
    micros: int


@dataclass
class SolveReport:
    status: SolveStatus
    iterations: list
    initial_cost: float
    final_cost: float
    pruned: list = field(default_factory=list)       # factor ids per round
    diagnostics: list = field(default_factory=list)  # under-constrained variables etc.

    @property
    def accepted_costs(self) -> list:
        return [r.cost for r in self.iterations if r.accepted]


def report_to_text(report: SolveReport, include_timing: bool = True) -> str:
    """One header block, then one line per iteration:
    index cost lambda step_norm accepted micros.

    ``include_timing=False`` prints '-' for micros, making the text
    deterministic for byte-compared artifacts.
    """
    lines = [
        f"status {report.status.value}",
        f"initial_cost {report.initial_cost:.17g}",
        f"final_cost {report.final_cost:.17g}",
    ]
    for rnd, ids in enumerate(report.pruned):
        lines.append(f"pruned {rnd} {','.join(str(i) for i in ids) if ids else '-'}")
    for msg in report.diagnostics:
        lines.append(f"diagnostic {msg}")
    lines.append(f"iterations {len(report.iterations)}")
    for r in report.iterations:
        micros = str(r.micros) if include_timing else "-"
        lines.append(f"{r.index} {r.cost:.17g} {r.lam:.17g} {r.step_norm:.17g} "
                     f"{int(r.accepted)} {micros}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Prepared problem: variable layout, factor groups, sparse pattern.

_POINT_KINDS = (VarKind.STATIC_POINT, VarKind.DYNAMIC_POINT)


@dataclass
class _State:
    """Flat array mirror of Values for the variables of one graph."""

    cam_r: np.ndarray   # (n_cam, 3, 3)
    cam_t: np.ndarray   # (n_cam, 3)
    points: np.ndarray  # (n_pt, 3)
    segs: np.ndarray    # (n_seg,)
    mot_r: np.ndarray   # (n_mot, 3, 3)
    mot_t: np.ndarray   # (n_mot, 3)

    def copy(self) -> "_State":
        return _State(self.cam_r.copy(), self.cam_t.copy(), self.points.copy(),
                      self.segs.copy(), self.mot_r.copy(), self.mot_t.copy())


def _block_pattern(row_base, rows_per, first_cols, n_rows_blk, n_cols_blk):
    """COO indices for the Jacobian blocks of factors whose variable is free.

    Returns (factor_indices, rows, cols); rows/cols are flattened in factor
    order, row-major within each block.
    """
    idx = np.nonzero(first_cols >= 0)[0]
    rr = np.repeat(np.arange(n_rows_blk), n_cols_blk)
    cc = np.tile(np.arange(n_cols_blk), n_rows_blk)
    rows = (row_base + rows_per * idx)[:, None] + rr[None, :]
    cols = first_cols[idx][:, None] + cc[None, :]
    return idx, rows.ravel(), cols.ravel()


class _Prepared:
    """Graph frozen for solving: slot/column layout and vectorized linearization."""

    def __init__(self, graph: FactorGraph):
        if not any(v.kind == VarKind.CAMERA_POSE for v in graph.held):
            raise GraphIntegrityError(
                "no gauge anchor: hold at least one CameraPose constant before solving")
        self.graph = graph

        self.cam_ids, self.point_ids, self.seg_ids, self.mot_ids = [], [], [], []
        for vid in graph.variables:
            if vid.kind == VarKind.CAMERA_POSE:
                self.cam_ids.append(vid)
            elif vid.kind in _POINT_KINDS:
                self.point_ids.append(vid)
            elif vid.kind == VarKind.SEGMENT_LENGTH:
                self.seg_ids.append(vid)
            else:
                self.mot_ids.append(vid)
        cam_slot = {v: i for i, v in enumerate(self.cam_ids)}
        point_slot = {v: i for i, v in enumerate(self.point_ids)}
        seg_slot = {v: i for i, v in enumerate(self.seg_ids)}
        mot_slot = {v: i for i, v in enumerate(self.mot_ids)}

        # tangent-space columns, declaration order, held variables excluded
        self.col: dict = {}
        dim = 0
        for vid in graph.variables:
            if vid in graph.held:
                continue
            self.col[vid] = dim
            dim += KIND_DIM[vid.kind]
        self.dim = dim
        self.col_owner = [None] * dim
        for vid, c in self.col.items():
            for d in range(KIND_DIM[vid.kind]):
                self.col_owner[c + d] = vid

        def free_arrays(ids, slot):
            free = [v for v in ids if v in self.col]
            return (np.array([slot[v] for v in free], dtype=int),
                    np.array([self.col[v] for v in free], dtype=int))

        self.free_cam_slots, self.free_cam_cols = free_arrays(self.cam_ids, cam_slot)
        self.free_pt_slots, self.free_pt_cols = free_arrays(self.point_ids, point_slot)
        self.free_seg_slots, self.free_seg_cols = free_arrays(self.seg_ids, seg_slot)
        self.free_mot_slots, self.free_mot_cols = free_arrays(self.mot_ids, mot_slot)

        obs = [f for f in graph.factors if isinstance(f, ObservationFactor)]
        rig = [f for f in graph.factors if isinstance(f, RigidityFactor)]
        mot = [f for f in graph.factors if isinstance(f, MotionFactor)]
        n_obs, n_rig, n_mot = len(obs), len(rig), len(mot)
        self.n_rows = 3 * n_obs + n_rig + 3 * n_mot

        def cols_of(ids):
            return np.array([self.col.get(v, -1) for v in ids], dtype=int)

        # observations
        self.obs_cam = np.array([cam_slot[f.camera] for f in obs], dtype=int)
        self.obs_pt = np.array([point_slot[f.point] for f in obs], dtype=int)
        self.obs_z = (np.array([f.measurement for f in obs])
                      if obs else np.zeros((0, 3)))
        self.obs_w = _whitener(np.array([f.covariance for f in obs])
                               if obs else np.zeros((0, 3, 3)))
        obs_cam_cols = cols_of([f.camera for f in obs])
        obs_pt_cols = cols_of([f.point for f in obs])

        # rigidity
        self.rig_i = np.array([point_slot[f.point_i] for f in rig], dtype=int)
        self.rig_j = np.array([point_slot[f.point_j] for f in rig], dtype=int)
        self.rig_seg = np.array([seg_slot[f.segment] for f in rig], dtype=int)
        self.rig_w = (1.0 / np.sqrt(np.array([f.covariance for f in rig]))
                      if rig else np.zeros(0))
        rig_i_cols = cols_of([f.point_i for f in rig])
        rig_j_cols = cols_of([f.point_j for f in rig])
        rig_seg_cols = cols_of([f.segment for f in rig])

        # motions
        self.mot_prev = np.array([point_slot[f.point_prev] for f in mot], dtype=int)
        self.mot_next = np.array([point_slot[f.point_next] for f in mot], dtype=int)
        self.mot_slot = np.array([mot_slot[f.motion] for f in mot], dtype=int)
        self.mot_w = _whitener(np.array([f.covariance for f in mot])
                               if mot else np.zeros((0, 3, 3)))
        self.mot_bias = (np.array([f.bias for f in mot])
                         if mot else np.zeros((0, 3)))
        mot_prev_cols = cols_of([f.point_prev for f in mot])
        mot_next_cols = cols_of([f.point_next for f in mot])
        mot_t_cols = cols_of([f.motion for f in mot])

        rig_base = 3 * n_obs
        mot_base = rig_base + n_rig
        self.rig_base, self.mot_base = rig_base, mot_base

        blocks = [
            _block_pattern(0, 3, obs_cam_cols, 3, 6),
            _block_pattern(0, 3, obs_pt_cols, 3, 3),
            _block_pattern(rig_base, 1, rig_i_cols, 1, 3),
            _block_pattern(rig_base, 1, rig_j_cols, 1, 3),
            _block_pattern(rig_base, 1, rig_seg_cols, 1, 1),
            _block_pattern(mot_base, 3, mot_prev_cols, 3, 3),
            _block_pattern(mot_base, 3, mot_next_cols, 3, 3),
            _block_pattern(mot_base, 3, mot_t_cols, 3, 6),
        ]
        self.block_idx = [b[0] for b in blocks]
        self.pattern_rows = np.concatenate([b[1] for b in blocks]).astype(np.int32)
        self.pattern_cols = np.concatenate([b[2] for b in blocks]).astype(np.int32)
        self._warned_degenerate = False

        # Fixed CSR layout for the Jacobian and fixed CSC pattern for the
        # normal matrix.  Sparse products drop entries whose value is exactly
        # zero (identity motions and isotropic whiteners produce plenty), so
        # the assembled pattern would otherwise vary with the iterate and
        # defeat reuse of the factorization ordering.
        self._jac_order = np.lexsort((self.pattern_cols, self.pattern_rows))
        self._jac_indices = self.pattern_cols[self._jac_order]
        self._jac_indptr = np.zeros(self.n_rows + 1, dtype=np.int32)
        np.cumsum(np.bincount(self.pattern_rows, minlength=self.n_rows),
                  out=self._jac_indptr[1:])
        ones = csr_matrix((np.ones(self._jac_order.size), self._jac_indices,
                           self._jac_indptr), shape=(self.n_rows, self.dim))
        hp = (ones.T @ ones).tocsc()
        hp.sort_indices()
        self.h_indptr, self.h_indices = hp.indptr, hp.indices
        self._h_keys = (np.repeat(np.arange(self.dim, dtype=np.int64),
                                  np.diff(hp.indptr)) * self.dim
                        + hp.indices.astype(np.int64))
        d = np.arange(self.dim, dtype=np.int64)
        diag_keys = d * self.dim + d
        pos = np.searchsorted(self._h_keys, diag_keys)
        # a diagonal entry is structurally absent when a variable has no factor
        inside = pos < self._h_keys.size
        self.h_diag_present = np.zeros(self.dim, dtype=bool)
        if self._h_keys.size:
            self.h_diag_present[inside] = \
                self._h_keys[pos[inside]] == diag_keys[inside]
        self.h_diag_pos = np.minimum(pos, max(self._h_keys.size - 1, 0))

    def diagonal_of(self, h_data: np.ndarray) -> np.ndarray:
        out = np.zeros(self.dim)
        if h_data.size:
            sel = self.h_diag_present
            out[sel] = h_data[self.h_diag_pos[sel]]
        return out

    def normal_matrix(self, jac) -> np.ndarray:
        """Data array of J^T J in the fixed structural pattern."""
        hq = (jac.T @ jac).tocsc()
        hq.sort_indices()
        keys = (np.repeat(np.arange(self.dim, dtype=np.int64),
                          np.diff(hq.indptr)) * self.dim
                + hq.indices.astype(np.int64))
        pos = np.searchsorted(self._h_keys, keys)
        if pos.size and not np.array_equal(self._h_keys[pos], keys):
            raise AssertionError("normal matrix outside the structural pattern")
        data = np.zeros(self._h_keys.size)
        data[pos] = hq.data
        return data

    # -- state conversion ---------------------------------------------------

    def state_from_values(self, values: Values) -> _State:
        self.graph.check_values(values)
        cam_r = (np.array([values.get(v).rotation.matrix for v in self.cam_ids])
                 if self.cam_ids else np.zeros((0, 3, 3)))
        cam_t = (np.array([values.get(v).translation for v in self.cam_ids])
                 if self.cam_ids else np.zeros((0, 3)))
        points = (np.array([values.get(v) for v in self.point_ids])
                  if self.point_ids else np.zeros((0, 3)))
        segs = np.array([values.get(v) for v in self.seg_ids], dtype=float)
        mot_r = (np.array([values.get(v).rotation.matrix for v in self.mot_ids])
                 if self.mot_ids else np.zeros((0, 3, 3)))
        mot_t = (np.array([values.get(v).translation for v in self.mot_ids])
                 if self.mot_ids else np.zeros((0, 3)))
        return _State(cam_r, cam_t, points, segs, mot_r, mot_t)

    def values_from_state(self, state: _State, base: Values) -> Values:
        out = base.copy()
        for i, vid in enumerate(self.cam_ids):
            out.set(vid, Pose(Rotation.from_matrix(state.cam_r[i]), state.cam_t[i]))
        for i, vid in enumerate(self.point_ids):
            out.set(vid, state.points[i])
        for i, vid in enumerate(self.seg_ids):
            out.set(vid, float(state.segs[i]))
        for i, vid in enumerate(self.mot_ids):
            out.set(vid, Pose(Rotation.from_matrix(state.mot_r[i]), state.mot_t[i]))
        return out

    # -- linearization ------------------------------------------------------

    def _residual_blocks(self, state: _State):
        """Whitened residuals per group plus intermediates reused by Jacobians."""
        r_cam = state.cam_r[self.obs_cam]
        local = np.einsum("nba,nb->na", r_cam, state.points[self.obs_pt]
                          - state.cam_t[self.obs_cam])
        rw_obs = np.einsum("nab,nb->na", self.obs_w, local - self.obs_z)

        d = state.points[self.rig_i] - state.points[self.rig_j]
        sep = np.linalg.norm(d, axis=1)
        ok = sep > RIGIDITY_MIN_SEPARATION
        if not ok.all() and not self._warned_degenerate:
            self._warned_degenerate = True
            logger.warning("skipping %d rigidity factor(s) with coincident endpoints",
                           int((~ok).sum()))
        rw_rig = np.where(ok, (sep - state.segs[self.rig_seg]) * self.rig_w, 0.0)

        mot_r = state.mot_r[self.mot_slot]
        carried = (np.einsum("nab,nb->na", mot_r, state.points[self.mot_prev])
                   + state.mot_t[self.mot_slot])
        rw_mot = np.einsum("nab,nb->na", self.mot_w,
                           state.points[self.mot_next] - carried - self.mot_bias)
        return (rw_obs, rw_rig, rw_mot), (r_cam, d, sep, ok, mot_r, carried)

    def whitened_residual(self, state: _State) -> np.ndarray:
        (rw_obs, rw_rig, rw_mot), _ = self._residual_blocks(state)
        out = np.empty(self.n_rows)
        out[:self.rig_base] = rw_obs.ravel()
        out[self.rig_base:self.mot_base] = rw_rig
        out[self.mot_base:] = rw_mot.ravel()
        return out

    def linearize(self, state: _State):
        """Whitened residual vector and sparse Jacobian at ``state``."""
        (rw_obs, rw_rig, rw_mot), (r_cam, d, sep, ok, mot_r, carried) = \
            self._residual_blocks(state)

        rt = np.transpose(r_cam, (0, 2, 1))
        j_obs_pt = self.obs_w @ rt                                     # (n,3,3)
        j_obs_cam = np.concatenate(
            (j_obs_pt @ skew_batch(state.points[self.obs_pt]), -j_obs_pt), axis=2)

        u = d / np.where(ok, sep, 1.0)[:, None]
        u = np.where(ok[:, None], u, 0.0) * self.rig_w[:, None]
        j_rig_i = u[:, None, :]                                        # (n,1,3)
        j_rig_seg = np.where(ok, -self.rig_w, 0.0)[:, None, None]      # (n,1,1)

        j_mot_prev = -(self.mot_w @ mot_r)
        j_mot_t = np.concatenate((self.mot_w @ skew_batch(carried), -self.mot_w),
                                 axis=2)

        sources = (j_obs_cam, j_obs_pt, j_rig_i, -j_rig_i, j_rig_seg,
                   j_mot_prev, self.mot_w, j_mot_t)
        data = np.concatenate([src[idx].ravel()
                               for src, idx in zip(sources, self.block_idx)])
        jac = csr_matrix((data[self._jac_order], self._jac_indices,
                          self._jac_indptr), shape=(self.n_rows, self.dim))

        res = np.empty(self.n_rows)
        res[:self.rig_base] = rw_obs.ravel()
        res[self.rig_base:self.mot_base] = rw_rig
        res[self.mot_base:] = rw_mot.ravel()
        return jac, res

    # -- retraction ---------------------------------------------------------

    def retract(self, state: _State, delta: np.ndarray) -> _State:
        out = state.copy()
        n_cam = self.free_cam_slots.size
        n_mot = self.free_mot_slots.size
        if n_cam or n_mot:
            # one batched exponential for cameras and motions together
            cols = np.concatenate((self.free_cam_cols, self.free_mot_cols))
            tw = delta[cols[:, None] + np.arange(6)]
            r_exp, t_exp = se3_exp_batch(tw)
            if n_cam:
                s = self.free_cam_slots
                r, t = r_exp[:n_cam], t_exp[:n_cam]
                out.cam_r[s] = r @ out.cam_r[s]
                out.cam_t[s] = np.einsum("nab,nb->na", r, out.cam_t[s]) + t
            if n_mot:
                s = self.free_mot_slots
                r, t = r_exp[n_cam:], t_exp[n_cam:]
                out.mot_r[s] = r @ out.mot_r[s]
                out.mot_t[s] = np.einsum("nab,nb->na", r, out.mot_t[s]) + t
        if self.free_pt_slots.size:
            out.points[self.free_pt_slots] += \
                delta[self.free_pt_cols[:, None] + np.arange(3)]
        if self.free_seg_slots.size:
            out.segs[self.free_seg_slots] += delta[self.free_seg_cols]
        return out


def _whitener(covs: np.ndarray) -> np.ndarray:
    """Inverse Cholesky factors: W such that W @ r has unit covariance."""
    if covs.shape[0] == 0:
        return covs.reshape(0, 3, 3)
    return np.linalg.inv(np.linalg.cholesky(covs))


def normal_equations(graph: FactorGraph, values: Values):
    """Assembled (H, g, cost) at ``values``: H = J^T J, g = J^T r, whitened.

    Exposed for verification against dense reference assembly.
    """
    prep = _Prepared(graph)
    state = prep.state_from_values(values)
    jac, res = prep.linearize(state)
    h = csc_matrix((prep.normal_matrix(jac), prep.h_indices, prep.h_indptr),
                   shape=(prep.dim, prep.dim))
    g = np.asarray(jac.T @ res).ravel()
    return h, g, float(res @ res)


# ---------------------------------------------------------------------------
# Levenberg-Marquardt loop.

def _factorize(damped):
    """Sparse LU of the damped normal matrix.

    The matrix is symmetric positive definite, so symmetric-mode minimum
    degree with diagonal pivoting beats the default unsymmetric ordering by
    an order of magnitude on motion-chained graphs.
    """
    return splu(damped, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                options=dict(SymmetricMode=True))


class _Permuted:
    """Factorization of P A P^T exposing solves in the original ordering."""

    def __init__(self, lu, order):
        self._lu = lu
        self._order = order

    def solve(self, b):
        y = self._lu.solve(b[self._order])
        out = np.empty_like(y)
        out[self._order] = y
        return out


class _Symbolic:
    """Pattern-derived arrays for replaying a fill-reducing ordering.

    ``order`` maps original columns to elimination slots; ``gather``
    rearranges the original CSC data into the permuted layout whose
    structure is ``indices``/``indptr``.  Everything here is immutable
    once built and safe to share across solver instances.
    """

    __slots__ = ("order", "gather", "indices", "indptr")

    def __init__(self, damped, perm_c):
        n = damped.shape[0]
        self.order = np.empty_like(perm_c)
        self.order[perm_c] = np.arange(n)
        cols = np.repeat(np.arange(n), np.diff(damped.indptr))
        new_r, new_c = perm_c[damped.indices], perm_c[cols]
        self.gather = np.lexsort((new_r, new_c))
        self.indices = new_r[self.gather]
        self.indptr = np.zeros(n + 1, dtype=damped.indptr.dtype)
        np.cumsum(np.bincount(new_c, minlength=n), out=self.indptr[1:])


# Orderings found for recently seen patterns.  Graphs built from the same
# world topology share a pattern exactly, so repeated solves (ablation
# sweeps, repeated service calls) skip the ordering phase entirely.  A wrong
# hit would only mean a poor ordering, never a wrong result, and the key
# includes the exact shape and occupancy.
_SYMBOLIC_CACHE: dict = {}
_SYMBOLIC_CACHE_MAX = 16


def _pattern_key(damped) -> tuple:
    h = zlib.crc32(damped.indptr.tobytes())
    h = zlib.crc32(damped.indices.tobytes(), h)
    return damped.shape[0], damped.nnz, h


class _PatternFactorizer:
    """Factorizes a sequence of matrices sharing one sparsity pattern.

    The fill-reducing ordering depends only on the pattern, so it is computed
    the expensive way at most once per pattern (see ``_SYMBOLIC_CACHE``) and
    replayed as a symmetric pre-permutation, leaving only the numeric
    elimination to SuperLU.  A pattern change (never expected within one
    solve) falls back to the slow path and re-caches.
    """

    def __init__(self):
        self._indptr = None
        self._indices = None
        self._sym = None
        self._template = None

    def __call__(self, damped):
        if self._indptr is None or not (
                np.array_equal(damped.indptr, self._indptr)
                and np.array_equal(damped.indices, self._indices)):
            first = self._adopt(damped)
            if first is not None:
                return first
        sym = self._sym
        self._template.data[:] = damped.data[sym.gather]
        lu = splu(self._template, permc_spec="NATURAL", diag_pivot_thresh=0.0,
                  options=dict(SymmetricMode=True))
        return _Permuted(lu, sym.order)

    def _adopt(self, damped):
        """Bind this instance to the matrix pattern; returns a factorization
        only when one was computed as a byproduct of finding the ordering."""
        key = _pattern_key(damped)
        sym = _SYMBOLIC_CACHE.get(key)
        lu = None
        if sym is None:
            lu = _factorize(damped)
            sym = _Symbolic(damped, lu.perm_c)
            if len(_SYMBOLIC_CACHE) >= _SYMBOLIC_CACHE_MAX:
                _SYMBOLIC_CACHE.pop(next(iter(_SYMBOLIC_CACHE)))
            _SYMBOLIC_CACHE[key] = sym
        self._sym = sym
        self._template = csc_matrix(
            (damped.data[sym.gather], sym.indices, sym.indptr),
            shape=damped.shape)
        self._template.has_sorted_indices = True
        self._indptr = damped.indptr.copy()
        self._indices = damped.indices.copy()
        return lu


def solve(graph: FactorGraph, initial: Values,
          config: SolverConfig | None = None) -> tuple[Values, SolveReport]:
    """Minimize the graph cost from ``initial``; returns (values, report).

    Accepts a candidate step only when it strictly lowers the cost, so the
    accepted-cost sequence in the report never increases.  Terminates on
    relative cost decrease, step norm, or the iteration cap; a structurally
    under-constrained system yields a Degenerate report naming the variables.
    """
    config = config or SolverConfig()
    prep = _Prepared(graph)
    state = prep.state_from_values(initial)

    jac, res = prep.linearize(state)
    current = float(res @ res)
    if not np.isfinite(current):
        raise ValueError(f"non-finite initial cost {current}")
    initial_cost = current
    records: list = []

    h_data = prep.normal_matrix(jac)
    g = np.asarray(jac.T @ res).ravel()
    diag = prep.diagonal_of(h_data)
    dead = np.nonzero(diag == 0.0)[0]
    if dead.size:
        owners = sorted({prep.col_owner[c].token() for c in dead})
        return initial.copy(), SolveReport(
            SolveStatus.DEGENERATE, records, initial_cost, initial_cost,
            diagnostics=[f"under-constrained {t}" for t in owners])

    lam = config.initial_lambda
    status = SolveStatus.MAX_ITERATIONS
    diagnostics: list = []
    factorizer = _PatternFactorizer()
    damped = csc_matrix((h_data.copy(), prep.h_indices, prep.h_indptr),
                        shape=(prep.dim, prep.dim))
    damped.has_sorted_indices = True
    damped.data[prep.h_diag_pos] = diag * (1.0 + lam)
    try:
        factorizer(damped)  # cache the elimination ordering outside the loop
    except RuntimeError:
        pass  # the first iteration will surface the failure with diagnostics

    for it in range(config.max_iterations):
        t0 = time.perf_counter_ns()
        damped.data[:] = h_data
        damped.data[prep.h_diag_pos] = diag * (1.0 + lam)
        try:
            delta = factorizer(damped).solve(-g)
        except RuntimeError as e:
            status = SolveStatus.DEGENERATE
            diagnostics.append(f"linear solve failed: {e}")
            break
        if not np.all(np.isfinite(delta)):
            status = SolveStatus.DEGENERATE
            diagnostics.append("non-finite update")
            break
        step_norm = float(np.linalg.norm(delta))
        candidate = prep.retract(state, delta)
        res_new = prep.whitened_residual(candidate)
        new_cost = float(res_new @ res_new)
        accepted = new_cost < current
        micros = (time.perf_counter_ns() - t0) // 1000
        records.append(IterationRecord(it, new_cost if accepted else current,
                                       lam, step_norm, accepted, micros))
        if accepted:
            drop = (current - new_cost) / current if current > 0.0 else 1.0
            state, current = candidate, new_cost
            lam = max(lam * config.lambda_down, _LAMBDA_FLOOR)
            if current == 0.0 or drop < config.cost_tolerance \
                    or step_norm < config.step_tolerance:
                status = SolveStatus.CONVERGED
                break
            jac, res = prep.linearize(state)
            h_data = prep.normal_matrix(jac)
            g = np.asarray(jac.T @ res).ravel()
            diag = prep.diagonal_of(h_data)
        else:
            if step_norm < config.step_tolerance:
                # damping cannot shrink the step further; we are at a stationary point
                status = SolveStatus.CONVERGED
                break
            lam *= config.lambda_up

    return prep.values_from_state(state, initial), SolveReport(
        status, records, initial_cost, current, diagnostics=diagnostics)


# ---------------------------------------------------------------------------
# Chi-square pruning of constraint factors.

def prune_outliers(graph: FactorGraph, values: Values,
                   config: SolverConfig | None = None) -> tuple[FactorGraph, list]:
    """Drop rigidity/motion factors whose chi-square exceeds the configured
    threshold.  Observation factors are never removed.  A variable that would
    lose every factor is excluded from the reduced graph along with its value
    estimate.  Returns (reduced graph, removed factor indices into
    ``graph.factors``).
    """
    config = config or SolverConfig()
    removed = []
    for idx, f in enumerate(graph.factors):
        if isinstance(f, RigidityFactor):
            if factor_chi2(f, values) > config.prune_rigidity_chi2:
                removed.append(idx)
        elif isinstance(f, MotionFactor):
            if factor_chi2(f, values) > config.prune_motion_chi2:
                removed.append(idx)
    if not removed:
        return graph, []

    removed_set = set(removed)
    kept = [f for i, f in enumerate(graph.factors) if i not in removed_set]
    support = {vid: 0 for vid in graph.variables}
    for f in kept:
        for vid in f.variables():
            support[vid] += 1
    had_support = {vid: 0 for vid in graph.variables}
    for f in graph.factors:
        for vid in f.variables():
            had_support[vid] += 1

    reduced = FactorGraph()
    for vid in graph.variables:
        if had_support[vid] > 0 and support[vid] == 0:
            continue  # would be fully disconnected: excluded with its factors
        reduced.add_variable(vid)
    for f in kept:
        reduced.add_factor(f)
    for vid in graph.held:
        if vid in reduced.variables:
            reduced.hold_constant(vid)
    return reduced, removed


def solve_with_pruning(graph: FactorGraph, initial: Values,
                       config: SolverConfig | None = None) -> tuple[Values, SolveReport]:
    """Alternate solve and chi-square pruning for ``config.prune_rounds`` rounds,
    then solve once more on the final graph.  Factor ids in the report's
    ``pruned`` lists index the original graph.
    """
    config = config or SolverConfig()
    current_graph = graph
    orig_ids = list(range(len(graph.factors)))
    values = initial
    all_records: list = []
    pruned_rounds: list = []
    diagnostics: list = []
    initial_cost = None
    report = None

    final_solve_needed = True
    for _ in range(config.prune_rounds):
        values, report = solve(current_graph, values, config)
        all_records.extend(report.iterations)
        diagnostics.extend(report.diagnostics)
        if initial_cost is None:
            initial_cost = report.initial_cost
        if report.status == SolveStatus.DEGENERATE:
            final_solve_needed = False
            break
        reduced, removed = prune_outliers(current_graph, values, config)
        pruned_rounds.append([orig_ids[i] for i in removed])
        if not removed:
            # nothing pruned: the solve above already ran on the final graph
            final_solve_needed = False
            break
        removed_set = set(removed)
        orig_ids = [orig_ids[i] for i in range(len(current_graph.factors))
                    if i not in removed_set]
        current_graph = reduced

    if final_solve_needed:
        values, report = solve(current_graph, values, config)
        all_records.extend(report.iterations)
        diagnostics.extend(report.diagnostics)
        if initial_cost is None:
            initial_cost = report.initial_cost

    records = [IterationRecord(i, r.cost, r.lam, r.step_norm, r.accepted, r.micros)
               for i, r in enumerate(all_records)]
    return values, SolveReport(report.status, records, initial_cost,
                               report.final_cost, pruned=pruned_rounds,
                               diagnostics=diagnostics)
