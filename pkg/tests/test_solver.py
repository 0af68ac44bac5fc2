"""Solver tests: LM convergence, dense assembly oracle, determinism, pruning."""

import numpy as np
import pytest

from dynaba import geometry as geo
from dynaba.factor_graph import (
    FactorGraph,
    GraphIntegrityError,
    KIND_DIM,
    MotionFactor,
    ObservationFactor,
    RigidityFactor,
    Values,
    camera,
    cost,
    dynamic_point,
    jacobians,
    object_motion,
    residual,
    segment_length,
    static_point,
    values_to_text,
)
from dynaba.solver import (
    SolveStatus,
    SolverConfig,
    normal_equations,
    prune_outliers,
    report_to_text,
    solve,
    solve_with_pruning,
)


def build_scene(rng, n_frames=3, n_static=4, n_dyn=3, sigma=0.05,
                hold="first", include_motion=True, segment_pairs=None,
                meas_rng=None):
    """Small synthetic scene; returns (graph, ground-truth values).

    ``meas_rng`` redraws only the measurement noise, keeping geometry fixed.
    """
    meas_rng = meas_rng or rng
    sigma_f = max(sigma, 1e-6)
    obs_cov = sigma_f ** 2 * np.eye(3)
    con_cov = 2.0 * sigma_f ** 2

    cams_gt = []
    for k in range(n_frames):
        xi = np.concatenate((rng.normal(size=3) * 0.05,
                             [0.4 * k, 0.05 * rng.normal(), 0.02 * rng.normal()]))
        cams_gt.append(geo.exp(xi))
    statics = rng.uniform([1.0, -2.0, -1.0], [5.0, 2.0, 2.0], size=(n_static, 3))

    local = rng.uniform(-0.5, 0.5, size=(n_dyn, 3))
    motion_gt = geo.exp(np.array([0.0, 0.0, 0.05, 0.15, 0.02, 0.0]))
    dyn_gt = np.zeros((n_frames, n_dyn, 3))
    dyn_gt[0] = np.array([2.0, 1.0, 0.0]) + local
    for k in range(1, n_frames):
        for i in range(n_dyn):
            dyn_gt[k, i] = geo.act(motion_gt, dyn_gt[k - 1, i])

    if segment_pairs is None:
        segment_pairs = [(i, j) for i in range(n_dyn) for j in range(i + 1, n_dyn)]

    g = FactorGraph()
    vals = Values()
    cams = [g.add_variable(camera(k)) for k in range(n_frames)]
    for k, c in enumerate(cams):
        vals.set(c, cams_gt[k])
    if hold == "all":
        for c in cams:
            g.hold_constant(c)
    else:
        g.hold_constant(cams[0])

    for i in range(n_static):
        vid = g.add_variable(static_point(i))
        vals.set(vid, statics[i])
        for k in range(n_frames):
            z = geo.act(geo.inverse(cams_gt[k]), statics[i]) + sigma * meas_rng.normal(size=3)
            g.add_factor(ObservationFactor(cams[k], vid, z, obs_cov))

    dps = {}
    for k in range(n_frames):
        for i in range(n_dyn):
            vid = g.add_variable(dynamic_point(0, 0, i, k))
            dps[(i, k)] = vid
            vals.set(vid, dyn_gt[k, i])
            z = geo.act(geo.inverse(cams_gt[k]), dyn_gt[k, i]) + sigma * meas_rng.normal(size=3)
            g.add_factor(ObservationFactor(cams[k], vid, z, obs_cov))

    for (i, j) in segment_pairs:
        seg = g.add_variable(segment_length(0, 0, i, j))
        vals.set(seg, float(np.linalg.norm(dyn_gt[0, i] - dyn_gt[0, j])))
        for k in range(n_frames):
            g.add_factor(RigidityFactor(dps[(i, k)], dps[(j, k)], seg, con_cov))

    if include_motion:
        for k in range(n_frames - 1):
            mot = g.add_variable(object_motion(0, 0, k))
            vals.set(mot, motion_gt)
            for i in range(n_dyn):
                g.add_factor(MotionFactor(dps[(i, k)], dps[(i, k + 1)], mot,
                                          con_cov * np.eye(3)))
    return g, vals


def perturb_values(graph, values, rng, scale):
    out = values.copy()
    for vid in graph.variables:
        if vid in graph.held:
            continue
        val = values.get(vid)
        if isinstance(val, geo.Pose):
            out.set(vid, geo.compose(geo.exp(rng.normal(size=6) * scale), val))
        elif isinstance(val, float):
            out.set(vid, val + float(rng.normal()) * scale)
        else:
            out.set(vid, val + rng.normal(size=3) * scale)
    return out


class TestSolveBasics:
    def test_noiseless_ground_truth_converges_immediately(self):
        g, gt = build_scene(np.random.default_rng(0), sigma=0.0)
        out, report = solve(g, gt)
        assert report.status == SolveStatus.CONVERGED
        assert len(report.iterations) <= 2
        assert report.final_cost < 1e-16

    def test_triangulation_matches_linear_least_squares(self):
        rng = np.random.default_rng(1)
        g = FactorGraph()
        cams, poses = [], []
        pt_gt = np.array([2.0, 0.5, -0.3])
        pt = g.add_variable(static_point(0))
        rows_a, rows_b = [], []
        for k in range(3):
            pose = geo.exp(np.concatenate((rng.normal(size=3) * 0.3,
                                           rng.uniform(-1, 1, size=3))))
            c = g.add_variable(camera(k))
            g.hold_constant(c)
            cams.append(c)
            poses.append(pose)
            z = geo.act(geo.inverse(pose), pt_gt)
            g.add_factor(ObservationFactor(c, pt, z, 1e-4 * np.eye(3)))
            # linear system R^T p = z + R^T t, stacked over cameras
            rows_a.append(pose.rotation.matrix.T)
            rows_b.append(z + pose.rotation.matrix.T @ pose.translation)
        reference = np.linalg.lstsq(np.vstack(rows_a), np.concatenate(rows_b),
                                    rcond=None)[0]

        init = Values()
        for c, pose in zip(cams, poses):
            init.set(c, pose)
        init.set(pt, pt_gt + rng.normal(size=3))
        out, report = solve(g, init)
        assert report.status == SolveStatus.CONVERGED
        assert np.max(np.abs(out.get(pt) - reference)) < 1e-9

    def test_quadratic_convergence_near_optimum(self):
        rng = np.random.default_rng(2)
        g, gt = build_scene(rng, sigma=0.0)
        init = perturb_values(g, gt, rng, 1e-3)
        out, report = solve(g, init)
        below = [r.index for r in report.iterations if r.accepted and r.cost < 1e-12]
        assert below and below[0] < 5, f"records: {report.iterations}"

    def test_noisy_solve_reduces_cost_and_error(self):
        rng = np.random.default_rng(3)
        g, gt = build_scene(rng, sigma=0.02)
        init = perturb_values(g, gt, rng, 0.1)
        out, report = solve(g, init)
        assert report.final_cost < report.initial_cost
        err_in = np.max(np.abs(init.get(static_point(0)) - gt.get(static_point(0))))
        err_out = np.max(np.abs(out.get(static_point(0)) - gt.get(static_point(0))))
        assert err_out < err_in

    def test_accepted_costs_never_increase(self):
        rng = np.random.default_rng(4)
        g, gt = build_scene(rng, sigma=0.05)
        init = perturb_values(g, gt, rng, 0.3)
        _, report = solve(g, init)
        costs = report.accepted_costs
        assert all(b < a for a, b in zip(costs, costs[1:]))
        assert report.final_cost <= report.initial_cost

    def test_resolve_is_bit_identical(self):
        rng = np.random.default_rng(5)
        g, gt = build_scene(rng, sigma=0.05)
        init = perturb_values(g, gt, rng, 0.2)
        out1, rep1 = solve(g, init)
        out2, rep2 = solve(g, init)
        assert values_to_text(out1) == values_to_text(out2)
        assert [r.cost for r in rep1.iterations] == [r.cost for r in rep2.iterations]

    def test_missing_gauge_anchor_rejected(self):
        g, gt = build_scene(np.random.default_rng(6))
        g.held.clear()
        with pytest.raises(GraphIntegrityError, match="gauge"):
            solve(g, gt)

    def test_under_constrained_variable_reported(self):
        g, gt = build_scene(np.random.default_rng(7))
        orphan = g.add_variable(static_point(99))
        gt.set(orphan, np.zeros(3))
        out, report = solve(g, gt)
        assert report.status == SolveStatus.DEGENERATE
        assert any("StaticPoint/99" in d for d in report.diagnostics)

    def test_two_frame_rigid_pair_monte_carlo(self):
        # fixed geometry (two held cameras, two points, one segment); only the
        # measurement noise and initialization vary across seeds
        truth = None
        estimates = []
        for seed in range(100):
            rng = np.random.default_rng(1000 + seed)
            g, gt = build_scene(np.random.default_rng(42), n_frames=2, n_static=0,
                                n_dyn=2, sigma=0.05, hold="all",
                                include_motion=False, meas_rng=rng)
            seg = segment_length(0, 0, 0, 1)
            if truth is None:
                truth = gt.get(seg)
            init = perturb_values(g, gt, rng, 0.1)
            out, report = solve(g, init)
            assert report.final_cost < report.initial_cost
            estimates.append(out.get(seg))
        estimates = np.array(estimates)
        sem = estimates.std() / np.sqrt(len(estimates))
        assert abs(estimates.mean() - truth) < 3.0 * sem, \
            f"mean {estimates.mean():.4f} truth {truth:.4f} sem {sem:.4f}"


class TestNormalEquations:
    def test_matches_dense_reference(self):
        rng = np.random.default_rng(8)
        g, gt = build_scene(rng, n_frames=2, n_static=3, n_dyn=2, sigma=0.03)
        vals = perturb_values(g, gt, rng, 0.1)
        assert len(g.variables) <= 50

        cols, dim = {}, 0
        for vid in g.variables:
            if vid in g.held:
                continue
            cols[vid] = dim
            dim += KIND_DIM[vid.kind]

        n_rows = sum(len(residual(f, vals)) for f in g.factors)
        jac = np.zeros((n_rows, dim))
        res = np.zeros(n_rows)
        row = 0
        for f in g.factors:
            r = residual(f, vals)
            m = len(r)
            if isinstance(f, RigidityFactor):
                w = np.array([[1.0 / np.sqrt(f.covariance)]])
            else:
                w = np.linalg.inv(np.linalg.cholesky(f.covariance))
            res[row:row + m] = w @ r
            for vid, block in jacobians(f, vals):
                if vid in cols:
                    c = cols[vid]
                    jac[row:row + m, c:c + block.shape[1]] = w @ block
            row += m

        h_ref = jac.T @ jac
        g_ref = jac.T @ res
        h, grad, chi2 = normal_equations(g, vals)
        assert np.max(np.abs(h.toarray() - h_ref)) < 1e-10
        assert np.max(np.abs(grad - g_ref)) < 1e-10
        assert chi2 == pytest.approx(float(res @ res), rel=1e-12)
        assert chi2 == pytest.approx(cost(g, vals), rel=1e-9)


def _single_point_track(n_frames, sigma=0.05):
    """One dynamic point followed over n_frames; motion factors only on it."""
    rng = np.random.default_rng(11)
    return build_scene(rng, n_frames=n_frames, n_static=2, n_dyn=1, sigma=0.0,
                       hold="first", include_motion=True, segment_pairs=[])


class TestPruning:
    def test_zero_residuals_remove_nothing(self):
        g, gt = build_scene(np.random.default_rng(9), sigma=0.0)
        reduced, removed = prune_outliers(g, gt, SolverConfig())
        assert removed == []
        assert reduced is g

    def test_noiseless_survives_tiny_threshold(self):
        # residuals at the exact truth are zero up to float roundoff, so any
        # threshold epsilon above the roundoff floor keeps everything
        g, gt = build_scene(np.random.default_rng(10), sigma=0.0)
        cfg = SolverConfig(prune_rigidity_chi2=1e-18, prune_motion_chi2=1e-18)
        _, removed = prune_outliers(g, gt, cfg)
        assert removed == []

    def test_single_corrupted_motion_factor_identified(self):
        g, gt = _single_point_track(4)
        # displace the final-frame point estimate by 1 m: exactly one motion
        # factor (2 -> 3) sees the jump
        bad = gt.copy()
        bad.set(dynamic_point(0, 0, 0, 3), gt.get(dynamic_point(0, 0, 0, 3))
                + np.array([1.0, 0.0, 0.0]))
        cfg = SolverConfig(prune_motion_chi2=7.81)
        reduced, removed = prune_outliers(g, bad, cfg)
        expected = [i for i, f in enumerate(g.factors)
                    if isinstance(f, MotionFactor) and f.point_next.index[3] == 3]
        assert removed == expected and len(removed) == 1
        # the motion variable for that pair lost its only factor: excluded
        assert object_motion(0, 0, 2) not in reduced.variables
        assert object_motion(0, 0, 1) in reduced.variables

    def test_infinite_threshold_is_identity(self):
        g, gt = _single_point_track(4)
        bad = gt.copy()
        bad.set(dynamic_point(0, 0, 0, 3), gt.get(dynamic_point(0, 0, 0, 3))
                + np.array([5.0, 0.0, 0.0]))
        cfg = SolverConfig(prune_rigidity_chi2=float("inf"),
                           prune_motion_chi2=float("inf"))
        reduced, removed = prune_outliers(g, bad, cfg)
        assert removed == [] and reduced is g

    def test_observation_factors_never_removed(self):
        rng = np.random.default_rng(12)
        g, gt = build_scene(rng, sigma=0.0)
        bad = perturb_values(g, gt, rng, 2.0)  # everything looks like an outlier
        reduced, removed = prune_outliers(g, bad, SolverConfig())
        n_obs = sum(isinstance(f, ObservationFactor) for f in g.factors)
        n_obs_reduced = sum(isinstance(f, ObservationFactor) for f in reduced.factors)
        assert n_obs_reduced == n_obs
        assert all(not isinstance(g.factors[i], ObservationFactor) for i in removed)
        for vid in g.held:
            assert vid in reduced.variables and vid in reduced.held


class TestSolveWithPruning:
    def test_zero_rounds_identical_to_solve(self):
        rng = np.random.default_rng(13)
        g, gt = build_scene(rng, sigma=0.05)
        init = perturb_values(g, gt, rng, 0.2)
        out_a, rep_a = solve(g, init, SolverConfig())
        out_b, rep_b = solve_with_pruning(g, init, SolverConfig(prune_rounds=0))
        assert values_to_text(out_a) == values_to_text(out_b)
        assert rep_b.pruned == []
        assert [r.cost for r in rep_a.iterations] == [r.cost for r in rep_b.iterations]

    def test_rounds_with_clean_data_change_nothing(self):
        rng = np.random.default_rng(14)
        g, gt = build_scene(rng, sigma=0.02)
        init = perturb_values(g, gt, rng, 0.1)
        out, report = solve_with_pruning(g, init, SolverConfig(prune_rounds=2))
        assert report.pruned == [[]]
        assert report.status == SolveStatus.CONVERGED

    def test_concatenated_accepted_costs_non_increasing(self):
        g, gt = _single_point_track(6)
        bad = gt.copy()
        bad.set(dynamic_point(0, 0, 0, 5), gt.get(dynamic_point(0, 0, 0, 5))
                + np.array([0.8, 0.0, 0.0]))
        cfg = SolverConfig(prune_rounds=2)
        out, report = solve_with_pruning(g, bad, cfg)
        costs = report.accepted_costs
        assert all(b <= a for a, b in zip(costs, costs[1:]))


class TestReportText:
    def test_format(self):
        rng = np.random.default_rng(15)
        g, gt = build_scene(rng, sigma=0.05)
        init = perturb_values(g, gt, rng, 0.2)
        _, report = solve_with_pruning(g, init, SolverConfig(prune_rounds=1))
        text = report_to_text(report)
        lines = text.strip().splitlines()
        assert lines[0].startswith("status ")
        assert lines[1].startswith("initial_cost ")
        assert lines[2].startswith("final_cost ")
        assert any(line.startswith("pruned 0 ") for line in lines)
        iter_lines = [l for l in lines if l[0].isdigit()]
        assert len(iter_lines) == len(report.iterations)
        first = iter_lines[0].split()
        assert len(first) == 6 and first[4] in ("0", "1")

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SolverConfig(max_iterations=0)
        with pytest.raises(ValueError):
            SolverConfig(lambda_down=2.0)
        with pytest.raises(ValueError):
            SolverConfig(prune_rounds=-1)
