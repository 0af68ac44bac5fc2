"""Simulation tests: generation determinism, noise statistics, graph
construction per ablation mode, outlier injection, the ablation driver, and
the YAML config format."""

import dataclasses
import math

import numpy as np
import pytest

from dynaba import factor_graph as fg
from dynaba import geometry as geo
from dynaba import metrics, presets
from dynaba.geometry import Pose
from dynaba.simulation import (
    AblationMode,
    FovConfig,
    NoiseConfig,
    ObjectSpec,
    PartSpec,
    SimConfig,
    Waypoint,
    ablation_timing_csv,
    ablation_to_csv,
    build_graph,
    build_reprojection_graph,
    config_from_yaml,
    config_to_yaml,
    generate,
    ground_truth_values,
    initialization_noise_twists,
    inject_motion_outliers,
    motion_factor_ids,
    perturb_initialization,
    run_ablation,
    run_single_cell,
    segment_pairs_for,
    tracks_from_values,
    trajectory_from_values,
)

ZERO_NOISE = NoiseConfig(0.0, 0.0, 0.0)


def small_config(noise=None, n_frames=5, seed=3):
    """Always-visible box world with one two-part object."""
    obj = ObjectSpec((
        PartSpec(twist=(0.0, 0.0, 0.04, 0.05, 0.01, 0.0),
                 n_points=3, center=(3.0, 0.5, 0.3), extent=0.4),
        PartSpec(twist=(0.02, 0.0, 0.0, 0.04, -0.01, 0.01),
                 n_points=4, center=(3.5, -0.6, -0.2), extent=0.4),
    ))
    return SimConfig(
        name="small", n_frames=n_frames, seed=seed,
        waypoints=(Waypoint(0, (0.0, 0.0, 0.0)),
                   Waypoint(n_frames - 1, (0.1 * (n_frames - 1), 0.0, 0.0))),
        n_static=6, static_extent=((2.0, 6.0), (-2.0, 2.0), (-1.5, 1.5)),
        objects=(obj,), noise=noise or NoiseConfig(),
        fov=FovConfig(max_range=50.0, half_angle_deg=120.0))


def assert_pose_equal(a: Pose, b: Pose):
    assert np.array_equal(a.rotation.wxyz, b.rotation.wxyz)
    assert np.array_equal(a.translation, b.translation)


def dataset_measurements_equal(ds_a, ds_b) -> bool:
    if len(ds_a.measurements) != len(ds_b.measurements):
        return False
    for row_a, row_b in zip(ds_a.measurements, ds_b.measurements):
        if len(row_a) != len(row_b):
            return False
        for (vid_a, z_a), (vid_b, z_b) in zip(row_a, row_b):
            if vid_a != vid_b or not np.array_equal(z_a, z_b):
                return False
    return True


class TestGenerate:
    def test_same_seed_bitwise_identical(self):
        cfg = small_config()
        gt_a, ds_a = generate(cfg)
        gt_b, ds_b = generate(cfg)
        for pa, pb in zip(gt_a.camera_poses, gt_b.camera_poses):
            assert_pose_equal(pa, pb)
        assert np.array_equal(gt_a.static_points, gt_b.static_points)
        for key in gt_a.dynamic_points:
            assert np.array_equal(gt_a.dynamic_points[key],
                                  gt_b.dynamic_points[key])
        assert dataset_measurements_equal(ds_a, ds_b)
        assert ds_a.warnings == ds_b.warnings

    def test_adding_landmarks_keeps_existing_draws(self):
        # streams are keyed per entity, so growing the world must not
        # reshuffle what is already there
        cfg_small = small_config()
        cfg_big = dataclasses.replace(cfg_small, n_static=9)
        gt_a, _ = generate(cfg_small)
        gt_b, _ = generate(cfg_big)
        assert np.array_equal(gt_a.static_points, gt_b.static_points[:6])

    def test_noiseless_measurements_are_exact_camera_frame_points(self):
        cfg = small_config(noise=ZERO_NOISE)
        gt, ds = generate(cfg)
        vals = ground_truth_values(gt)
        n_checked = 0
        for k, row in enumerate(ds.measurements):
            inv = geo.inverse(gt.camera_poses[k])
            for vid, z in row:
                assert np.array_equal(z, geo.act(inv, vals.get(vid)))
                n_checked += 1
        assert n_checked == ds.measurement_count() > 0

    def test_noise_perturbs_measurements_at_the_configured_scale(self):
        cfg = small_config()
        gt, ds = generate(cfg)
        sigma = cfg.noise.measurement_sigma
        vals = ground_truth_values(gt)
        devs = []
        for k, row in enumerate(ds.measurements):
            inv = geo.inverse(gt.camera_poses[k])
            for vid, z in row:
                devs.append(z - geo.act(inv, vals.get(vid)))
        devs = np.array(devs)
        assert np.all(np.linalg.norm(devs, axis=1) < 6 * sigma * math.sqrt(3))
        assert np.std(devs) == pytest.approx(sigma, rel=0.25)

    def test_measurement_noise_sample_sigma(self):
        # one landmark per draw keeps the streams independent; pool 10k draws
        cfg = SimConfig(
            name="stats", n_frames=18, seed=11,
            waypoints=(Waypoint(0, (0.0, 0.0, 0.0)), Waypoint(17, (0.17, 0.0, 0.0))),
            n_static=556, static_extent=((1.0, 9.0), (-4.0, 4.0), (-4.0, 4.0)),
            noise=NoiseConfig(0.0, 0.0, 0.05), fov=FovConfig())
        gt, ds = generate(cfg)
        assert ds.measurement_count() == 556 * 18
        devs = []
        for k, row in enumerate(ds.measurements):
            inv = geo.inverse(gt.camera_poses[k])
            for vid, z in row:
                devs.append(z - geo.act(inv, gt.static_points[vid.index[0]]))
        devs = np.array(devs)
        for axis in range(3):
            assert np.std(devs[:, axis]) == pytest.approx(0.05, rel=0.05)

    def test_rigid_part_distances_constant(self):
        gt, _ = generate(small_config())
        for (l, r), pts in gt.dynamic_points.items():
            n = pts.shape[1]
            ref = np.linalg.norm(pts[0, :, None] - pts[0, None, :], axis=-1)
            for k in range(1, pts.shape[0]):
                d = np.linalg.norm(pts[k, :, None] - pts[k, None, :], axis=-1)
                assert np.max(np.abs(d - ref)) < 1e-12

    def test_dynamic_points_transported_by_the_constant_motion(self):
        gt, _ = generate(small_config())
        for (l, r), pts in gt.dynamic_points.items():
            motion = gt.motions[(l, r)]
            for k in range(pts.shape[0] - 1):
                for i in range(pts.shape[1]):
                    assert np.array_equal(pts[k + 1, i],
                                          geo.act(motion, pts[k, i]))

    def test_segment_lengths_match_first_frame_geometry(self):
        cfg = small_config()
        gt, _ = generate(cfg)
        for (l, r), pairs in gt.segment_pairs.items():
            assert pairs == segment_pairs_for(
                gt.dynamic_points[(l, r)].shape[1], cfg.rigidity_topology)
            for (i, j) in pairs:
                truth = np.linalg.norm(gt.dynamic_points[(l, r)][0, i]
                                       - gt.dynamic_points[(l, r)][0, j])
                assert gt.segment_lengths[(l, r, i, j)] == truth

    def test_explicit_static_positions(self):
        pts = ((3.0, 1.0, 0.5), (4.0, -1.0, 0.2), (5.0, 0.0, -0.5))
        cfg = dataclasses.replace(small_config(), static_positions=pts)
        assert cfg.n_static == 3
        gt, _ = generate(cfg)
        assert np.array_equal(gt.static_points, np.array(pts))

    def test_fov_mask_matches_geometry(self):
        cfg = presets.group1()
        gt, ds = generate(cfg)
        cos_lim = math.cos(math.radians(cfg.fov.half_angle_deg))
        for k, pose in enumerate(gt.camera_poses):
            inv = geo.inverse(pose)
            for i in range(cfg.n_static):
                pc = geo.act(inv, gt.static_points[i])
                rng = np.linalg.norm(pc)
                inside = rng <= cfg.fov.max_range and pc[0] >= cos_lim * rng
                assert ds.static_visible[k, i] == inside

    def test_empty_frame_warning_names_the_frame(self):
        # statics cluster at the start; the camera drives past them
        cfg = SimConfig(
            name="empties", n_frames=4, seed=0,
            waypoints=(Waypoint(0, (0.0, 0.0, 0.0)), Waypoint(3, (9.0, 0.0, 0.0))),
            static_positions=((1.0, 0.2, 0.0), (1.3, -0.2, 0.1)),
            noise=NoiseConfig(), fov=FovConfig(max_range=2.0, half_angle_deg=60.0))
        _, ds = generate(cfg)
        assert ds.warnings
        assert any("frame 3" in w for w in ds.warnings)

    def test_group_presets_visibility(self):
        for name, lo_static, lo_dyn in (("group1", 8, 12), ("group2", 8, 12)):
            cfg = presets.get_preset(name)
            _, ds = generate(cfg)
            static_counts = ds.static_visible.sum(axis=1)
            dyn_counts = sum(m.sum(axis=1) for m in ds.dynamic_visible.values())
            assert static_counts.min() == static_counts.max() == lo_static, name
            assert dyn_counts.min() == dyn_counts.max() == lo_dyn, name
            assert not ds.warnings

    def test_group1_visibility_across_seeds(self):
        # the corridor layout is fixture geometry, so the counts are a
        # structural property, not seed luck
        base = presets.group1()
        for seed in range(20):
            _, ds = generate(dataclasses.replace(base, seed=seed))
            assert set(ds.static_visible.sum(axis=1)) == {8}
            dyn = sum(m.sum(axis=1) for m in ds.dynamic_visible.values())
            assert set(dyn) == {12}

    def test_default_preset_landmark_ratio(self):
        cfg = presets.default()
        assert cfg.landmark_ratio() == pytest.approx(cfg.ratio_target, rel=0.1)

    def test_unknown_preset_lists_names(self):
        with pytest.raises(KeyError, match="group1"):
            presets.get_preset("nope")


class TestPerturbInitialization:
    def test_zero_noise_reproduces_truth_bitwise(self):
        cfg = small_config(noise=ZERO_NOISE)
        gt, ds = generate(cfg)
        init = perturb_initialization(gt, cfg, ds)
        truth = ground_truth_values(gt)
        for vid, value in truth.items():
            if vid.kind == fg.VarKind.OBJECT_MOTION:
                continue
            got = init.get(vid)
            if vid.kind == fg.VarKind.CAMERA_POSE:
                assert_pose_equal(got, value)
            elif vid.kind == fg.VarKind.SEGMENT_LENGTH:
                assert got == value
            else:
                assert np.array_equal(got, value)

    def test_motions_start_at_identity_even_without_noise(self):
        cfg = small_config(noise=ZERO_NOISE)
        gt, ds = generate(cfg)
        init = perturb_initialization(gt, cfg, ds)
        n_motions = 0
        for vid, value in init.items():
            if vid.kind == fg.VarKind.OBJECT_MOTION:
                assert_pose_equal(value, Pose.identity())
                n_motions += 1
        assert n_motions == len(gt.dynamic_points) * (cfg.n_frames - 1)

    def test_first_pose_anchors_the_gauge(self):
        cfg = small_config()
        gt, ds = generate(cfg)
        init = perturb_initialization(gt, cfg, ds)
        assert_pose_equal(init.get(fg.camera(0)), gt.camera_poses[0])
        later = init.get(fg.camera(cfg.n_frames - 1))
        assert not np.array_equal(later.translation,
                                  gt.camera_poses[-1].translation)

    def test_dataset_regenerated_when_not_supplied(self):
        cfg = small_config()
        gt, ds = generate(cfg)
        with_ds = perturb_initialization(gt, cfg, ds)
        without = perturb_initialization(gt, cfg)
        assert len(with_ds) == len(without)
        for vid, value in with_ds.items():
            other = without.get(vid)
            if vid.kind in (fg.VarKind.CAMERA_POSE, fg.VarKind.OBJECT_MOTION):
                assert_pose_equal(value, other)
            elif vid.kind == fg.VarKind.SEGMENT_LENGTH:
                assert value == other
            else:
                assert np.array_equal(value, other)

    def test_points_back_projected_through_initial_poses(self):
        cfg = small_config()
        gt, ds = generate(cfg)
        init = perturb_initialization(gt, cfg, ds)
        first = {}
        for k, row in enumerate(ds.measurements):
            for vid, z in row:
                first.setdefault(vid, (k, z))
        for vid, (k, z) in first.items():
            if vid.kind == fg.VarKind.STATIC_POINT:
                expect = geo.act(init.get(fg.camera(k)), z)
                assert np.array_equal(init.get(vid), expect)

    def test_invisible_stretch_is_bridged(self):
        # a point orbiting the origin leaves the cone at frame 1 and returns
        # at frame 2; motion modes need a value for the hidden frame
        part = PartSpec(twist=(0.0, 0.0, 2.8, 0.0, 0.0, 0.0),
                        shape=((2.0, 0.0, 0.0),))
        cfg = SimConfig(
            name="orbit", n_frames=3, seed=1,
            waypoints=(Waypoint(0, (0.0, 0.0, 0.0)), Waypoint(2, (0.0, 0.0, 0.0))),
            static_positions=((1.0, 0.0, 0.0), (1.5, 0.3, 0.0), (1.2, -0.3, 0.2)),
            objects=(ObjectSpec((part,)),), noise=NoiseConfig(),
            fov=FovConfig(max_range=10.0, half_angle_deg=50.0))
        gt, ds = generate(cfg)
        vis = ds.dynamic_visible[(0, 0)][:, 0]
        assert list(vis) == [True, False, True]
        init = perturb_initialization(gt, cfg, ds)
        seen = [init.get(fg.dynamic_point(0, 0, 0, k)) for k in range(3)]
        assert all(v is not None for v in seen)
        # identity motion carries the last estimate across the gap
        assert np.array_equal(seen[0], seen[1])
        graph = build_graph(ds, init, AblationMode.FULL)
        assert fg.dynamic_point(0, 0, 0, 1) in graph.variables


@pytest.fixture(scope="module")
def scene():
    cfg = small_config()
    gt, ds = generate(cfg)
    init = perturb_initialization(gt, cfg, ds)
    return cfg, gt, ds, init


class TestBuildGraph:
    def kind_count(self, graph, kind):
        return sum(1 for vid in graph.variables if vid.kind == kind)

    def test_before_ba_has_no_graph(self, scene):
        _, _, ds, init = scene
        with pytest.raises(ValueError, match="BeforeBA"):
            build_graph(ds, init, AblationMode.BEFORE_BA)

    def test_dynamic_mode_needs_objects(self):
        cfg = SimConfig(
            name="static-world", n_frames=3, seed=0,
            waypoints=(Waypoint(0, (0.0, 0.0, 0.0)), Waypoint(2, (0.2, 0.0, 0.0))),
            n_static=5, static_extent=((1.0, 5.0), (-2.0, 2.0), (-1.0, 1.0)),
            noise=NoiseConfig(), fov=FovConfig())
        gt, ds = generate(cfg)
        init = perturb_initialization(gt, cfg, ds)
        build_graph(ds, init, AblationMode.STATIC_ONLY)  # fine
        with pytest.raises(ValueError, match="Full"):
            build_graph(ds, init, AblationMode.FULL)

    def test_static_only_contents(self, scene):
        _, _, ds, init = scene
        graph = build_graph(ds, init, AblationMode.STATIC_ONLY)
        assert self.kind_count(graph, fg.VarKind.DYNAMIC_POINT) == 0
        assert self.kind_count(graph, fg.VarKind.SEGMENT_LENGTH) == 0
        assert self.kind_count(graph, fg.VarKind.OBJECT_MOTION) == 0
        n_static_obs = sum(1 for row in ds.measurements for vid, _ in row
                           if vid.kind == fg.VarKind.STATIC_POINT)
        assert len(graph.factors) == n_static_obs
        assert fg.camera(0) in graph.held

    def test_no_motion_contents(self, scene):
        _, _, ds, init = scene
        graph = build_graph(ds, init, AblationMode.NO_MOTION)
        assert self.kind_count(graph, fg.VarKind.SEGMENT_LENGTH) > 0
        assert self.kind_count(graph, fg.VarKind.OBJECT_MOTION) == 0
        # without motion factors there is nothing to say about unseen frames
        for vid in graph.variables:
            if vid.kind == fg.VarKind.DYNAMIC_POINT:
                l, r, i, k = vid.index
                assert ds.dynamic_visible[(l, r)][k, i]

    def test_no_rigidity_contents(self, scene):
        _, _, ds, init = scene
        graph = build_graph(ds, init, AblationMode.NO_RIGIDITY)
        assert self.kind_count(graph, fg.VarKind.SEGMENT_LENGTH) == 0
        assert self.kind_count(graph, fg.VarKind.OBJECT_MOTION) > 0

    def test_full_factor_count_oracle(self):
        cfg = presets.group1()
        gt, ds = generate(cfg)
        init = perturb_initialization(gt, cfg, ds)
        graph = build_graph(ds, init, AblationMode.FULL)

        n_static_obs = int(ds.static_visible.sum())
        n_dyn_obs = sum(int(m.sum()) for m in ds.dynamic_visible.values())
        n_pairs = sum(len(pairs) for pairs in gt.segment_pairs.values())
        n_points = cfg.n_dynamic_points()
        expected = (n_static_obs + n_dyn_obs + n_pairs * cfg.n_frames
                    + n_points * (cfg.n_frames - 1))
        assert len(graph.factors) == expected

        by_type = {}
        for f in graph.factors:
            by_type[type(f).__name__] = by_type.get(type(f).__name__, 0) + 1
        assert by_type["ObservationFactor"] == n_static_obs + n_dyn_obs
        assert by_type["RigidityFactor"] == n_pairs * cfg.n_frames
        assert by_type["MotionFactor"] == n_points * (cfg.n_frames - 1)

    def test_reprojection_graph_is_observations_only(self, scene):
        _, _, ds, init = scene
        graph = build_reprojection_graph(ds, init)
        assert all(isinstance(f, fg.ObservationFactor) for f in graph.factors)
        assert len(graph.factors) == ds.measurement_count()


class TestNoiseTwists:
    def test_per_axis_sample_sigma(self):
        cfg = small_config(noise=NoiseConfig(0.05, 2.9, 0.05))
        twists = initialization_noise_twists(cfg, 10_000)
        assert twists.shape == (10_000, 6)
        for axis in range(3):
            assert np.std(twists[:, axis]) == pytest.approx(
                math.radians(2.9), rel=0.05)
            assert np.std(twists[:, 3 + axis]) == pytest.approx(0.05, rel=0.05)

    def test_zero_sigma_rows_are_zero(self):
        cfg = small_config(noise=ZERO_NOISE)
        assert not initialization_noise_twists(cfg, 64).any()


class TestOutlierInjection:
    def test_expected_keys_cover_adjacent_motion_steps(self):
        cfg = small_config(n_frames=6)
        gt, ds = generate(cfg)
        corrupted, expected, _ = inject_motion_outliers(gt, ds, 3, 1.0, seed=5)
        assert expected
        n = cfg.n_frames
        for (l, r, i, k) in expected:
            assert (l, r) in gt.dynamic_points
            assert 0 <= k < n - 1

    def test_only_chosen_measurements_change(self):
        cfg = small_config(n_frames=6)
        gt, ds = generate(cfg)
        corrupted, expected, events = inject_motion_outliers(gt, ds, 2, 1.0,
                                                             seed=5)
        assert len(events) == 2
        for k, (row_a, row_b) in enumerate(zip(ds.measurements,
                                               corrupted.measurements)):
            for (vid_a, z_a), (vid_b, z_b) in zip(row_a, row_b):
                assert vid_a == vid_b
                if vid_a.index in events \
                        and vid_a.kind == fg.VarKind.DYNAMIC_POINT:
                    # rotation to camera frame preserves the offset norm
                    assert np.linalg.norm(z_b - z_a) == pytest.approx(1.0)
                else:
                    assert np.array_equal(z_a, z_b)

    def test_expected_keys_are_the_steps_touching_each_event(self):
        cfg = small_config(n_frames=6)
        gt, ds = generate(cfg)
        _, expected, events = inject_motion_outliers(gt, ds, 3, 1.0, seed=8)
        want = set()
        for (l, r, i, k) in events:
            if k > 0:
                want.add((l, r, i, k - 1))
            if k < cfg.n_frames - 1:
                want.add((l, r, i, k))
        assert expected == want

    def test_injection_is_deterministic(self):
        cfg = small_config(n_frames=6)
        gt, ds = generate(cfg)
        a, exp_a, ev_a = inject_motion_outliers(gt, ds, 3, 1.5, seed=2)
        b, exp_b, ev_b = inject_motion_outliers(gt, ds, 3, 1.5, seed=2)
        assert exp_a == exp_b
        assert ev_a == ev_b
        assert dataset_measurements_equal(a, b)

    def test_motion_factor_ids_select_the_named_steps(self):
        cfg = small_config(n_frames=6)
        gt, ds = generate(cfg)
        init = perturb_initialization(gt, cfg, ds)
        graph = build_graph(ds, init, AblationMode.FULL)
        keys = {(0, 0, 0, 2), (0, 1, 1, 4)}
        ids = motion_factor_ids(graph, keys)
        assert len(ids) == 2
        for idx in ids:
            factor = graph.factors[idx]
            assert isinstance(factor, fg.MotionFactor)
            assert factor.point_prev.index in keys


class TestAblationDriver:
    def test_before_ba_row_scores_the_raw_initialization(self):
        cfg = small_config()
        cell = run_single_cell(cfg, AblationMode.BEFORE_BA, seed=7)
        gt, ds = generate(dataclasses.replace(cfg, seed=7))
        init = perturb_initialization(gt, dataclasses.replace(cfg, seed=7), ds)
        traj = trajectory_from_values(init)
        gt_traj = gt.trajectory()
        assert cell.ate_m == metrics.ate(traj, gt_traj)
        rot, trans = metrics.rpe(traj, gt_traj)
        assert (cell.rpe_rot_deg, cell.rpe_trans_m) == (rot, trans)
        assert cell.status == "Initialization"
        assert cell.iterations == 0
        dyn = metrics.dynamic_point_ate(tracks_from_values(init), gt.tracks(),
                                        metrics.align(traj, gt_traj))
        assert cell.dynamic_ate_m == dyn

    def test_static_only_reports_no_dynamic_ate(self):
        cell = run_single_cell(small_config(), AblationMode.STATIC_ONLY, seed=1)
        assert cell.dynamic_ate_m is None
        assert cell.status == "Converged"

    def test_worker_pools_agree(self):
        cfg = small_config()
        modes = (AblationMode.BEFORE_BA, AblationMode.FULL)
        res_1 = run_ablation(cfg, modes, range(2), workers=1)
        res_2 = run_ablation(cfg, modes, range(2), workers=2)
        assert len(res_1.cells) == len(res_2.cells) == 4
        for a, b in zip(res_1.cells, res_2.cells):
            assert (a.group, a.mode, a.seed, a.status) == \
                (b.group, b.mode, b.seed, b.status)
            assert a.ate_m == b.ate_m
            assert a.rpe_rot_deg == b.rpe_rot_deg
            assert a.rpe_trans_m == b.rpe_trans_m
            assert a.dynamic_ate_m == b.dynamic_ate_m
            assert a.iterations == b.iterations

    def test_csv_is_deterministic_and_skips_missing_columns(self):
        cfg = small_config()
        modes = (AblationMode.BEFORE_BA, AblationMode.STATIC_ONLY,
                 AblationMode.FULL)
        res_a = run_ablation(cfg, modes, range(2))
        res_b = run_ablation(cfg, modes, range(2))
        csv_a, csv_b = ablation_to_csv(res_a), ablation_to_csv(res_b)
        assert csv_a == csv_b
        lines = csv_a.strip().split("\n")
        assert lines[0].startswith("group,mode,seeds,failed,ate_cm_mean")
        assert len(lines) == 1 + len(modes)
        static_row = lines[2].split(",")
        assert static_row[1] == "StaticOnly"
        assert static_row[-1] == static_row[-2] == ""  # no dynamic columns
        full_row = lines[3].split(",")
        assert float(full_row[4]) > 0.0  # centimeters, nonzero

    def test_timing_csv_skips_before_ba(self):
        cfg = small_config()
        res = run_ablation(cfg, (AblationMode.BEFORE_BA, AblationMode.FULL),
                           range(1))
        timing = ablation_timing_csv(res).strip().split("\n")
        assert timing[0] == "group,mode,cells,solve_ms_mean,ms_per_iteration_mean"
        assert len(timing) == 2
        assert timing[1].split(",")[1] == "Full"

    def test_timing_baseline_row_comes_first_and_stays_out_of_results(self):
        cfg = small_config()
        res = run_ablation(cfg, (AblationMode.FULL,), range(2),
                           timing_baseline=True)
        assert len(res.baseline_cells) == 2
        assert all(c.mode == "Reprojection" for c in res.baseline_cells)
        timing = ablation_timing_csv(res).strip().split("\n")
        assert [row.split(",")[1] for row in timing[1:]] == \
            ["Reprojection", "Full"]
        results = ablation_to_csv(res).strip().split("\n")
        assert all(row.split(",")[1] != "Reprojection" for row in results[1:])

    def test_baseline_cells_match_direct_reprojection_solve(self):
        from dynaba.simulation import run_reprojection_cell
        cfg = small_config()
        res = run_ablation(cfg, (AblationMode.FULL,), range(1),
                           timing_baseline=True)
        direct = run_reprojection_cell(cfg, 0)
        cell = res.baseline_cells[0]
        assert cell.ate_m == direct.ate_m
        assert cell.iterations == direct.iterations

    def test_mode_strings_accepted(self):
        res = run_ablation(small_config(), ("BeforeBA",), range(1))
        assert res.cells[0].mode == "BeforeBA"

    def test_empty_grid_rejected(self):
        with pytest.raises(ValueError, match="at least one"):
            run_ablation(small_config(), (), range(2))


class TestYamlConfig:
    def test_round_trip_all_presets(self):
        for name in presets.PRESET_NAMES:
            cfg = presets.get_preset(name)
            assert config_from_yaml(config_to_yaml(cfg)) == cfg, name

    def test_missing_noise_field_is_named(self):
        cfg = presets.default()
        doc = config_to_yaml(cfg)
        broken = doc.replace("  measurement_sigma: 0.05\n", "")
        with pytest.raises(ValueError, match="noise.measurement_sigma"):
            config_from_yaml(broken)

    def test_unknown_key_is_named(self):
        doc = config_to_yaml(presets.default())
        with pytest.raises(ValueError, match="turbo"):
            config_from_yaml(doc + "turbo: 9\n")

    def test_positions_exclude_count(self):
        doc = """
n_frames: 2
camera_path:
  - {frame: 0, position: [0, 0, 0]}
  - {frame: 1, position: [1, 0, 0]}
static:
  count: 3
  positions: [[1, 0, 0]]
noise: {init_translation_sigma: 0, init_rotation_sigma_deg: 0, measurement_sigma: 0}
fov: {max_range: 10, half_angle_deg: 90}
"""
        with pytest.raises(ValueError, match="positions"):
            config_from_yaml(doc)

    def test_top_level_must_be_mapping(self):
        with pytest.raises(ValueError, match="mapping"):
            config_from_yaml("- 1\n- 2\n")

    def test_minimal_document(self):
        doc = """
n_frames: 3
camera_path:
  - {frame: 0, position: [0, 0, 0]}
  - {frame: 2, position: [0.4, 0, 0]}
static:
  count: 4
  extent: [[1, 5], [-2, 2], [-1, 1]]
noise:
  init_translation_sigma: 0.01
  init_rotation_sigma_deg: 0.5
  measurement_sigma: 0.02
fov: {max_range: 20, half_angle_deg: 80}
"""
        cfg = config_from_yaml(doc)
        assert cfg.n_frames == 3
        assert cfg.n_static == 4
        assert cfg.objects == ()
        gt, ds = generate(cfg)
        assert ds.measurement_count() > 0
