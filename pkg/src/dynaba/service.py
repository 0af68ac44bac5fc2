"""HTTP service exposing simulation, solving, ablation, and evaluation.

Handlers work on text payloads (YAML configs, graph/values text, TUM
trajectories) and return text artifacts, so all file I/O stays on the caller's
side.  The ``api_*`` functions are plain callables usable in-process; the
FastAPI app wraps them, mapping UsageError to 400 and anything else to 500.
"""

from __future__ import annotations

import dataclasses

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from . import __version__
from . import factor_graph as fg
from . import metrics, simulation
from .solver import SolverConfig, report_to_text, solve_with_pruning


class UsageError(ValueError):
    """The request content is invalid (unparsable file, unknown name)."""


# ---------------------------------------------------------------------------
# request / response models

class SolverOptions(BaseModel):
    max_iterations: int = 100
    initial_lambda: float = 1e-4
    cost_tolerance: float = 1e-8
    step_tolerance: float = 1e-10
    prune_rounds: int = 0
    prune_rigidity_chi2: float = 3.84
    prune_motion_chi2: float = 7.81

    def to_config(self) -> SolverConfig:
        try:
            return SolverConfig(
                max_iterations=self.max_iterations,
                initial_lambda=self.initial_lambda,
                cost_tolerance=self.cost_tolerance,
                step_tolerance=self.step_tolerance,
                prune_rounds=self.prune_rounds,
                prune_rigidity_chi2=self.prune_rigidity_chi2,
                prune_motion_chi2=self.prune_motion_chi2,
            )
        except ValueError as exc:
            raise UsageError(str(exc)) from exc


class SimulateRequest(BaseModel):
    config_yaml: str
    seed: int | None = None  # overrides the config's seed when given


class SimulateResponse(BaseModel):
    name: str
    n_frames: int
    seed: int
    measurement_count: int
    landmark_ratio: float
    warnings: list[str]
    files: dict[str, str]  # filename -> content, in emission order


class SolveRequest(BaseModel):
    graph_text: str
    init_text: str
    solver: SolverOptions = SolverOptions()


class SolveResponse(BaseModel):
    status: str
    initial_cost: float
    final_cost: float
    iterations: int
    pruned: list[list[int]]
    diagnostics: list[str]
    files: dict[str, str]


class AblateRequest(BaseModel):
    config_yaml: str
    seeds: list[int]
    modes: list[str]
    workers: int = 1
    timing_baseline: bool = True
    solver: SolverOptions = SolverOptions()


class CellModel(BaseModel):
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


class AblateResponse(BaseModel):
    group: str
    n_cells: int
    n_failed: int
    cells: list[CellModel]
    files: dict[str, str]


class EvalRequest(BaseModel):
    est_tum: str
    gt_tum: str
    delta: int = 1


class EvalResponse(BaseModel):
    ate_m: float
    rpe_rot_deg: float
    rpe_trans_m: float
    alignment_fallback: bool
    report_text: str
    csv_row: str


# ---------------------------------------------------------------------------
# handlers

def _parse_config(config_yaml: str) -> simulation.SimConfig:
    try:
        return simulation.config_from_yaml(config_yaml)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def api_simulate(req: SimulateRequest) -> SimulateResponse:
    config = _parse_config(req.config_yaml)
    if req.seed is not None:
        config = dataclasses.replace(config, seed=req.seed)
    gt, dataset = simulation.generate(config)
    init = simulation.perturb_initialization(gt, config, dataset)
    mode = (simulation.AblationMode.FULL if config.objects
            else simulation.AblationMode.STATIC_ONLY)
    graph = simulation.build_graph(dataset, init, mode)
    files = {
        "config.yaml": simulation.config_to_yaml(config),
        "graph.txt": fg.graph_to_text(graph),
        "init_values.txt": fg.values_to_text(init),
        "gt_values.txt": fg.values_to_text(simulation.ground_truth_values(gt)),
        "gt_camera.tum": metrics.trajectory_to_tum(gt.trajectory()),
    }
    return SimulateResponse(
        name=config.name, n_frames=config.n_frames, seed=config.seed,
        measurement_count=dataset.measurement_count(),
        landmark_ratio=config.landmark_ratio() if config.objects else 0.0,
        warnings=list(dataset.warnings), files=files)


def api_solve(req: SolveRequest) -> SolveResponse:
    try:
        graph = fg.graph_from_text(req.graph_text)
        init = fg.values_from_text(req.init_text)
        graph.check_values(init)
    except (ValueError, fg.GraphIntegrityError) as exc:
        raise UsageError(str(exc)) from exc
    est, report = solve_with_pruning(graph, init, req.solver.to_config())
    traj = simulation.trajectory_from_values(est)
    files = {
        "values.txt": fg.values_to_text(est),
        "report.txt": report_to_text(report, include_timing=False),
        "trajectory.tum": metrics.trajectory_to_tum(traj),
    }
    return SolveResponse(
        status=report.status.value, initial_cost=report.initial_cost,
        final_cost=report.final_cost, iterations=len(report.iterations),
        pruned=[list(ids) for ids in report.pruned],
        diagnostics=list(report.diagnostics), files=files)


def api_ablate(req: AblateRequest) -> AblateResponse:
    config = _parse_config(req.config_yaml)
    try:
        modes = tuple(simulation.AblationMode(m) for m in req.modes)
    except ValueError as exc:
        raise UsageError(f"unknown mode: {exc}") from exc
    if not req.seeds:
        raise UsageError("at least one seed is required")
    if req.workers < 1:
        raise UsageError("workers must be >= 1")
    result = simulation.run_ablation(config, modes, req.seeds,
                                     req.solver.to_config(),
                                     workers=req.workers,
                                     timing_baseline=req.timing_baseline)
    files = {
        "results.csv": simulation.ablation_to_csv(result),
        "timing.csv": simulation.ablation_timing_csv(result),
    }
    cells = [CellModel(group=c.group, mode=c.mode, seed=c.seed, status=c.status,
                       ate_m=c.ate_m, rpe_rot_deg=c.rpe_rot_deg,
                       rpe_trans_m=c.rpe_trans_m, dynamic_ate_m=c.dynamic_ate_m,
                       iterations=c.iterations, solve_seconds=c.solve_seconds)
             for c in result.cells]
    return AblateResponse(group=result.group, n_cells=len(result.cells),
                          n_failed=result.n_failed, cells=cells, files=files)


def api_eval(req: EvalRequest) -> EvalResponse:
    try:
        est = metrics.trajectory_from_tum(req.est_tum)
        gt = metrics.trajectory_from_tum(req.gt_tum)
        report = metrics.evaluate(est, gt, delta=req.delta)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return EvalResponse(
        ate_m=report.ate_rmse, rpe_rot_deg=report.rpe_rot_rmse,
        rpe_trans_m=report.rpe_trans_rmse,
        alignment_fallback=report.alignment_fallback,
        report_text=metrics.report_to_text(report),
        csv_row=metrics.report_to_csv_row(report))


# ---------------------------------------------------------------------------
# HTTP layer

app = FastAPI(title="dynaba", version=__version__)


def _run(handler, request):
    try:
        return handler(request)
    except UsageError as exc:
        raise HTTPException(status_code=400, detail=str(exc)) from exc
    except Exception as exc:  # solver/runtime failures
        raise HTTPException(status_code=500, detail=str(exc)) from exc


@app.get("/health")
def health() -> dict:
    return {"status": "ok", "version": __version__}


@app.post("/simulate")
def simulate_endpoint(req: SimulateRequest) -> SimulateResponse:
    return _run(api_simulate, req)


@app.post("/solve")
def solve_endpoint(req: SolveRequest) -> SolveResponse:
    return _run(api_solve, req)


@app.post("/ablate")
def ablate_endpoint(req: AblateRequest) -> AblateResponse:
    return _run(api_ablate, req)


@app.post("/eval")
def eval_endpoint(req: EvalRequest) -> EvalResponse:
    return _run(api_eval, req)
