"""Command-line interface: simulate | solve | ablate | eval | serve.

Each command is a thin client over the service handlers: it assembles a
request from files or presets, executes it in-process (or against a running
server when --server is given), and writes the returned artifacts.  Commands
with an output directory first write a plain-text manifest naming every file
they are about to emit, then the files, then append the elapsed wall time to
the manifest.  Results are deterministic for fixed (config, seeds); the only
non-reproducible bytes are the manifest timing lines and timing.csv.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure,
3 ablation finished but some cells failed.
"""

from __future__ import annotations

import argparse
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from . import __version__, metrics, presets, simulation
from .service import (
    AblateRequest,
    AblateResponse,
    EvalRequest,
    EvalResponse,
    SimulateRequest,
    SimulateResponse,
    SolveRequest,
    SolveResponse,
    SolverOptions,
    UsageError,
    api_ablate,
    api_eval,
    api_simulate,
    api_solve,
)

_MODE_NAMES = tuple(m.value for m in simulation.AblationMode)

_ROUTES = {
    "/simulate": (api_simulate, SimulateResponse),
    "/solve": (api_solve, SolveResponse),
    "/ablate": (api_ablate, AblateResponse),
    "/eval": (api_eval, EvalResponse),
}


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems through the exit-code contract."""

    def error(self, message):
        raise UsageError(message)


def _execute(route: str, request, server: str | None):
    handler, response_model = _ROUTES[route]
    if server is None:
        return handler(request)
    import httpx

    resp = httpx.post(server.rstrip("/") + route,
                      json=request.model_dump(), timeout=600.0)
    if resp.status_code == 400:
        raise UsageError(resp.json().get("detail", resp.text))
    if resp.status_code != 200:
        raise RuntimeError(f"server error {resp.status_code}: {resp.text}")
    return response_model.model_validate(resp.json())


# ---------------------------------------------------------------------------
# small input helpers

def _read_text(path: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc


def _config_text(args) -> tuple[str, str]:
    """Returns (yaml text, description of where it came from)."""
    if args.preset is not None:
        try:
            config = presets.get_preset(args.preset)
        except KeyError as exc:
            raise UsageError(str(exc.args[0])) from exc
        return simulation.config_to_yaml(config), f"preset:{args.preset}"
    return _read_text(args.config), args.config


def parse_seeds(text: str) -> list[int]:
    """'4' -> [4]; '0:10' -> [0..9]; '1,5,9' -> [1, 5, 9]."""
    try:
        if ":" in text:
            lo, hi = text.split(":")
            seeds = list(range(int(lo), int(hi)))
        else:
            seeds = [int(s) for s in text.split(",")]
    except ValueError as exc:
        raise UsageError(f"cannot parse seeds '{text}': use N, N:M, or a "
                         "comma-separated list") from exc
    if not seeds:
        raise UsageError(f"seed set '{text}' is empty")
    return seeds


def parse_modes(text: str) -> list[str]:
    if text == "all":
        return list(_MODE_NAMES)
    modes = [m.strip() for m in text.split(",") if m.strip()]
    for m in modes:
        if m not in _MODE_NAMES:
            raise UsageError(f"unknown mode '{m}'; choose from "
                             + ", ".join(_MODE_NAMES) + ", or 'all'")
    if not modes:
        raise UsageError("mode list is empty")
    return modes


def _solver_options(args) -> SolverOptions:
    return SolverOptions(
        max_iterations=args.max_iterations,
        initial_lambda=args.initial_lambda,
        cost_tolerance=args.cost_tolerance,
        step_tolerance=args.step_tolerance,
        prune_rounds=args.prune_rounds,
        prune_rigidity_chi2=args.prune_rigidity_chi2,
        prune_motion_chi2=args.prune_motion_chi2,
    )


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("solver")
    g.add_argument("--max-iterations", type=int, default=100)
    g.add_argument("--initial-lambda", type=float, default=1e-4)
    g.add_argument("--cost-tolerance", type=float, default=1e-8)
    g.add_argument("--step-tolerance", type=float, default=1e-10)
    g.add_argument("--prune-rounds", type=int, default=0)
    g.add_argument("--prune-rigidity-chi2", type=float, default=3.84)
    g.add_argument("--prune-motion-chi2", type=float, default=7.81)


# ---------------------------------------------------------------------------
# manifest

class Manifest:
    """Run record written to the output directory before any result file."""

    def __init__(self, out_dir: Path, command: str, fields: list[tuple[str, str]],
                 files: list[str]):
        self.path = out_dir / "manifest.txt"
        self.started = time.perf_counter()
        stamp = datetime.now(timezone.utc).isoformat()
        lines = [f"tool dynaba {__version__}", f"command {command}"]
        lines += [f"{key} {value}" for key, value in fields]
        lines.append(f"started {stamp}")
        lines += [f"file {name}" for name in files]
        out_dir.mkdir(parents=True, exist_ok=True)
        self.path.write_text("\n".join(lines) + "\n")

    def finish(self) -> None:
        elapsed = time.perf_counter() - self.started
        with self.path.open("a") as fh:
            fh.write(f"elapsed_seconds {elapsed:.3f}\n")


def _write_files(out_dir: Path, files: dict) -> None:
    for name, content in files.items():
        (out_dir / name).write_text(content)


# ---------------------------------------------------------------------------
# commands

def cmd_simulate(args) -> int:
    config_yaml, origin = _config_text(args)
    request = SimulateRequest(config_yaml=config_yaml, seed=args.seed)
    response = _execute("/simulate", request, args.server)
    out = Path(args.out)
    manifest = Manifest(out, "simulate",
                        [("config", origin), ("seeds", str(response.seed)),
                         ("out", str(out))],
                        list(response.files))
    _write_files(out, response.files)
    manifest.finish()
    for w in response.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"simulated {response.name}: {response.n_frames} frames, "
          f"{response.measurement_count} measurements -> {out}")
    return 0


def cmd_solve(args) -> int:
    request = SolveRequest(graph_text=_read_text(args.graph),
                           init_text=_read_text(args.init),
                           solver=_solver_options(args))
    response = _execute("/solve", request, args.server)
    out = Path(args.out)
    manifest = Manifest(out, "solve",
                        [("graph", args.graph), ("init", args.init),
                         ("out", str(out))],
                        list(response.files))
    _write_files(out, response.files)
    manifest.finish()
    print(f"status {response.status}")
    print(f"final_cost {response.final_cost:.17g}")
    print(f"iterations {response.iterations}")
    for rnd, ids in enumerate(response.pruned):
        print(f"pruned {rnd} {','.join(map(str, ids)) if ids else '-'}")
    for msg in response.diagnostics:
        print(f"diagnostic {msg}", file=sys.stderr)
    return 0 if response.status != "Degenerate" else 2


def cmd_ablate(args) -> int:
    config_yaml, origin = _config_text(args)
    seeds = parse_seeds(args.seeds)
    modes = parse_modes(args.modes)
    request = AblateRequest(config_yaml=config_yaml, seeds=seeds, modes=modes,
                            workers=args.workers,
                            timing_baseline=not args.no_timing_baseline,
                            solver=_solver_options(args))
    response = _execute("/ablate", request, args.server)
    out = Path(args.out)
    manifest = Manifest(out, "ablate",
                        [("config", origin),
                         ("seeds", " ".join(map(str, seeds))),
                         ("modes", " ".join(modes)), ("out", str(out))],
                        list(response.files))
    _write_files(out, response.files)
    manifest.finish()
    print(response.files["results.csv"], end="")
    if response.n_failed:
        print(f"{response.n_failed} of {response.n_cells} cells failed",
              file=sys.stderr)
        return 3
    return 0


def cmd_eval(args) -> int:
    request = EvalRequest(est_tum=_read_text(args.est),
                          gt_tum=_read_text(args.gt), delta=args.delta)
    response = _execute("/eval", request, args.server)
    print(response.report_text, end="")
    if args.csv is not None:
        Path(args.csv).write_text(metrics.CSV_HEADER + "\n"
                                  + response.csv_row + "\n")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import app
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


# ---------------------------------------------------------------------------
# parser assembly

def build_parser() -> _Parser:
    parser = _Parser(prog="dynaba",
                     description="Bundle adjustment for scenes with "
                                 "articulated dynamic objects.")
    parser.add_argument("--version", action="version",
                        version=f"dynaba {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_source(p):
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--config", help="simulation config YAML file")
        src.add_argument("--preset", help="built-in config name: "
                         + ", ".join(presets.PRESET_NAMES))

    def add_server(p):
        p.add_argument("--server", default=None,
                       help="base URL of a running service; default runs "
                            "in-process")

    p = sub.add_parser("simulate", help="generate a dataset and its "
                                        "ground truth")
    add_config_source(p)
    p.add_argument("--seed", type=int, default=None,
                   help="override the config's seed")
    p.add_argument("--out", required=True, help="output directory")
    add_server(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("solve", help="optimize a factor graph from files")
    p.add_argument("--graph", required=True, help="factor graph text file")
    p.add_argument("--init", required=True, help="initial values text file")
    p.add_argument("--out", required=True, help="output directory")
    _add_solver_flags(p)
    add_server(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("ablate", help="run the mode-by-seed study and "
                                      "write result tables")
    add_config_source(p)
    p.add_argument("--seeds", required=True,
                   help="N, N:M (half-open), or comma-separated list")
    p.add_argument("--modes", default="all",
                   help="comma-separated subset of "
                        + ",".join(_MODE_NAMES) + " (default: all)")
    p.add_argument("--workers", type=int, default=1,
                   help="worker processes (results identical for any count)")
    p.add_argument("--no-timing-baseline", action="store_true",
                   help="skip the observation-only solves behind the "
                        "timing table's baseline row")
    p.add_argument("--out", required=True, help="output directory")
    _add_solver_flags(p)
    add_server(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="score an estimated trajectory against "
                                    "ground truth")
    p.add_argument("--est", required=True, help="estimated trajectory (TUM)")
    p.add_argument("--gt", required=True, help="ground-truth trajectory (TUM)")
    p.add_argument("--delta", type=int, default=1,
                   help="frame gap for relative errors")
    p.add_argument("--csv", default=None, help="also write a CSV report here")
    add_server(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - boundary: report and exit 2
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
