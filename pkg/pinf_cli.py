"""
PINF COMMAND LINE
Characteristic-based Fokker-Planck solving from the terminal.

    python pinf_cli.py solve      --problem toy --dim 10
    python pinf_cli.py train      --problem tfp-gauss --dim 2 --set train.iterations=2000
    python pinf_cli.py eval       --problem tfp-gauss --dim 2 --checkpoint runs/checkpoint.pt --mode both
    python pinf_cli.py mc-compare --problem sfp-ou --dim 1
    python pinf_cli.py check

Exit codes: 0 success, 2 configuration error, 3 numeric failure,
4 acceptance failure.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from bench import (
    AnalyticSolution,
    HistogramComparison,
    build_problem,
    compare_histogram,
    density_gap,
    euler_maruyama,
    histogram_density,
    initial_cloud,
    write_histogram_csv,
)
from errors import AcceptanceFailure, ConfigurationError, ExitCode, PinfError
from evaluation import EvalReport, build_grid, make_report, predict_net, predict_transport, write_report
from fpcore import FPProblem
from invariants import CheckResult, run_checks
from networks import CouplingFlow, LogDensityTFP, PotentialNet, as_log_density, load_checkpoint
from run_config import RunConfig, default_grid, load_run_config
from training import TrainTrace, train_sfp, train_tfp

logger = logging.getLogger("pinf")
console = Console()


def setup_logging(verbose: bool = False) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, rich_tracebacks=True, show_path=False)],
        force=True,
    )


# ============================================================================
# HELPERS
# ============================================================================

def _problem(cfg: RunConfig) -> tuple[FPProblem, AnalyticSolution]:
    return build_problem(cfg.problem)


def build_model(cfg: RunConfig, problem: FPProblem) -> Union[LogDensityTFP, CouplingFlow]:
    generator = torch.Generator().manual_seed(cfg.train.seed)
    spec = cfg.model
    if problem.is_steady_state:
        return CouplingFlow(
            problem.dim, n_layers=spec.flow_layers, hidden=spec.hidden, s_max=spec.s_max,
            init_scale=spec.init_scale, generator=generator,
        )
    net = PotentialNet(problem.dim, width=spec.width, n_layers=spec.n_layers, init_scale=spec.init_scale, generator=generator)
    return LogDensityTFP(problem.p0_log, net)


def _check_arch(cfg: RunConfig, problem: FPProblem, model: Union[LogDensityTFP, CouplingFlow]) -> None:
    spec = cfg.model
    if isinstance(model, CouplingFlow):
        expected = ("coupling", problem.dim, spec.flow_layers, spec.hidden)
        found = ("coupling", model.dim, model.n_layers, model.hidden)
    else:
        expected = ("potential", problem.dim, spec.n_layers, spec.width)
        found = ("potential", model.net.dim, model.net.n_layers, model.net.width)
    if expected != found:
        raise ConfigurationError(
            f"checkpoint architecture (kind, d, layers, width) = {found} does not match the config {expected}"
        )


def print_aggregates(title: str, aggregates: dict[str, float]) -> None:
    table = Table(title=title, show_header=True, header_style="bold magenta")
    table.add_column("metric")
    table.add_column("value", justify="right")
    for key, value in aggregates.items():
        table.add_row(key, f"{value:.6g}")
    console.print(table)


# ============================================================================
# COMMANDS
# ============================================================================

def cmd_solve_zero_diffusion(cfg: RunConfig) -> EvalReport:
    """Transport every grid point back to t = 0; no network is involved."""
    problem, solution = _problem(cfg)
    if not problem.is_zero_diffusion or problem.is_steady_state:
        raise ConfigurationError(f"'solve' needs a zero-diffusion initial-value problem, got '{problem.name}'")
    grid = cfg.resolved_grid()
    points = build_grid(grid, problem.dim)
    logger.info("solving '%s' d=%d at t=%g on %d points", problem.name, problem.dim, grid.time, points.shape[0])
    logp, flagged = predict_transport(problem, None, points, grid.time, cfg.eval_solver)
    report = make_report(points, grid.time, {"ode": logp}, exact=solution, flagged=flagged)
    write_report(report, Path(cfg.out) / "solve.csv", cfg.echo())
    print_aggregates(f"solve: {problem.name} d={problem.dim}", report.aggregates())
    return report


def cmd_train(cfg: RunConfig) -> TrainTrace:
    problem, _ = _problem(cfg)
    model = build_model(cfg, problem)
    out = Path(cfg.out)
    train_cfg = cfg.train if cfg.train.checkpoint_dir is not None else cfg.train.model_copy(update={"checkpoint_dir": out})
    if problem.is_steady_state:
        trace = train_sfp(problem, model, train_cfg, cfg.solver)
    else:
        trace = train_tfp(problem, model, train_cfg, cfg.solver)
    trace.to_csv(out / "train_trace.csv")
    if trace.losses:
        logger.info(
            "✅ trained %d iterations: loss %.4e -> %.4e (%d skipped)",
            len(trace.losses), trace.initial_loss, trace.final_loss, len(trace.skipped),
        )
    return trace


def cmd_eval(
    cfg: RunConfig,
    checkpoint: Optional[Path] = None,
    *,
    model: Optional[Union[LogDensityTFP, CouplingFlow, AnalyticSolution]] = None,
    problem: Optional[FPProblem] = None,
    solution: Optional[AnalyticSolution] = None,
) -> EvalReport:
    """Evaluate a trained model on the test grid.

    `model`, `problem` and `solution` may be injected directly instead of
    coming from the checkpoint and the registry; an injected problem without
    a solution yields a report without error columns.
    """
    if problem is None:
        problem, solution = _problem(cfg)
    if model is None:
        path = checkpoint or cfg.checkpoint
        if path is None:
            raise ConfigurationError("'eval' needs --checkpoint")
        model, _, _ = load_checkpoint(path, problem.p0_log)
        _check_arch(cfg, problem, model)

    grid = cfg.resolved_grid()
    points = build_grid(grid, problem.dim)
    t = 0.0 if problem.is_steady_state else grid.time
    mode = cfg.resolved_mode()
    modes = ["net", "ode"] if mode == "both" else [mode]

    predictions = {}
    flagged = None
    if "net" in modes:
        predictions["net"] = predict_net(model, points, t)
    if "ode" in modes:
        predictions["ode"], flagged = predict_transport(problem, as_log_density(model), points, t, cfg.eval_solver)

    report = make_report(points, t, predictions, exact=solution, flagged=flagged)
    write_report(report, Path(cfg.out) / "eval.csv", cfg.echo())
    if report.has_exact:
        print_aggregates(f"eval: {problem.name} d={problem.dim} ({mode})", report.aggregates())
    return report


class McReport(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    comparison: HistogramComparison
    particles: int
    time: float
    csv: Path
    model_errors: dict[str, float] = {}

    @property
    def passed(self) -> bool:
        return self.comparison.passed


def cmd_mc_compare(cfg: RunConfig) -> McReport:
    """Euler-Maruyama histogram against the analytic density (and a model, if
    a checkpoint is configured)."""
    problem, solution = _problem(cfg)
    if problem.dim > 2:
        raise ConfigurationError("histogram comparison needs d <= 2")
    mc = cfg.mc
    init_std = mc.init_std if mc.init_std is not None else (2.0 if problem.is_steady_state else None)
    t1 = mc.t1 if mc.t1 is not None else (10.0 if problem.is_steady_state else problem.horizon)
    grid = default_grid(problem.name, problem.dim)
    low = mc.low if mc.low is not None else grid.lows[0]
    high = mc.high if mc.high is not None else grid.highs[0]

    cloud = initial_cloud(problem, mc.particles, seed=cfg.train.seed, std=init_std)
    cloud = euler_maruyama(problem, cloud, mc.dt, t1)
    coords = tuple(range(problem.dim))
    hist = histogram_density(cloud, mc.bins, [(low, high)] * len(coords), coords)
    t_eval = 0.0 if problem.is_steady_state else t1
    comparison = compare_histogram(hist, solution, t_eval, mc.sigmas)

    extra = {"density_exact": comparison.exact, "bound": comparison.bound}
    model_errors: dict[str, float] = {}
    path = cfg.checkpoint
    if path is not None:
        model, _, _ = load_checkpoint(path, problem.p0_log)
        _check_arch(cfg, problem, model)
        centers = torch.as_tensor(hist.center_points())
        pinf = np.exp(predict_net(model, centers, t_eval))
        extra["density_pinf"] = pinf
        for reference, values in (("exact", comparison.exact), ("mc", hist.density)):
            sup, l1 = density_gap(pinf, values, hist.bin_volume)
            model_errors[f"pinf_vs_{reference}_sup"] = sup
            model_errors[f"pinf_vs_{reference}_l1"] = l1
    csv = write_histogram_csv(hist, Path(cfg.out) / "mc_compare.csv", extra)

    print_aggregates(
        f"mc-compare: {problem.name} d={problem.dim}",
        {"sup_error": comparison.sup_error, "l1_error": comparison.l1_error,
         "worst_z": comparison.worst_z, "z_bound": comparison.z_bound, **model_errors},
    )
    return McReport(comparison=comparison, particles=cloud.size, time=t1, csv=csv, model_errors=model_errors)


def cmd_check(cfg: RunConfig) -> list[CheckResult]:
    results = run_checks(cfg.train.seed)
    table = Table(title="invariant suite", show_header=True, header_style="bold magenta")
    table.add_column("check")
    table.add_column("value", justify="right")
    table.add_column("threshold", justify="right")
    table.add_column("")
    for r in results:
        table.add_row(r.name, f"{r.value:.3e}", f"{'>=' if r.higher_is_better else '<'} {r.threshold:.1e}",
                      "✅" if r.passed else "❌")
    console.print(table)
    return results


# ============================================================================
# ENTRY POINT
# ============================================================================

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run configuration")
    common.add_argument("--set", dest="assignments", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. train.lr=0.005 (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path)
    common.add_argument("--problem", choices=["toy", "tfp-gauss", "sfp-ou"])
    common.add_argument("--dim", type=int)
    common.add_argument("--mode", choices=["net", "ode", "both"])
    common.add_argument("--checkpoint", type=Path)
    common.add_argument("--parallel", action="store_true", default=None,
                        help="let torch use all threads (gives up bit-identical traces)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="pinf", description="Fokker-Planck densities along characteristics")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="zero-diffusion solve, no training")
    sub.add_parser("train", parents=[common], help="self-supervised training")
    sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test grid")
    sub.add_parser("mc-compare", parents=[common], help="Euler-Maruyama histogram vs analytic density")
    sub.add_parser("check", parents=[common], help="run the invariant suite")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    flags = {
        "train.seed": args.seed,
        "out": str(args.out) if args.out is not None else None,
        "problem.name": args.problem,
        "problem.d": args.dim,
        "mode": args.mode,
        "checkpoint": str(args.checkpoint) if args.checkpoint is not None else None,
        "parallel": args.parallel,
    }
    return load_run_config(args.config, args.assignments, flags)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)
    try:
        cfg = config_from_args(args)
        if not cfg.parallel:
            torch.set_num_threads(1)

        if args.command == "solve":
            cmd_solve_zero_diffusion(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "eval":
            cmd_eval(cfg)
        elif args.command == "mc-compare":
            report = cmd_mc_compare(cfg)
            if not report.passed:
                raise AcceptanceFailure(
                    f"histogram outside the statistical bound (z = {report.comparison.worst_z:.2f} "
                    f"> {report.comparison.z_bound:.2f})"
                )
        elif args.command == "check":
            failed = [r.name for r in cmd_check(cfg) if not r.passed]
            if failed:
                raise AcceptanceFailure(f"invariant check(s) failed: {', '.join(failed)}")
    except ConfigurationError as exc:
        logger.error("❌ %s", exc)
        return int(exc.exit_code)
    except PinfError as exc:
        logger.error("❌ %s: %s", type(exc).__name__, exc)
        return int(exc.exit_code)
    logger.info("✅ %s finished", args.command)
    return int(ExitCode.OK)


if __name__ == "__main__":
    sys.exit(main())
