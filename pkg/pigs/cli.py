"""
Command-line experiment runner.
"""
import argparse
import csv
import logging
import os
import sys
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from pigs.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from pigs.config import (
    RunConfig, apply_overrides, config_hash, list_presets, load_config, load_preset, log_level,
    output_root, serialize_config,
)
from pigs.embedding import cloud_stats, write_snapshot, write_stats
from pigs.errors import ConfigurationError, OutputLockedError, PigError, TrainingDivergedError
from pigs.model import PigModel
from pigs.oracle import (
    ReferenceField, build_reference, load_reference_field, rel_l2, solve_allen_cahn_reference,
)
from pigs.pde_zoo import PdeProblem, get_problem
from pigs.registry import RESULT_FILE, get_registry
from pigs.schemas import RunSummary
from pigs.trainer import TrainRecord, TrainState, Trainer, build_model

logger = logging.getLogger(__name__)

LOCK_FILE = ".lock"


@contextmanager
def output_lock(directory: Path):
    """Exclusive lock on a run directory for the lifetime of the block."""
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / LOCK_FILE
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise OutputLockedError(f"output directory {directory} is in use by another run ({path} exists)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield directory
    finally:
        path.unlink(missing_ok=True)


# ---------------------------------------------------------------------------
# Problem and reference resolution
# ---------------------------------------------------------------------------

def resolve_problem(cfg: RunConfig) -> Tuple[PdeProblem, Optional[ReferenceField]]:
    """Problem instance plus its evaluation reference (None when unavailable)."""
    ev = cfg.eval
    args = dict(cfg.problem)
    name = cfg.run.problem
    if name == "allen_cahn_inverse":
        forward = get_problem("allen_cahn", **{k: v for k, v in args.items() if k != "reaction_init"})
        field = solve_allen_cahn_reference(ev.reference_nx or 1024, ev.reference_nt or 201,
                                           forward.coeffs["diffusion"], forward.coeffs["reaction"],
                                           forward.coeffs["growth"])
        reference = field.subsample(ev.resolution)
        return get_problem(name, observations=reference.as_observations(), **args), reference
    problem = get_problem(name, **args)
    if ev.reference_file:
        return problem, load_reference_field(Path(ev.reference_file), problem).subsample(ev.resolution)
    try:
        return problem, build_reference(problem, ev.resolution, ev.reference_nx, ev.reference_nt)
    except ConfigurationError:
        raise
    except PigError as exc:
        logger.warning("no reference for %s: %s", name, exc)
        return problem, None


# ---------------------------------------------------------------------------
# Run outputs
# ---------------------------------------------------------------------------

def _fmt(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


class RunWriter:
    """metrics.csv / timing.csv rows and Gaussian snapshots of one run."""

    def __init__(self, directory: Path, problem: PdeProblem, coeff_names: Sequence[str]):
        self.directory = directory
        self.constraints = [c.name for c in problem.constraints]
        self.coeff_names = list(coeff_names)
        self.metrics = open(directory / "metrics.csv", "w", newline="")
        self.timing = open(directory / "timing.csv", "w", newline="")
        self.metrics_csv = csv.writer(self.metrics)
        self.timing_csv = csv.writer(self.timing)
        self.metrics_csv.writerow(
            ["iteration", "phase", "loss", "interior"] + self.constraints
            + [f"weight_{c}" for c in self.constraints] + ["causal_min", "epsilon"]
            + [f"coeff_{c}" for c in self.coeff_names] + ["rel_l2"]
        )
        self.timing_csv.writerow(["iteration", "seconds"])

    def write_record(self, rec: TrainRecord) -> None:
        r = rec.report
        self.metrics_csv.writerow(
            [rec.iteration, rec.phase, _fmt(r.total), _fmt(r.interior)]
            + [_fmt(r.constraints.get(c)) for c in self.constraints]
            + [_fmt(r.weights.get(c)) for c in self.constraints]
            + [_fmt(r.causal_min), _fmt(rec.epsilon)]
            + [_fmt(rec.coeffs.get(c)) for c in self.coeff_names]
            + [_fmt(rec.rel_l2)]
        )
        self.timing_csv.writerow([rec.iteration, f"{rec.elapsed:.6f}"])
        self.metrics.flush()
        self.timing.flush()

    def snapshot(self, iteration: int, model: PigModel) -> None:
        write_snapshot(model.cloud, self.directory / f"gaussians_{iteration}.csv")

    def close(self) -> None:
        self.metrics.close()
        self.timing.close()


def run_id_for(cfg: RunConfig) -> str:
    return f"{cfg.run.problem}-{config_hash(cfg)[:12]}"


def _checkpoint(state: TrainState, cfg: RunConfig, problem: PdeProblem, model: PigModel) -> Checkpoint:
    adam = state.adam if state.adam is not None and state.adam.m.size == len(model.params) else None
    optimizer = cfg.phase[min(state.phase, len(cfg.phase) - 1)].optimizer if cfg.phase else "adam"
    return Checkpoint(model=model, problem=problem.name, iteration=state.iteration, seed=cfg.run.seed,
                      weights=state.weights, epsilon=state.epsilon, optimizer=optimizer, adam=adam,
                      problem_args=dict(cfg.problem))


def execute_run(cfg: RunConfig, out: Optional[Path] = None) -> RunSummary:
    """Train one configuration and write every run output into its directory."""
    run_id = run_id_for(cfg)
    directory = Path(out or cfg.output.dir or output_root() / run_id)
    with output_lock(directory):
        (directory / "config.cfg").write_text(serialize_config(cfg))
        problem, reference = resolve_problem(cfg)
        model = build_model(problem, cfg.model, cfg.run.seed)
        writer = RunWriter(directory, problem, model.coeff_names)
        trainer = Trainer(model, problem, cfg, reference, writer.write_record, writer.snapshot)
        status = "completed"
        diverged = None
        try:
            state = trainer.run()
        except TrainingDivergedError as exc:
            logger.error("%s", exc)
            diverged = exc
            state = trainer.state
            if exc.params is not None and exc.params.size == len(state.model.params):
                state.model.set_params(exc.params)
            status = "diverged"
        finally:
            writer.close()
        model = state.model
        if cfg.output.checkpoint:
            save_checkpoint(_checkpoint(state, cfg, problem, model), directory / "checkpoint.bin")
        writer.snapshot(state.iteration, model)
        if cfg.output.stats and model.cloud.n * model.cloud.m >= 2:
            write_stats(cloud_stats(model.cloud), directory / "stats.csv")
        last = state.history[-1] if state.history else None
        summary = RunSummary(
            run_id=run_id, problem=problem.name, seed=cfg.run.seed, config_hash=config_hash(cfg),
            output_dir=str(directory), iterations=state.iteration,
            final_rel_l2=state.final_rel_l2, best_rel_l2=state.best_rel_l2,
            final_loss=last.report.total if last else None,
            coeffs={name: model.coeff(name) for name in model.coeff_names},
            status=status, created_at=datetime.now(timezone.utc).isoformat(),
        )
        (directory / RESULT_FILE).write_text(summary.model_dump_json(indent=2))
    get_registry(directory.parent).record(summary)
    if diverged is not None:
        raise diverged
    return summary


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_run(args) -> int:
    if args.config and args.preset:
        raise ConfigurationError("give either a config file or --preset, not both")
    if args.config:
        cfg = load_config(Path(args.config))
    elif args.preset:
        cfg = load_preset(args.preset)
    else:
        cfg = RunConfig()
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    cfg = apply_overrides(cfg, overrides)
    summary = execute_run(cfg, Path(args.out) if args.out else None)
    print(f"run {summary.run_id}: {summary.iterations} iterations, "
          f"final rel. L2 {summary.final_rel_l2 if summary.final_rel_l2 is not None else 'n/a'}")
    print(f"outputs in {summary.output_dir}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(Path(args.checkpoint))
    name = args.problem
    if name.endswith("_inverse"):
        name = name[:-len("_inverse")]
    saved = ckpt.problem[:-len("_inverse")] if ckpt.problem.endswith("_inverse") else ckpt.problem
    problem_args = {k: v for k, v in ckpt.problem_args.items() if k != "reaction_init"} if saved == name else {}
    problem = get_problem(name, **problem_args)
    reference = build_reference(problem, args.resolution)
    pred = ckpt.model.predict_values(reference.points())
    print(f"{args.problem}: rel. L2 {rel_l2(pred, reference):.6e} on {reference.values.size} points")
    for coeff in ckpt.model.coeff_names:
        print(f"{coeff} = {ckpt.model.coeff(coeff)!r}")
    return 0


def cmd_export_stats(args) -> int:
    ckpt = load_checkpoint(Path(args.checkpoint))
    stats = cloud_stats(ckpt.model.cloud)
    if args.out:
        write_stats(stats, Path(args.out))
    else:
        writer = csv.writer(sys.stdout)
        writer.writerow(stats.header())
        for row in stats.table():
            writer.writerow([repr(float(v)) for v in row])
    return 0


def cmd_serve(args) -> int:
    import uvicorn
    from pigs.api import create_app
    uvicorn.run(create_app(), host=args.host, port=args.port)
    return 0


def cmd_presets(args) -> int:
    for name in list_presets():
        print(name)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pigs", description="Physics-informed Gaussian PDE solver")
    parser.add_argument("--log-level", default=None, help="logging level (default: $PIGS_LOG_LEVEL or INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train a configuration")
    run.add_argument("config", nargs="?", help="config file (flat section.key = value)")
    run.add_argument("--preset", help="shipped preset name")
    run.add_argument("--seed", type=int, help="override run.seed")
    run.add_argument("--out", help="output directory")
    run.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    run.set_defaults(func=cmd_run)

    ev = sub.add_parser("eval", help="relative L2 error of a checkpoint")
    ev.add_argument("checkpoint")
    ev.add_argument("problem")
    ev.add_argument("--resolution", type=int, default=64)
    ev.set_defaults(func=cmd_eval)

    stats = sub.add_parser("export-stats", help="nearest-neighbour distances and variances of a checkpoint")
    stats.add_argument("checkpoint")
    stats.add_argument("--out", help="CSV file (default: stdout)")
    stats.set_defaults(func=cmd_export_stats)

    serve = sub.add_parser("serve", help="start the read-only results API")
    serve.add_argument("--host", default="0.0.0.0")
    serve.add_argument("--port", type=int, default=8000)
    serve.set_defaults(func=cmd_serve)

    presets = sub.add_parser("presets", help="list shipped presets")
    presets.set_defaults(func=cmd_presets)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=(args.log_level or log_level()).upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
