"""
Command line entry point

    python cli.py train --config run.json --run-dir runs/afr [--mode ppo] [--seed 3]
    python cli.py eval --checkpoint runs/afr/ckpt_1000.bin [--checkpoint ...] [--kinds slope,stairs] [--trials 50]
    python cli.py terrain preview --kind stairs --difficulty 0.5 --out stairs.pgm
    python cli.py plot-data --run-dir runs/afr [--run-dir runs/ppo] --out-dir curves
    python cli.py serve [--host 0.0.0.0] [--port 8000]

Exit codes: 0 success, 1 config or input error, 2 non-finite training loss.
"""

import argparse
import csv
import io
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from dotenv import load_dotenv
from pydantic import ValidationError

import terrain
from models import (
    CHALLENGE_KINDS,
    ConfigError,
    EvalReport,
    MethodReport,
    MetricsRecord,
    RunConfig,
    TerrainKind,
    TerrainSpec,
    TrainingMode,
    load_run_config,
)
from neural import CheckpointMismatchError, load_checkpoint, policy_from_checkpoint
from quadsim import NumericalDivergence
from trainer import LATEST_FILE, NonFiniteLoss, evaluate_policy, load_metrics, train

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
REPORT_CSV = "report.csv"
REPORT_JSON = "report.json"
CURVE_FILES = {"total_reward.csv": ("total_reward_mean", "total_reward_std"),
               "target_posture_reward.csv": ("target_posture_mean", "target_posture_std")}

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NONFINITE = 2


class CliError(Exception):
    """Bad operator input; reported on stderr with exit code 1"""


def setup_logging():
    level = os.getenv("AFR_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format=LOG_FORMAT, stream=sys.stderr)


def parse_kinds(text: Optional[str]) -> List[TerrainKind]:
    if not text:
        return list(CHALLENGE_KINDS)
    try:
        return [TerrainKind(part.strip()) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise CliError(f"unknown terrain kind: {e}")


# -- report formatting ----------------------------------------------------------

def format_rate(rate: float) -> str:
    return f"{rate * 100:.2f}%"


def format_time(seconds: Optional[float]) -> str:
    return "-" if seconds is None else f"{seconds:.3f}s"


def parse_rate(text: str) -> float:
    return round(float(text.strip().rstrip("%")) / 100.0, 4)


def parse_time(text: str) -> Optional[float]:
    text = text.strip()
    return None if text == "-" else round(float(text.rstrip("s")), 3)


def report_table(report: EvalReport) -> Dict[str, Dict[TerrainKind, Tuple[float, Optional[float]]]]:
    """method -> terrain -> (success rate, recovery time)"""
    return {
        m.method: {r.terrain: (r.success_rate, r.recovery_time) for r in m.results}
        for m in report.methods
    }


def report_to_csv(report: EvalReport) -> str:
    """Terrain column, then a Success Rate / Time pair per method"""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\r\n")
    header = ["Terrain"]
    for m in report.methods:
        header += [f"{m.method} Success Rate", f"{m.method} Time"]
    writer.writerow(header)
    terrains = [r.terrain for r in report.methods[0].results] if report.methods else []
    table = report_table(report)
    for kind in terrains:
        row = [kind.display_name]
        for m in report.methods:
            rate, seconds = table[m.method][kind]
            row += [format_rate(rate), format_time(seconds)]
        writer.writerow(row)
    return out.getvalue()


def parse_report_csv(text: str) -> Dict[str, Dict[TerrainKind, Tuple[float, Optional[float]]]]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0][0] != "Terrain":
        raise CliError("report CSV must start with a Terrain column")
    methods = [name[: -len(" Success Rate")] for name in rows[0][1::2]]
    table: Dict[str, Dict[TerrainKind, Tuple[float, Optional[float]]]] = {m: {} for m in methods}
    for row in rows[1:]:
        kind = TerrainKind.from_display_name(row[0])
        for i, method in enumerate(methods):
            table[method][kind] = (parse_rate(row[1 + 2 * i]), parse_time(row[2 + 2 * i]))
    return table


def write_report(report: EvalReport, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, REPORT_CSV), "w", newline="") as f:
        f.write(report_to_csv(report))
    with open(os.path.join(out_dir, REPORT_JSON), "w") as f:
        f.write(report.model_dump_json(indent=2))
    logger.info("Wrote %s and %s to %s", REPORT_CSV, REPORT_JSON, out_dir)


# -- learning curves ---------------------------------------------------------------

def _unique_labels(labels: Sequence[str]) -> List[str]:
    seen: Dict[str, int] = {}
    out = []
    for label in labels:
        seen[label] = seen.get(label, 0) + 1
        out.append(label if seen[label] == 1 else f"{label}_{seen[label]}")
    return out


def curve_csv(runs: Sequence[List[MetricsRecord]], mean_field: str, std_field: str) -> str:
    """iteration,mean,std for one run; iteration plus one mean column per mode when merging"""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\r\n")
    if len(runs) == 1:
        writer.writerow(["iteration", "mean", "std"])
        for record in runs[0]:
            writer.writerow([record.iteration, repr(getattr(record, mean_field)), repr(getattr(record, std_field))])
        return out.getvalue()

    labels = _unique_labels([run[0].mode.label for run in runs])
    by_iteration = [{r.iteration: getattr(r, mean_field) for r in run} for run in runs]
    shared = sorted(set.intersection(*(set(series) for series in by_iteration)))
    writer.writerow(["iteration", *labels])
    for iteration in shared:
        writer.writerow([iteration, *(repr(series[iteration]) for series in by_iteration)])
    return out.getvalue()


# -- commands ----------------------------------------------------------------------

def _read_config(path: Optional[str]) -> RunConfig:
    return RunConfig() if path is None else load_run_config(path)


def cmd_train(args) -> int:
    config = _read_config(args.config)
    if args.mode:
        config.ppo.mode = TrainingMode(args.mode)
    if args.seed is not None:
        config.seed = args.seed
    if args.iterations is not None:
        config.ppo.total_iterations = args.iterations
    config = RunConfig.model_validate(config.model_dump())
    workers = int(os.environ["AFR_WORKERS"]) if os.getenv("AFR_WORKERS") else None

    def echo(record: MetricsRecord):
        success = "-" if record.success_rate is None else f"{record.success_rate:.2f}"
        print(
            f"iter {record.iteration:5d} mode {record.mode.label} reward {record.total_reward_mean:9.4f} "
            f"posture {record.target_posture_mean:8.4f} loss_reg {record.loss_reg:9.5f} "
            f"episodes {record.episodes:4d} success {success}",
            flush=True,
        )

    checkpoint = train(config, args.run_dir, workers=workers, on_iteration=echo)
    logger.info("Training finished; final checkpoint %s", checkpoint)
    return EXIT_OK


def _checkpoint_paths(args) -> List[str]:
    if args.checkpoint:
        return list(args.checkpoint)
    if args.run_dir:
        latest = Path(args.run_dir) / LATEST_FILE
        if not latest.is_file():
            raise CliError(f"{latest}: no checkpoint recorded")
        return [str(Path(args.run_dir) / latest.read_text().strip())]
    raise CliError("eval needs --checkpoint or --run-dir")


def cmd_eval(args) -> int:
    paths = _checkpoint_paths(args)
    kinds = parse_kinds(args.kinds)
    methods = []
    labels = []
    loaded = []
    for path in paths:
        if not Path(path).is_file():
            raise CliError(f"{path}: checkpoint not found")
        checkpoint = load_checkpoint(path)
        loaded.append((path, checkpoint))
        labels.append(TrainingMode(checkpoint.meta["mode"]).label)

    for label, (path, checkpoint) in zip(_unique_labels(labels), loaded):
        config = RunConfig.model_validate(checkpoint.meta["config"])
        policy = policy_from_checkpoint(checkpoint, config.network)
        trials = args.trials or config.eval.trials
        if trials < 1:
            raise CliError("--trials must be at least 1")
        results = evaluate_policy(
            policy, config, kinds, trials, args.seed,
            difficulties=checkpoint.meta.get("curriculum"),
            trajectory_dir=args.trajectory_dir,
            label=label,
        )
        methods.append(MethodReport(method=label, checkpoint=path, results=results))

    report = EvalReport(seed=args.seed, methods=methods)
    out_dir = args.out_dir or str(Path(paths[0]).parent)
    write_report(report, out_dir)
    sys.stdout.write(report_to_csv(report))
    return EXIT_OK


def cmd_terrain_preview(args) -> int:
    spec = TerrainSpec(kind=TerrainKind(args.kind), difficulty=args.difficulty, seed=args.seed)
    field = terrain.generate(spec)
    out = args.out
    fmt = args.format or ("csv" if out.endswith(".csv") else "pgm")
    if fmt == "csv":
        terrain.to_csv(field, out)
    else:
        terrain.to_pgm(field, out)
    for name, values in sorted(field.features.items()):
        print(f"{name}: n={len(values)} min={min(values):.4f} max={max(values):.4f}")
    return EXIT_OK


def cmd_plot_data(args) -> int:
    runs = []
    for run_dir in args.run_dir:
        records = load_metrics(run_dir)
        if not records:
            raise CliError(f"{run_dir}: metrics file is empty")
        runs.append(records)
    out_dir = args.out_dir or args.run_dir[0]
    os.makedirs(out_dir, exist_ok=True)
    for name, (mean_field, std_field) in CURVE_FILES.items():
        with open(os.path.join(out_dir, name), "w", newline="") as f:
            f.write(curve_csv(runs, mean_field, std_field))
    logger.info("Wrote %s to %s", ", ".join(CURVE_FILES), out_dir)
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    uvicorn.run("main:app", host=args.host, port=args.port, log_level=os.getenv("AFR_LOG_LEVEL", "info").lower())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="afr", description="Fall recovery training and evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="Train a recovery policy")
    p.add_argument("--config", help="JSON run config (defaults if omitted)")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--mode", choices=[m.value for m in TrainingMode])
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Evaluate checkpoints per terrain")
    p.add_argument("--checkpoint", action="append", help="Repeat to compare methods")
    p.add_argument("--run-dir", help="Use the latest checkpoint of this run")
    p.add_argument("--kinds", help="Comma separated terrain kinds")
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir")
    p.add_argument("--trajectory-dir", help="Write the first trial of each terrain as state JSONL")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("terrain", help="Terrain tools")
    terrain_sub = p.add_subparsers(dest="terrain_command", required=True)
    preview = terrain_sub.add_parser("preview", help="Render one terrain tile to PGM or CSV")
    preview.add_argument("--kind", required=True, choices=[k.value for k in TerrainKind])
    preview.add_argument("--difficulty", type=float, default=0.5)
    preview.add_argument("--seed", type=int, default=0)
    preview.add_argument("--out", required=True)
    preview.add_argument("--format", choices=["pgm", "csv"])
    preview.set_defaults(func=cmd_terrain_preview)

    p = sub.add_parser("plot-data", help="Export learning curves as CSV")
    p.add_argument("--run-dir", action="append", required=True, help="Repeat to merge runs")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_plot_data)

    p = sub.add_parser("serve", help="Serve run results over HTTP")
    p.add_argument("--host", default="0.0.0.0")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NonFiniteLoss as e:
        logger.error("Training aborted: %s (minibatch dump: %s)", e, e.dump_path)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NONFINITE
    except NumericalDivergence as e:
        logger.error("Simulation diverged: %s", e)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (ConfigError, CliError, CheckpointMismatchError, FileNotFoundError, ValidationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
