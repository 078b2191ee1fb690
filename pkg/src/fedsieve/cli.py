"""Experiment runner CLI.

Subcommands:
  run     one experiment (paired with a screening-off baseline by default)
  grid    a compositions x non-IID-rates grid with an aggregate CSV
  report  re-render the grid CSV from summary files already on disk

All output files are a pure function of the configuration, so re-running
a command overwrites them with identical bytes.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

from .config import ExperimentConfig, GridConfig, parse_config, parse_grid_config, \
    profile_config
from .errors import CapacityError, ConfigError, FedsieveError, IdxParseError, \
    NumericFailureError
from .federation import run_experiment_detailed
from .metrics import UNDEFINED, DetectionMetrics, DetectionReport, RoundRecord, \
    decrease_rate, detection_metrics, f1_from_precision_recall

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

CSV_COLUMNS = ("setting", "case", "noniid_rate", "det_accuracy", "det_precision",
               "det_recall", "fpr_paper", "backdoor_baseline", "backdoor_defended",
               "decrease_rate")


# ---------------------------------------------------------------------------
# summaries


@dataclass
class ExperimentSummary:
    config: ExperimentConfig
    setting: str
    case: str
    defended_rounds: list[RoundRecord]
    baseline_rounds: list[RoundRecord] | None
    detection: DetectionMetrics | None
    detection_report: DetectionReport | None
    backdoor_defended: float | None
    backdoor_baseline: float | None
    backdoor_decrease_rate: float | None

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "setting": self.setting,
            "case": self.case,
            "detection": self.detection.to_dict() if self.detection else None,
            "detection_report": (self.detection_report.to_dict()
                                 if self.detection_report else None),
            "backdoor": {
                "defended": _undef(self.backdoor_defended),
                "baseline": _undef(self.backdoor_baseline),
                "decrease_rate": _undef(self.backdoor_decrease_rate),
            },
            "rounds_defended": [r.to_dict() for r in self.defended_rounds],
            "rounds_baseline": ([r.to_dict() for r in self.baseline_rounds]
                                if self.baseline_rounds is not None else None),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSummary":
        det = d["detection"]
        report = d["detection_report"]
        baseline_rounds = d["rounds_baseline"]
        return cls(
            config=ExperimentConfig(**d["config"]),
            setting=d["setting"],
            case=d["case"],
            defended_rounds=[RoundRecord.from_dict(r) for r in d["rounds_defended"]],
            baseline_rounds=([RoundRecord.from_dict(r) for r in baseline_rounds]
                             if baseline_rounds is not None else None),
            detection=(DetectionMetrics(**{k: _restore(v) for k, v in det.items()})
                       if det else None),
            detection_report=DetectionReport.from_dict(report) if report else None,
            backdoor_defended=_restore(d["backdoor"]["defended"]),
            backdoor_baseline=_restore(d["backdoor"]["baseline"]),
            backdoor_decrease_rate=_restore(d["backdoor"]["decrease_rate"]),
        )


def _undef(value):
    return UNDEFINED if value is None else value


def _restore(value):
    return None if value == UNDEFINED else value


def experiment_setting(config: ExperimentConfig) -> str:
    if config.n_noniid == 0:
        return "IID+MAL"
    if config.n_iid == 0:
        return "NIID+MAL"
    return "MIXED"


def experiment_case(config: ExperimentConfig) -> str:
    return f"{config.n_iid:02d}-{config.n_noniid:02d}-{config.n_malicious:02d}"


def experiment_name(config: ExperimentConfig) -> str:
    return (f"{experiment_setting(config).lower().replace('+', '-')}"
            f"_{experiment_case(config)}_nr{config.non_iid_rate:.2f}_seed{config.seed}")


def _summary_detection(run, config: ExperimentConfig) -> tuple[DetectionMetrics | None,
                                                               DetectionReport | None]:
    reports = [r.detection for r in run.records if r.detection is not None]
    if not reports:
        return None, None
    final = reports[-1]
    if config.detection_metric_scope == "final":
        return detection_metrics(final), final
    per_run = [detection_metrics(r) for r in reports]
    mean = _mean_metrics(per_run)
    return mean, final


def _mean_metrics(metrics: list[DetectionMetrics]) -> DetectionMetrics:
    def avg(values):
        defined = [v for v in values if v is not None]
        return sum(defined) / len(defined) if defined else None

    precision = avg([m.precision for m in metrics])
    recall = avg([m.recall for m in metrics])
    return DetectionMetrics(
        accuracy=avg([m.accuracy for m in metrics]),
        precision=precision,
        recall=recall,
        f1=(f1_from_precision_recall(precision, recall)
            if precision is not None and recall is not None else None),
        fpr_paper=avg([m.fpr_paper for m in metrics]),
        fpr_standard=avg([m.fpr_standard for m in metrics]),
    )


def run_single_detailed(config: ExperimentConfig,
                        baseline: bool = True) -> tuple[ExperimentSummary, list]:
    """Run one experiment and, with ``baseline``, its screening-off twin
    under the same seed.  Returns the summary plus the per-screen-run
    diagnostics of the defended run."""
    config.validate()
    defended = run_experiment_detailed(config)
    detection, report = _summary_detection(defended, config)
    backdoor_defended = (defended.records[-1].backdoor_success
                         if defended.records else None)

    baseline_rounds = None
    backdoor_baseline = None
    rate = None
    if baseline and config.abc_cadence is not None:
        off = dataclasses.replace(config, abc_cadence=None)
        baseline_run = run_experiment_detailed(off)
        baseline_rounds = baseline_run.records
        if baseline_run.records:
            backdoor_baseline = baseline_run.records[-1].backdoor_success
        if backdoor_baseline is not None and backdoor_defended is not None:
            rate = decrease_rate(backdoor_baseline, backdoor_defended)

    summary = ExperimentSummary(
        config=config,
        setting=experiment_setting(config),
        case=experiment_case(config),
        defended_rounds=defended.records,
        baseline_rounds=baseline_rounds,
        detection=detection,
        detection_report=report,
        backdoor_defended=backdoor_defended,
        backdoor_baseline=backdoor_baseline,
        backdoor_decrease_rate=rate,
    )
    return summary, defended.diagnostics


def run_single(config: ExperimentConfig, baseline: bool = True) -> ExperimentSummary:
    """Summary of one experiment (see :func:`run_single_detailed`)."""
    return run_single_detailed(config, baseline=baseline)[0]


@dataclass
class GridResult:
    summaries: list[ExperimentSummary]
    failures: list[dict]  # {"case", "noniid_rate", "error"}


def run_grid(grid: GridConfig, baseline: bool = True,
             out_dir: Path | None = None) -> GridResult:
    """Run every cell; failures are recorded and the rest keep running.
    With ``out_dir`` set, per-cell summary and diagnostics files are
    written as cells finish."""
    summaries: list[ExperimentSummary] = []
    failures: list[dict] = []
    for cell in grid.cells():
        try:
            cell.validate()
            summary, diagnostics = run_single_detailed(cell, baseline=baseline)
            if out_dir is not None:
                _emit_experiment(summary, diagnostics, out_dir)
            summaries.append(summary)
        except FedsieveError as exc:
            logger.warning("grid cell %s nr=%.2f failed: %s",
                           experiment_case(cell), cell.non_iid_rate, exc)
            failures.append({
                "case": experiment_case(cell),
                "noniid_rate": cell.non_iid_rate,
                "error": str(exc),
            })
    return GridResult(summaries, failures)


# ---------------------------------------------------------------------------
# output files


def _write_atomic(path: Path, data: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def _json_text(payload) -> str:
    return json.dumps(payload, indent=2, sort_keys=False) + "\n"


def write_summary(summary: ExperimentSummary, out_dir: Path) -> Path:
    path = out_dir / f"summary_{experiment_name(summary.config)}.json"
    _write_atomic(path, _json_text(summary.to_dict()))
    return path


def write_diagnostics(summary_name: str, diagnostics, out_dir: Path) -> list[Path]:
    paths = []
    for round_index, diag in diagnostics:
        path = out_dir / f"abc_{summary_name}_round{round_index:03d}.json"
        _write_atomic(path, _json_text({"round": round_index, **diag.to_dict()}))
        paths.append(path)
    return paths


def _fmt(value) -> str:
    return UNDEFINED if value is None else f"{value:.6f}"


def summary_csv_row(summary: ExperimentSummary) -> dict:
    det = summary.detection
    return {
        "setting": summary.setting,
        "case": summary.case,
        "noniid_rate": f"{summary.config.non_iid_rate:.2f}",
        "det_accuracy": _fmt(det.accuracy if det else None),
        "det_precision": _fmt(det.precision if det else None),
        "det_recall": _fmt(det.recall if det else None),
        "fpr_paper": _fmt(det.fpr_paper if det else None),
        "backdoor_baseline": _fmt(summary.backdoor_baseline),
        "backdoor_defended": _fmt(summary.backdoor_defended),
        "decrease_rate": _fmt(summary.backdoor_decrease_rate),
    }


def write_grid_csv(summaries: list[ExperimentSummary], out_dir: Path) -> Path:
    rows = sorted((summary_csv_row(s) for s in summaries),
                  key=lambda r: (r["setting"], r["case"], r["noniid_rate"]))
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    path = out_dir / "grid.csv"
    _write_atomic(path, buf.getvalue())
    return path


def _emit_experiment(summary: ExperimentSummary, run_diagnostics, out_dir: Path) -> Path:
    name = experiment_name(summary.config)
    path = write_summary(summary, out_dir)
    write_diagnostics(name, run_diagnostics, out_dir)
    return path


# ---------------------------------------------------------------------------
# commands


def _load_config(args) -> ExperimentConfig:
    base = profile_config(args.profile) if args.profile else None
    if args.config:
        config = parse_config(args.config, base=base)
    elif base is not None:
        config = base
    else:
        raise ConfigError("provide --config and/or --profile")
    if args.seed is not None:
        config.seed = args.seed
    config.validate()
    return config


def cmd_run(args) -> int:
    config = _load_config(args)
    out_dir = Path(args.out)
    summary, diagnostics = run_single_detailed(config, baseline=not args.no_baseline)
    path = _emit_experiment(summary, diagnostics, out_dir)
    print(path)
    return EXIT_OK


def cmd_grid(args) -> int:
    base = profile_config(args.profile) if args.profile else None
    if not args.config:
        raise ConfigError("grid requires --config pointing at a grid file")
    grid = parse_grid_config(args.config, base=base)
    if args.seed is not None:
        grid.base.seed = args.seed
    out_dir = Path(args.out)
    result = run_grid(grid, baseline=not args.no_baseline, out_dir=out_dir)
    csv_path = write_grid_csv(result.summaries, out_dir)
    _write_atomic(out_dir / "grid_errors.json", _json_text(result.failures))
    print(csv_path)
    return EXIT_OK


def cmd_report(args) -> int:
    out_dir = Path(args.out)
    summaries = []
    for path in sorted(out_dir.glob("summary_*.json")):
        summaries.append(ExperimentSummary.from_dict(json.loads(path.read_text())))
    if not summaries:
        raise ConfigError(f"no summary_*.json files found in {out_dir}")
    csv_path = write_grid_csv(summaries, out_dir)
    print(csv_path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedsieve",
        description="Deterministic federated-learning simulator with "
                    "clustering-based screening of backdoored clients.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=str, default=None, help="config file path")
        p.add_argument("--out", type=str, default="out", help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the master seed")
        p.add_argument("--no-baseline", action="store_true",
                       help="skip the screening-off twin run")
        p.add_argument("--profile", choices=("desk", "paper"), default=None,
                       help="named preset applied before the config file")

    p_run = sub.add_parser("run", help="run a single experiment")
    common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_grid = sub.add_parser("grid", help="run a compositions x rates grid")
    common(p_grid)
    p_grid.set_defaults(func=cmd_grid)

    p_report = sub.add_parser("report", help="re-render grid.csv from summaries")
    p_report.add_argument("--out", type=str, default="out", help="directory of summaries")
    p_report.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IdxParseError, CapacityError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericFailureError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FedsieveError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


def entrypoint() -> None:
    raise SystemExit(main())
