from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from datetime import datetime
from importlib import resources
from pathlib import Path
from typing import Any

import pandas as pd
import pytz
from pydantic import Field, ValidationError

from . import __version__
from .checks import CheckReport, run_all_checks
from .exceptions import ConfigError, DesenseError, ExperimentFailure
from .logging import LoguruHandler, logger, set_debug
from .montecarlo import (
    COST_METRICS,
    U64_MAX,
    ExperimentConfig,
    ExperimentReport,
    epoch_summary,
    run_experiment,
    write_frame,
)
from .types import BaseModel

SEED_ENV = "DESENSE_KF_SEED"
BUNDLED_CONFIG = "benchmark_experiment.json"

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_EXPERIMENT = 3


class RunManifest(BaseModel):
    config: dict[str, Any] = Field(..., description="Configuration as run")
    seed: int = Field(..., description="Seed actually used")
    version: str = Field(..., description="desense_kf version")
    outputs: dict[str, str] = Field(..., description="Every file written by the run")
    n_ok: int = Field(..., ge=0)
    failed_cases: int = Field(..., ge=0)
    failed_case_errors: dict[int, str] = Field(default_factory=dict)
    case_digest: str = Field(
        ..., description="sha256 over the per-case truth and measurement digests"
    )
    max_asymmetry: float
    min_eigen_ratio: float
    unhealthy_cases: list[int] = Field(
        default_factory=list, description="Cases with a covariance outside the health tolerances"
    )
    duration_s: float
    created_at: str


def _line_of(text: str, data: Any, loc: tuple[int | str, ...]) -> int | None:
    """Best-effort line of a pydantic error location in the JSON source."""
    position, found = 0, False
    node = data
    for part in loc:
        if isinstance(part, str):
            idx = text.find(f'"{part}"', position)
            if idx >= 0:
                position, found = idx, True
            node = node.get(part) if isinstance(node, dict) else None
        else:
            node = node[part] if isinstance(node, list) and part < len(node) else None
            if isinstance(node, dict) and isinstance(node.get("name"), str):
                idx = text.find(json.dumps(node["name"]), position)
                if idx >= 0:
                    position, found = idx, True
    return text.count("\n", 0, position) + 1 if found else None


def load_experiment_config(path: Path | None) -> tuple[ExperimentConfig, str]:
    """Load and validate a config file, or the bundled one when `path` is None.

    Raises:
        ConfigError: unreadable file, malformed JSON or failed validation
    """
    if path is None:
        source = resources.files("desense_kf").joinpath("data").joinpath(BUNDLED_CONFIG)
        label = f"<bundled {BUNDLED_CONFIG}>"
        text = source.read_text(encoding="utf-8")
    else:
        label = str(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config: {e.strerror}", path=label) from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed JSON: {e.msg}", path=label, line=e.lineno) from e
    try:
        cfg = ExperimentConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"])
        raise ConfigError(
            f"{where}: {first['msg']}" if where else first["msg"],
            path=label,
            line=_line_of(text, data, first["loc"]),
        ) from e
    if path is not None and cfg.model_path is not None and not cfg.model_path.is_absolute():
        cfg.model_path = path.parent / cfg.model_path
    return cfg, label


def resolve_seed(flag: int | None, cfg: ExperimentConfig) -> int:
    """--seed, then the config's seed, then $DESENSE_KF_SEED."""
    if flag is not None:
        seed = flag
    elif cfg.seed is not None:
        seed = cfg.seed
    elif SEED_ENV in os.environ:
        try:
            seed = int(os.environ[SEED_ENV], 0)
        except ValueError as e:
            raise ConfigError(f"{SEED_ENV} is not an integer: {os.environ[SEED_ENV]!r}") from e
    else:
        raise ConfigError(f"no seed: pass --seed, set `seed` in the config or {SEED_ENV}")
    if not 0 <= seed <= U64_MAX:
        raise ConfigError(f"seed {seed} is outside the unsigned 64-bit range")
    return seed


def _combined_digest(report: ExperimentReport) -> str:
    h = hashlib.sha256()
    for digest in report.case_digests:
        h.update(digest.encode("ascii"))
    return h.hexdigest()


def cmd_run(
    config: Path | None, out: Path, seed: int | None = None, jobs: int = 1
) -> int:
    time_start = time.perf_counter()
    try:
        cfg, label = load_experiment_config(config)
        seed = resolve_seed(seed, cfg)
        cfg.to_schemes(cfg.build_model())
    except (ConfigError, DesenseError, OSError, ValueError) as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    logger.info(f"Loaded {label}")

    try:
        report = run_experiment(cfg, jobs=jobs, seed=seed)
    except ExperimentFailure as e:
        logger.error(f"Experiment failed: {e}")
        return EXIT_EXPERIMENT

    out.mkdir(parents=True, exist_ok=True)
    rms, cost = report.to_frames()
    outputs = {"rms": "rms.csv", "cost": "cost.csv", "manifest": "manifest.json"}
    write_frame(rms, out / outputs["rms"])
    write_frame(cost, out / outputs["cost"])
    manifest = RunManifest(
        config=cfg.model_dump(mode="json"),
        seed=seed,
        version=__version__,
        outputs=outputs,
        n_ok=report.n_ok,
        failed_cases=len(report.failed_cases),
        failed_case_errors=report.failed_cases,
        case_digest=_combined_digest(report),
        max_asymmetry=report.max_asymmetry,
        min_eigen_ratio=report.min_eigen_ratio,
        unhealthy_cases=report.unhealthy_cases,
        duration_s=time.perf_counter() - time_start,
        created_at=datetime.now(pytz.utc).isoformat(),
    )
    with (out / outputs["manifest"]).open("w", encoding="utf-8") as f:
        json.dump(manifest.model_dump(mode="json"), f, indent=4, ensure_ascii=False)
        f.write("\n")
    logger.info(f"Wrote {', '.join(outputs.values())} to {out}")

    summary = epoch_summary(rms, cost).pivot(index="scheme", columns="metric", values="epoch_mean")
    print(summary.loc[report.scheme_names].to_string(float_format=lambda v: f"{v:.6g}"))
    return EXIT_OK


def format_check_table(reports: list[CheckReport], verbose: bool = False) -> str:
    width = max(len(r.name) for r in reports)
    lines = []
    for r in reports:
        line = f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL'}  {r.time_used:6.2f}s"
        if verbose:
            line += f"  margin {r.margin:.3e} <= {r.tolerance:.1e}  ({r.detail})"
        lines.append(line)
    return "\n".join(lines)


def cmd_verify(seed: int = 0, perturb_gain: float = 0.0, verbose: bool = False) -> int:
    reports = run_all_checks(seed=seed, perturb_gain=perturb_gain)
    print(format_check_table(reports, verbose))
    return EXIT_OK if all(r.passed for r in reports) else EXIT_CHECK_FAILED


def _read_run(path: Path) -> tuple[pd.DataFrame, pd.DataFrame]:
    frames = []
    for name in ("rms.csv", "cost.csv"):
        file = path / name
        if not file.is_file():
            raise ConfigError(f"missing {name}", path=path)
        frames.append(pd.read_csv(file))
    return frames[0], frames[1]


def _long_metrics(rms: pd.DataFrame, cost: pd.DataFrame) -> pd.DataFrame:
    rms_long = pd.DataFrame(
        {
            "scheme": rms["scheme"],
            "epoch": rms["epoch"],
            "metric": "rms_x" + rms["state_index"].astype(str),
            "value": rms["rms"],
        }
    )
    cost_long = cost.melt(
        id_vars=["epoch", "scheme"],
        value_vars=[c for c in COST_METRICS if c in cost.columns],
        var_name="metric",
        value_name="value",
    )
    return pd.concat([rms_long, cost_long[["scheme", "epoch", "metric", "value"]]], ignore_index=True)


def cmd_compare(
    runs: list[Path], out: Path, first_epoch: int = 10, baseline: str | None = None
) -> int:
    try:
        frames = [_read_run(path) for path in runs]
    except (ConfigError, OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        logger.error(f"Cannot read run: {e}")
        return EXIT_CONFIG
    epoch_counts = {str(p): int(rms["epoch"].max()) for p, (rms, _) in zip(runs, frames)}
    if len(set(epoch_counts.values())) > 1:
        logger.error(f"Runs have different epoch counts: {epoch_counts}")
        return EXIT_CONFIG

    labels = [str(p) for p in runs]
    summary = pd.concat(
        [
            epoch_summary(rms, cost, first_epoch).assign(run=label)
            for label, (rms, cost) in zip(labels, frames)
        ],
        ignore_index=True,
    )[["run", "scheme", "metric", "epoch_mean"]]

    keys = ["scheme", "epoch", "metric"]
    metrics = [_long_metrics(rms, cost) for rms, cost in frames]
    deltas = []
    for label, other in zip(labels[1:], metrics[1:]):
        merged = other.merge(metrics[0], on=keys, suffixes=("", "_first"))
        deltas.append(
            merged.assign(run=label, delta=merged["value"] - merged["value_first"])[
                ["run", *keys, "delta"]
            ]
        )
    delta = (
        pd.concat(deltas, ignore_index=True)
        if deltas
        else pd.DataFrame(columns=["run", *keys, "delta"])
    )

    out.mkdir(parents=True, exist_ok=True)
    write_frame(summary, out / "summary.csv")
    write_frame(delta, out / "delta.csv")
    written = ["summary.csv", "delta.csv"]

    if baseline is not None:
        scheme_deltas = []
        for label, long in zip(labels, metrics):
            base = long[long["scheme"] == baseline]
            if base.empty:
                logger.error(f"Baseline scheme {baseline!r} is missing from {label}")
                return EXIT_CONFIG
            merged = long[long["scheme"] != baseline].merge(
                base.drop(columns="scheme"), on=["epoch", "metric"], suffixes=("", "_base")
            )
            scheme_deltas.append(
                merged.assign(run=label, delta=merged["value"] - merged["value_base"])[
                    ["run", *keys, "delta"]
                ]
            )
        write_frame(pd.concat(scheme_deltas, ignore_index=True), out / "scheme_delta.csv")
        written.append("scheme_delta.csv")

    logger.info(f"Wrote {', '.join(written)} to {out}")
    print(
        summary.pivot_table(index=["run", "scheme"], columns="metric", values="epoch_mean", sort=False)
        .to_string(float_format=lambda v: f"{v:.6g}")
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="desense-kf",
        description="Desensitized Kalman filter experiments and self-checks",
    )
    parser.add_argument("--verbose", action="store_true", help="debug logging and details")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a Monte-Carlo experiment")
    run.add_argument("--config", type=Path, help="experiment JSON (bundled default)")
    run.add_argument("--out", type=Path, default=Path("results"), help="output directory")
    run.add_argument("--seed", type=int, help=f"seed, overrides the config and ${SEED_ENV}")
    run.add_argument("--jobs", type=int, default=1, help="worker processes")

    verify = sub.add_parser("verify", help="run the numerical self-checks")
    verify.add_argument("--seed", type=int, default=0)
    verify.add_argument("--perturb-gain", type=float, default=0.0, help=argparse.SUPPRESS)

    compare = sub.add_parser("compare", help="compare run directories")
    compare.add_argument("runs", type=Path, nargs="+", help="directories written by `run`")
    compare.add_argument("--out", type=Path, default=Path("comparison"))
    compare.add_argument("--first-epoch", type=int, default=10, help="skip the transient")
    compare.add_argument("--baseline", help="also write deltas against this scheme")

    for p in (run, verify, compare):
        p.add_argument("--verbose", action="store_true", default=argparse.SUPPRESS)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    set_debug(args.verbose)
    logging.basicConfig(handlers=[LoguruHandler()], level=0, force=True)
    logging.captureWarnings(True)

    if args.command == "run":
        return cmd_run(args.config, args.out, args.seed, args.jobs)
    if args.command == "verify":
        return cmd_verify(args.seed, args.perturb_gain, args.verbose)
    return cmd_compare(args.runs, args.out, args.first_epoch, args.baseline)


if __name__ == "__main__":
    sys.exit(main())
