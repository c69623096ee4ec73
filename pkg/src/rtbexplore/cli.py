"""Command-line entry point: run one experiment or a seed sweep."""

from __future__ import annotations

import csv
import dataclasses
import io
from pathlib import Path

import click
import yaml

from . import experiment
from .config import ConfigError, dump_config, load_config
from .experiment import ExperimentConfig, Report

_AGGREGATE_HEADER = (
    "seed",
    "group",
    "revenue",
    "ctr",
    "auc",
    "logloss",
    "mean_unc",
    "delta_revenue",
    "delta_ctr",
    "delta_auc",
    "delta_logloss",
)


def _load(config_path: str, seed: int | None) -> ExperimentConfig:
    try:
        cfg = load_config(config_path)
    except ConfigError as exc:
        raise click.ClickException(str(exc)) from exc
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    return cfg


def _execute(cfg: ExperimentConfig, out_dir: Path, audit: bool, verbose: bool) -> Report:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "effective_config.yaml").write_text(dump_config(cfg))
    progress = (lambda phase: click.echo(f"[seed {cfg.seed}] {phase} ...")) if verbose else None
    if audit:
        with open(out_dir / "audit.jsonl", "w") as fh:
            report = experiment.run(cfg, audit=fh, progress=progress)
    else:
        report = experiment.run(cfg, progress=progress)
    (out_dir / "report.yaml").write_text(report.to_yaml())
    (out_dir / "report.csv").write_text(report.to_csv())
    return report


def _echo_summary(report: Report) -> None:
    for name, g in report.groups.items():
        click.echo(
            f"{name}: revenue={g.online.revenue:.2f} ctr={g.online.ctr:.5f} "
            f"auc={g.offline.auc:.5f} logloss={g.offline.log_loss:.5f} "
            f"mean_unc={g.offline.mean_uncertainty:.6f}"
        )
    if report.uncertainty_gap is not None:
        click.echo(f"uncertainty_gap={report.uncertainty_gap:.4f}")


@click.group()
@click.version_option(package_name="rtbexplore")
def main() -> None:
    """Desk-scale RTB exploration testbed."""


@main.command("run")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option(
    "--out",
    type=click.Path(file_okay=False, path_type=Path),
    default=Path("out"),
    show_default=True,
    help="Output directory for report files.",
)
@click.option("--audit", is_flag=True, help="Write a per-decision JSONL audit log.")
@click.option("-v", "--verbose", is_flag=True, help="Print phase progress.")
def cmd_run(config_path: str, seed: int | None, out: Path, audit: bool, verbose: bool):
    """Run one experiment and write report.yaml / report.csv to --out."""
    cfg = _load(config_path, seed)
    report = _execute(cfg, out, audit, verbose)
    _echo_summary(report)


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(part) for part in text.split(",") if part.strip() != ""]
    except ValueError as exc:
        raise click.ClickException(f"bad --seeds value {text!r}: {exc}") from exc
    if not seeds:
        raise click.ClickException("--seeds needs at least one integer")
    return seeds


def _at_least_as_good(report: Report) -> dict[str, bool]:
    """Did the uncertainty group do at least as well as random per metric?"""
    unc = report.groups["uncertainty_explore"]
    rand = report.groups["random_explore"]
    return {
        "revenue": unc.online.revenue >= rand.online.revenue,
        "ctr": unc.online.ctr >= rand.online.ctr,
        "auc": unc.offline.auc >= rand.offline.auc,
        "log_loss": unc.offline.log_loss <= rand.offline.log_loss,
    }


def _beats_control(report: Report) -> dict[str, bool]:
    unc = report.groups["uncertainty_explore"]
    control = report.groups["control"]
    return {
        "revenue": unc.online.revenue > control.online.revenue,
        "ctr": unc.online.ctr > control.online.ctr,
        "auc": unc.offline.auc > control.offline.auc,
        "log_loss": unc.offline.log_loss < control.offline.log_loss,
    }


@main.command("sweep")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--seeds", default="1,2,3,4,5", show_default=True, help="Comma-separated seeds.")
@click.option(
    "--out",
    type=click.Path(file_okay=False, path_type=Path),
    default=Path("out"),
    show_default=True,
)
@click.option("--audit", is_flag=True, help="Write per-seed JSONL audit logs.")
@click.option("-v", "--verbose", is_flag=True, help="Print phase progress.")
def cmd_sweep(config_path: str, seeds: str, out: Path, audit: bool, verbose: bool):
    """Run the experiment once per seed and aggregate deltas and majorities."""
    seed_list = _parse_seeds(seeds)
    reports: dict[int, Report] = {}
    for seed in seed_list:
        cfg = _load(config_path, seed)
        reports[seed] = _execute(cfg, out / f"seed_{seed}", audit, verbose)
        if verbose:
            click.echo(f"[seed {seed}] done")

    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_AGGREGATE_HEADER)
    for seed in seed_list:
        for line in reports[seed].to_csv().splitlines()[1:]:
            writer.writerow([str(seed), *line.split(",")])
    (out / "aggregate.csv").write_text(buf.getvalue())

    vs_random = {m: 0 for m in ("revenue", "ctr", "auc", "log_loss")}
    vs_control = {m: 0 for m in ("revenue", "ctr", "auc", "log_loss")}
    gap_positive = 0
    for report in reports.values():
        for metric, ok in _at_least_as_good(report).items():
            vs_random[metric] += int(ok)
        for metric, ok in _beats_control(report).items():
            vs_control[metric] += int(ok)
        if report.uncertainty_gap is not None and report.uncertainty_gap > 0:
            gap_positive += 1
    aggregate = {
        "seeds": seed_list,
        "n_seeds": len(seed_list),
        "uncertainty_at_least_as_good_as_random": vs_random,
        "uncertainty_beats_control": vs_control,
        "uncertainty_gap_positive": gap_positive,
    }
    (out / "aggregate.yaml").write_text(yaml.safe_dump(aggregate, sort_keys=False))
    for metric in ("revenue", "ctr", "auc", "log_loss"):
        click.echo(
            f"{metric}: uncertainty>=random in {vs_random[metric]}/{len(seed_list)} seeds, "
            f"beats control in {vs_control[metric]}/{len(seed_list)}"
        )
    click.echo(f"uncertainty_gap>0 in {gap_positive}/{len(seed_list)} seeds")


if __name__ == "__main__":
    main()
