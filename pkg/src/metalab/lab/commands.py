"""Experiment commands. Each writes its artifacts plus a manifest into ``cfg.out``."""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import numpy as np

from metalab import __version__
from metalab.diffnet import NetSpec
from metalab.mamltrain import (
    Checkpoint,
    InnerConfig,
    TrainingRun,
    draw_episodes,
    evaluate_batch,
    load_checkpoint,
    read_curves_csv,
    save_checkpoint,
    train_maml,
)
from metalab.repmetric import degree_of_meta_learning, significance_check
from metalab.taskgen import (
    TaskPool,
    build_finite_pool,
    derive_seed,
    file_sha256,
    infinite_pool,
    load_pool,
    save_pool,
)

from .config import ExperimentSpec

log = logging.getLogger(__name__)

POOL_FILE = "pool.bin"
CURVES_FILE = "curves.csv"
SWEEP_SIGMA_COLUMNS = (
    "sigma1",
    "checkpoint",
    "epoch",
    "dcca_mean",
    "dcca_std",
    "significant",
    "margin",
    "meta_val_loss",
    "meta_val_std",
    "n_episodes",
    "query_size",
)
SWEEP_STEPS_COLUMNS = (
    "inner_steps",
    "dcca_mean",
    "dcca_std",
    "significant",
    "margin",
    "meta_val_loss",
    "meta_val_std",
    "n_episodes",
    "query_size",
    "inner_lr",
    "checkpoint",
)
GAP_COLUMNS = ("epoch", "meta_train_loss", "meta_val_loss", "gap")
GAP_SUMMARY_COLUMNS = (
    "trough_epoch",
    "trough_val_loss",
    "train_at_trough",
    "last_epoch",
    "last_val_loss",
    "last_train_loss",
    "last_over_best_ratio",
)

# purpose tags for derived seeds
_POOL, _VAL, _TRAIN, _ANALYSIS = 11, 12, 13, 14


class MissingArtifact(FileNotFoundError):
    pass


class DataError(ValueError):
    pass


def checkpoint_name(which: str) -> str:
    return f"checkpoint_{which}.ckpt"


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_table(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_manifest(cfg: ExperimentSpec, command: str, out: Path, artifacts: list[str], extra=None) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "config_sha256": cfg.digest(),
        "config": cfg.model_dump(mode="json"),
        "seed": cfg.seed,
        "artifacts": {name: file_sha256(out / name) for name in sorted(artifacts)},
    }
    if extra:
        manifest.update(extra)
    path = out / f"manifest_{command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _out(cfg: ExperimentSpec) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# pools


def make_train_pool(cfg: ExperimentSpec, sigma1: float | None = None) -> TaskPool:
    source = cfg.benchmark.build(sigma1)
    if cfg.pool.mode == "infinite":
        return infinite_pool(source, derive_seed(cfg.seed, _POOL))
    if cfg.pool.file and sigma1 is None:
        path = Path(cfg.pool.file)
        if not path.exists():
            raise MissingArtifact(f"pool file {path} does not exist")
        return load_pool(path)
    return build_finite_pool(source, cfg.pool.n_tasks, derive_seed(cfg.seed, _POOL))


def make_val_pool(cfg: ExperimentSpec, train_pool: TaskPool) -> TaskPool:
    if cfg.pool.validation == "train" and not train_pool.infinite:
        return train_pool
    return infinite_pool(train_pool.source, derive_seed(cfg.seed, _VAL))


def cmd_gen_pool(cfg: ExperimentSpec) -> tuple[Path, str]:
    out = _out(cfg)
    pool = build_finite_pool(cfg.benchmark.build(), cfg.pool.n_tasks, derive_seed(cfg.seed, _POOL))
    path = out / POOL_FILE
    digest = save_pool(pool, path)
    write_manifest(cfg, "gen-pool", out, [POOL_FILE])
    return path, digest


# ---------------------------------------------------------------------------
# training


def run_training(cfg: ExperimentSpec, out: Path, sigma1: float | None = None) -> TrainingRun:
    if cfg.benchmark.kind == "fcnn":
        cfg.benchmark.build(sigma1).check()
    train_pool = make_train_pool(cfg, sigma1)
    val_pool = make_val_pool(cfg, train_pool)
    spec = cfg.model.build()

    def progress(row):
        log.info("epoch %d  meta-train %.6g  meta-val %.6g", row[0], row[1], row[2])

    run = train_maml(
        spec,
        train_pool,
        val_pool,
        cfg.inner.build(),
        cfg.outer.build(),
        cfg.train.build(),
        seed=derive_seed(cfg.seed, _TRAIN),
        progress=progress,
    )
    out.mkdir(parents=True, exist_ok=True)
    run.write_curves(out / CURVES_FILE)
    save_checkpoint(run.checkpoint_best, out / checkpoint_name("best"))
    save_checkpoint(run.checkpoint_last, out / checkpoint_name("last"))
    return run


def cmd_train(cfg: ExperimentSpec) -> TrainingRun:
    out = _out(cfg)
    run = run_training(cfg, out)
    write_manifest(
        cfg,
        "train",
        out,
        [CURVES_FILE, checkpoint_name("best"), checkpoint_name("last")],
        {"best_epoch": run.checkpoint_best.epoch, "record_wall_time": cfg.train.record_wall_time},
    )
    return run


# ---------------------------------------------------------------------------
# analysis


def resolve_checkpoint(cfg: ExperimentSpec, path=None, which: str | None = None) -> Checkpoint:
    path = Path(path) if path else Path(cfg.out) / checkpoint_name(which or cfg.checkpoint)
    if not path.exists():
        raise MissingArtifact(f"checkpoint {path} does not exist; run `train` first")
    return load_checkpoint(path)


def _analysis_batch(cfg: ExperimentSpec, val_pool: TaskPool, spec: NetSpec):
    n_support = cfg.analysis.n_support or cfg.train.n_support
    return draw_episodes(
        val_pool, cfg.analysis.n_episodes, n_support, cfg.analysis.query_size, derive_seed(cfg.seed, _ANALYSIS)
    )


def _val_batch(cfg: ExperimentSpec, val_pool: TaskPool):
    return draw_episodes(
        val_pool, cfg.analysis.val_episodes, cfg.train.n_support, cfg.train.n_query, derive_seed(cfg.seed, _ANALYSIS, 1)
    )


def analyze_checkpoint(cfg: ExperimentSpec, ckpt: Checkpoint, val_pool: TaskPool, inner: InnerConfig):
    """dCCA report and meta-validation loss of one checkpoint under ``inner``."""
    report = degree_of_meta_learning(
        ckpt.spec, ckpt.params, inner, _analysis_batch(cfg, val_pool, ckpt.spec), cfg.analysis.query_size, ckpt.bn
    )
    val_mean, val_std = evaluate_batch(ckpt.spec, ckpt.params, _val_batch(cfg, val_pool), inner, ckpt.bn)
    return report, val_mean, val_std


def cmd_analyze(cfg: ExperimentSpec, checkpoint_path=None):
    out = _out(cfg)
    ckpt = resolve_checkpoint(cfg, checkpoint_path)
    val_pool = make_val_pool(cfg, make_train_pool(cfg))
    report, _, _ = analyze_checkpoint(cfg, ckpt, val_pool, cfg.inner.build())
    name = f"dcca_{cfg.checkpoint}.csv"
    report.write_csv(out / name)
    write_manifest(cfg, "analyze", out, [name], {"degenerate_cca": report.degenerate_count, "diverged_episodes": report.diverged_count})
    return report


def cmd_sweep_sigma(cfg: ExperimentSpec) -> list[list]:
    out = _out(cfg)
    rows = []
    for sigma in sorted(cfg.sweep.sigma1):
        sub = out / f"sigma_{sigma:g}"
        run = run_training(cfg, sub, sigma)
        val_pool = make_val_pool(cfg, make_train_pool(cfg, sigma))
        for which, ckpt in (("best", run.checkpoint_best), ("last", run.checkpoint_last)):
            report, vm, vs = analyze_checkpoint(cfg, ckpt, val_pool, cfg.inner.build())
            sig, margin = significance_check(report)
            rows.append(
                [sigma, which, ckpt.epoch, report.mean, report.std, sig, margin, vm, vs, report.n_episodes, report.query_size]
            )
            log.info("sigma1=%g %s: dcca %.4f +- %.4f, meta-val %.6g", sigma, which, report.mean, report.std, vm)
    write_table(out / "sweep_sigma.csv", SWEEP_SIGMA_COLUMNS, rows)
    write_manifest(cfg, "sweep-sigma", out, ["sweep_sigma.csv"])
    return rows


def cmd_sweep_inner_steps(cfg: ExperimentSpec, checkpoint_path=None) -> list[list]:
    out = _out(cfg)
    ckpt = resolve_checkpoint(cfg, checkpoint_path)
    val_pool = make_val_pool(cfg, make_train_pool(cfg))
    steps = list(cfg.sweep.inner_steps)
    if cfg.sweep.include_control:
        steps = [0] + steps
    rows = []
    for k in steps:
        inner = InnerConfig(k, cfg.inner.lr, cfg.inner.first_order)
        report, vm, vs = analyze_checkpoint(cfg, ckpt, val_pool, inner)
        sig, margin = significance_check(report)
        rows.append(
            [k, report.mean, report.std, sig, margin, vm, vs, report.n_episodes, report.query_size, cfg.inner.lr, cfg.checkpoint]
        )
        log.info("inner steps %d: dcca %.4f +- %.4f, meta-val %.6g", k, report.mean, report.std, vm)
    name = f"sweep_inner_steps_{cfg.checkpoint}.csv"
    write_table(out / name, SWEEP_STEPS_COLUMNS, rows)
    write_manifest(cfg, "sweep-inner-steps", out, [name])
    return rows


# ---------------------------------------------------------------------------
# gap report


def gap_table(rows) -> list[list]:
    return [[e, tr, va, va - tr] for e, tr, va, *_ in rows]


def gap_summary(rows) -> list:
    if not rows:
        raise DataError("curves are empty")
    val = np.array([r[2] for r in rows])
    i = int(np.argmin(val))
    trough = rows[i]
    last = rows[-1]
    return [trough[0], trough[2], trough[1], last[0], last[2], last[1], last[2] / trough[2]]


def cmd_gap_report(cfg: ExperimentSpec, curves_path=None):
    out = _out(cfg)
    path = Path(curves_path) if curves_path else out / CURVES_FILE
    if not path.exists():
        raise MissingArtifact(f"curves file {path} does not exist")
    try:
        rows = read_curves_csv(path)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    table = gap_table(rows)
    summary = gap_summary(rows)
    write_table(out / "gap_report.csv", GAP_COLUMNS, table)
    write_table(out / "gap_summary.csv", GAP_SUMMARY_COLUMNS, [summary])
    write_manifest(cfg, "gap-report", out, ["gap_report.csv", "gap_summary.csv"])
    return table, summary
