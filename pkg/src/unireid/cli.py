"""Operator entry point.

Subcommands cover the whole desk workflow: ``generate`` writes the synthetic
datasets, ``train`` runs the two-stage optimization, ``evaluate`` scores a
checkpoint on both retrieval tasks, ``ablate`` runs the four-row component
grid over seeds, and ``report`` collects run directories into one table.
Every option can also come from an HPL_-prefixed environment variable; errors
exit nonzero with a single ``error: <kind>: <reason>`` line.
"""
from __future__ import annotations

import copy
import csv
import functools
import json
from pathlib import Path

import click

from .checkpoint import load_checkpoint
from .config import RunConfig, compat_hash, load_run_config
from .errors import UniReidError
from .data import generate_synthetic
from .evaluator import write_results
from .trainer import (build_training, restore_modules, run_evaluation, run_stage1,
                      run_stage2, train_all)

ABLATION_ROWS = (
    ("baseline", False, False, False),
    ("trt", True, False, False),
    ("trt_hpl", True, True, False),
    ("full", True, True, True),
)


def _handled(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except UniReidError as exc:
            raise SystemExit(f"error: {type(exc).__name__}: {exc}") from exc

    return wrapper


def _load_config(config_path: str | None, seed: int | None, out: str | None) -> RunConfig:
    cfg = load_run_config(config_path) if config_path else RunConfig()
    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.output.dir = out
    return cfg


@click.group(context_settings={"auto_envvar_prefix": "HPL"})
def main() -> None:
    """Unified image- and text-query person retrieval."""


@main.command()
@click.option("--config", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Run config TOML; defaults apply without one.")
@click.option("--seed", type=int, default=None, help="Override the generator seed.")
@click.option("--out", type=click.Path(file_okay=False), default=None,
              help="Output root; defaults to the configured data root.")
@click.option("--identities", type=int, default=None, help="Override identity count.")
@click.option("--images", type=int, default=None, help="Override images per identity.")
@_handled
def generate(config, seed, out, identities, images) -> None:
    """Write the synthetic caption and image-only datasets."""
    cfg = _load_config(config, None, None)
    spec = cfg.data.synthetic
    if seed is not None:
        spec.seed = seed
    if identities is not None:
        spec.n_identities = identities
    if images is not None:
        spec.images_per_identity = images
    root = Path(out) if out else Path(cfg.data.root)
    t2i, i2i = generate_synthetic(spec, root)
    for m in (t2i, i2i):
        click.echo(f"{m.modality}: {len(m.entries)} images -> {m.root / 'manifest.json'}")


@main.command()
@click.option("--config", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--seed", type=int, default=None, help="Override the run seed.")
@click.option("--out", type=click.Path(file_okay=False), default=None,
              help="Override the output directory.")
@click.option("--stage", type=click.Choice(["1", "2", "all"]), default="all")
@click.option("--resume", type=click.Path(exists=True, file_okay=False), default=None,
              help="Stage-2 checkpoint directory to resume from.")
@_handled
def train(config, seed, out, stage, resume) -> None:
    """Run the two-stage training schedule."""
    cfg = _load_config(config, seed, out)
    out_dir = Path(cfg.output.dir)
    ctx = build_training(cfg)
    if stage == "all":
        result = train_all(ctx, out_dir)
    elif stage == "1":
        result = run_stage1(ctx, out_dir)
    else:
        stage1_ckpt = out_dir / "stage1_final"
        result = run_stage2(
            ctx, out_dir,
            stage1_checkpoint=stage1_ckpt if stage1_ckpt.exists() else None,
            resume_from=resume,
        )
    click.echo(f"checkpoint: {result.checkpoint}")


@main.command()
@click.option("--config", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--checkpoint", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--task", type=click.Choice(["i2i", "t2i", "both"]), default=None,
              help="Override the configured evaluation task.")
@click.option("--out", type=click.Path(file_okay=False), default=None)
@click.option("--allow-config-mismatch", is_flag=True, default=False,
              help="Load the checkpoint even if its config hash differs.")
@_handled
def evaluate(config, checkpoint, task, out, allow_config_mismatch) -> None:
    """Score a checkpoint on the configured retrieval tasks."""
    cfg = _load_config(config, None, out)
    if task is not None:
        cfg.eval.task = task
    ctx = build_training(cfg)
    ckpt = load_checkpoint(checkpoint, expect_config_hash=compat_hash(cfg),
                           allow_mismatch=allow_config_mismatch)
    restore_modules(ctx, ckpt)
    results = run_evaluation(ctx)
    path = write_results(results, cfg.output.dir, run_name=Path(checkpoint).name)
    for r in results:
        click.echo(f"{r.task}: rank1={r.rank1:.4f} rank5={r.rank5:.4f} "
                   f"rank10={r.rank10:.4f} mAP={r.mAP:.4f} "
                   f"({r.n_queries} queries, {r.n_gallery} gallery, {r.skipped} skipped)")
    click.echo(f"results: {path}")


@main.command()
@click.option("--config", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--seeds", default="0", help="Comma-separated seeds, e.g. 0,1,2.")
@click.option("--out", type=click.Path(file_okay=False), default=None)
@_handled
def ablate(config, seeds, out) -> None:
    """Run the four-row component grid (baseline / +routing / +prompts / full)."""
    base_cfg = _load_config(config, None, out)
    seed_list = [int(s) for s in seeds.split(",") if s.strip()]
    root = Path(base_cfg.output.dir)
    table = []
    for row_name, trt, hpl, cmpr in ABLATION_ROWS:
        for seed in seed_list:
            cfg = copy.deepcopy(base_cfg)
            cfg.seed = seed
            cfg.ablation.enable_trt = trt
            cfg.ablation.enable_hpl = hpl
            cfg.ablation.enable_cmpr = cmpr
            run_dir = root / row_name / f"seed{seed}"
            ctx = build_training(cfg)
            train_all(ctx, run_dir)
            results = run_evaluation(ctx)
            write_results(results, run_dir, run_name=f"{row_name}-seed{seed}")
            entry = {"run": row_name, "seed": seed, "enable_trt": trt,
                     "enable_hpl": hpl, "enable_cmpr": cmpr}
            for r in results:
                entry[f"{r.task}_rank1"] = r.rank1
                entry[f"{r.task}_mAP"] = r.mAP
            table.append(entry)
            click.echo(f"{row_name} seed {seed}: " + " ".join(
                f"{k}={v:.4f}" for k, v in entry.items() if isinstance(v, float)))
    _write_table(root / "ablation_table.csv", table)
    click.echo(f"table: {root / 'ablation_table.csv'}")


TABLE_COLUMNS = ("run", "seed", "enable_trt", "enable_hpl", "enable_cmpr",
                 "t2i_rank1", "t2i_mAP", "i2i_rank1", "i2i_mAP")


def _write_table(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)


@main.command()
@click.argument("run_dirs", nargs=-1, required=True,
                type=click.Path(file_okay=False))
@click.option("--out", type=click.Path(file_okay=False), default="reports")
@click.option("--plots", is_flag=True, default=False,
              help="Also render loss-curve PNGs (needs matplotlib).")
@_handled
def report(run_dirs, out, plots) -> None:
    """Collect run directories into an ablation table and merged loss curves."""
    missing = [d for d in run_dirs if not Path(d).exists()]
    if missing:
        raise SystemExit(f"error: DataError: missing run dir(s): {', '.join(missing)}")
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    table, curves = [], []
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        results_path = run_dir / "results.json"
        if not results_path.exists():
            raise SystemExit(f"error: DataError: {run_dir} has no results.json")
        with open(results_path) as fh:
            results = json.load(fh)
        entry = {"run": run_dir.name, "seed": "", "enable_trt": "",
                 "enable_hpl": "", "enable_cmpr": ""}
        meta_path = run_dir / "stage2_final" / "meta.json"
        if meta_path.exists():
            with open(meta_path) as fh:
                snap = json.load(fh)["config"]
            entry["seed"] = snap["seed"]
            entry.update({k: snap["ablation"][k] for k in
                          ("enable_trt", "enable_hpl", "enable_cmpr")})
        for r in results:
            entry[f"{r['task']}_rank1"] = r["rank1"]
            entry[f"{r['task']}_mAP"] = r["mAP"]
        table.append(entry)
        for stage in (1, 2):
            curve_path = run_dir / f"stage{stage}_metrics.csv"
            if curve_path.exists():
                with open(curve_path, newline="") as fh:
                    for row in csv.DictReader(fh):
                        curves.append({"run": run_dir.name, **row})
    _write_table(out_dir / "ablation_table.csv", table)
    if curves:
        keys = ["run"] + [k for k in curves[-1] if k != "run"]
        with open(out_dir / "curves.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=keys, extrasaction="ignore")
            writer.writeheader()
            writer.writerows(curves)
    header = " | ".join(f"{c:>11}" for c in TABLE_COLUMNS)
    click.echo(header)
    click.echo("-" * len(header))
    for entry in table:
        click.echo(" | ".join(
            f"{entry.get(c, ''):>11.4f}" if isinstance(entry.get(c), float)
            else f"{str(entry.get(c, '')):>11}" for c in TABLE_COLUMNS))
    if plots:
        _render_plots(curves, out_dir)
    click.echo(f"report: {out_dir / 'ablation_table.csv'}")


def _render_plots(curves: list[dict], out_dir: Path) -> None:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        raise SystemExit("error: ConfigError: --plots needs matplotlib installed")
    by_run: dict[str, list[dict]] = {}
    for row in curves:
        if row.get("stage") == "2":
            by_run.setdefault(row["run"], []).append(row)
    fig, ax = plt.subplots(figsize=(7, 4))
    for run, rows in sorted(by_run.items()):
        epochs = [int(r["epoch"]) for r in rows]
        totals = [sum(float(r[k]) for k in r if k.startswith("l_")) for r in rows]
        ax.plot(epochs, totals, label=run)
    ax.set_xlabel("epoch")
    ax.set_ylabel("summed loss terms")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_dir / "loss_curves.png", dpi=120)
    plt.close(fig)


if __name__ == "__main__":
    main()
