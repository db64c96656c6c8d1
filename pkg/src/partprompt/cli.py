"""Command-line interface.

Subcommands: gen-data, train, eval, ablate, sweep-m, xdomain, plot.
Every command takes an optional JSON config file (``--config``) which
individual flags override; the resolved configuration is written next to
the outputs. Exit codes: 0 success, 2 configuration error, 3 data error,
4 numeric failure. ``PARTSEG_DETERMINISTIC=1`` forces 64-bit
single-threaded deterministic execution.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click

from .config import RunConfig, resolve_config, write_resolved_config
from .data import (
    build_splits,
    default_synth_config,
    generate_synthetic_dataset,
    ingest_dataset,
    sample_episode,
    write_splits_file,
)
from .determinism import numpy_rng_for
from .errors import (
    ConfigurationError,
    DataValidationError,
    NumericsError,
    SamplingError,
)
from . import plotting, training

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _exit_code_for(exc: Exception) -> int:
    if isinstance(exc, ConfigurationError):
        return EXIT_CONFIG
    if isinstance(exc, (DataValidationError, SamplingError, OSError)):
        return EXIT_DATA
    if isinstance(exc, NumericsError):
        return EXIT_NUMERIC
    if isinstance(exc, ValueError):
        return EXIT_CONFIG
    return 1


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (
            ConfigurationError,
            DataValidationError,
            NumericsError,
            OSError,
            ValueError,
        ) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(_exit_code_for(exc))

    return wrapper


@click.group()
def main():
    """Few-shot part segmentation with part-aware prompt learning."""


_config_option = click.option(
    "--config", "config_path", type=click.Path(path_type=Path), default=None,
    help="JSON config file; flags override its values.",
)
_out_option = click.option(
    "--out", "out_dir", type=click.Path(path_type=Path), required=True,
    help="Output directory; all artifacts land here.",
)


@main.command("gen-data")
@click.option("--categories", type=int, default=6, show_default=True)
@click.option("--samples", type=int, default=40, show_default=True)
@click.option("--size", type=int, default=64, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@_out_option
@handle_errors
def cmd_gen_data(categories, samples, size, seed, out_dir):
    """Generate the synthetic part-annotated dataset."""
    synth = default_synth_config(
        num_categories=categories, samples_per_category=samples, image_size=size
    )
    index = generate_synthetic_dataset(synth, seed=seed, root=out_dir)
    write_splits_file(index, seed=0, path=Path(out_dir) / "splits.json")
    total = sum(index.num_samples(name) for name in index.category_names())
    click.echo(
        f"wrote {total} samples across {len(index.categories)} categories to {out_dir}"
    )
    for cat in index.categories:
        parts = ", ".join(p.normalized_name for p in cat.parts)
        click.echo(f"  {cat.name}: {index.num_samples(cat.name)} samples, parts [{parts}]")


def _write_effective_config(checkpoint: Path, out_dir: Path, **overrides) -> None:
    """Snapshot the checkpoint's config merged with the effective flag values."""
    from .checkpointing import read_manifest

    config = RunConfig.from_dict(read_manifest(checkpoint)["config"])
    effective = {k: v for k, v in overrides.items() if v is not None}
    write_resolved_config(config.replace(**effective), out_dir)


def _run_config(config_path, out_dir, **overrides) -> RunConfig:
    config = resolve_config(config_path, overrides)
    if not config.data_root:
        raise ConfigurationError("no dataset given: set --data or data_root in the config")
    if not Path(config.data_root).exists():
        raise DataValidationError(f"dataset root does not exist: {config.data_root}")
    return config


@main.command("train")
@_config_option
@_out_option
@click.option("--data", "data_root", type=str, default=None, help="Dataset root.")
@click.option("--design", type=click.Choice(["protonet", "lgp", "lpp", "ppl"]), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--split-id", "split_id", type=int, default=None)
@click.option("--steps", "max_steps", type=int, default=None)
@click.option("--lr", "base_lr", type=float, default=None)
@click.option("--m", "momentum", type=float, default=None, help="Shared-token EMA momentum.")
@click.option("--alpha", type=float, default=None, help="Visual/textual fusion weight.")
@click.option("--k-shot", "k_shot", type=int, default=None)
@click.option("--n-specific", "n_specific", type=int, default=None)
@click.option("--n-shared", "n_shared", type=int, default=None)
@click.option("--overfit-one", "overfit_one_episode", is_flag=True, default=None)
@click.option("--resume", "resume_from", type=click.Path(path_type=Path), default=None)
@handle_errors
def cmd_train(config_path, out_dir, resume_from, **overrides):
    """Episodic training on the base split."""
    config = _run_config(config_path, out_dir, **overrides)
    result = training.train(config, out_dir, resume_from=resume_from)
    click.echo(
        f"trained {result.steps_run} steps; final loss "
        f"{'n/a' if result.final_loss is None else f'{result.final_loss:.4f}'}; "
        f"checkpoint at {result.checkpoint_path}"
    )


@main.command("eval")
@click.option("--ckpt", "checkpoint", type=click.Path(path_type=Path), required=True)
@click.option("--data", "data_root", type=str, default=None)
@click.option("--episodes", type=int, default=200, show_default=True)
@click.option("--alpha", type=float, default=None)
@click.option("--partition", type=click.Choice(["base", "novel"]), default="novel")
@click.option("--seed", type=int, default=None)
@_out_option
@handle_errors
def cmd_eval(checkpoint, data_root, episodes, alpha, partition, seed, out_dir):
    """Evaluate a checkpoint on sampled episodes; writes a JSON report."""
    report = training.evaluate_checkpoint(
        checkpoint,
        data_root=data_root,
        partition=partition,
        episodes=episodes,
        alpha=alpha,
        seed=seed,
    )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_effective_config(
        checkpoint, out_dir,
        data_root=data_root, alpha=alpha, eval_episodes=episodes,
        eval_partition=partition, seed=seed,
    )
    path = out_dir / "eval_report.json"
    path.write_text(
        json.dumps(report.to_json_dict(), sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    click.echo(
        f"mIoU {report.miou_mean:.4f} +/- {report.miou_std:.4f} over "
        f"{report.episode_count} {partition} episodes; report at {path}"
    )


@main.command("ablate")
@_config_option
@_out_option
@click.option("--data", "data_root", type=str, default=None)
@click.option("--steps", "max_steps", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--episodes", "eval_episodes", type=int, default=None)
@handle_errors
def cmd_ablate(config_path, out_dir, **overrides):
    """Train and evaluate each prompt design over identical episode streams."""
    config = _run_config(config_path, out_dir, **overrides)
    report = training.run_ablation(config, out_dir)
    click.echo(f"{'label':>10}  {'mIoU':>8}  {'std':>8}")
    for row in report["rows"]:
        click.echo(f"{row['label']:>10}  {row['miou_mean']:8.4f}  {row['miou_std']:8.4f}")


@main.command("sweep-m")
@_config_option
@_out_option
@click.option(
    "--values", type=str, default="0,0.5,0.9,0.99", show_default=True,
    help="Comma-separated momentum values.",
)
@click.option("--data", "data_root", type=str, default=None)
@click.option("--steps", "max_steps", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--episodes", "eval_episodes", type=int, default=None)
@handle_errors
def cmd_sweep_m(config_path, out_dir, values, **overrides):
    """Train and evaluate once per shared-token momentum value."""
    try:
        parsed = [float(v) for v in values.split(",") if v.strip() != ""]
    except ValueError:
        raise ConfigurationError(f"cannot parse --values {values!r}")
    if not parsed:
        raise ConfigurationError("--values must name at least one momentum")
    for v in parsed:
        if not (0.0 <= v <= 1.0):
            raise ConfigurationError(f"momentum {v} outside [0, 1]")
    config = _run_config(config_path, out_dir, **overrides)
    report = training.sweep_momentum(config, parsed, out_dir)
    click.echo(f"{'m':>6}  {'mIoU':>8}  {'std':>8}")
    for row in report["rows"]:
        click.echo(f"{row['momentum']:6.2f}  {row['miou_mean']:8.4f}  {row['miou_std']:8.4f}")


@main.command("xdomain")
@click.option("--ckpt", "checkpoint", type=click.Path(path_type=Path), required=True)
@click.option("--data-b", "target_root", type=str, required=True,
              help="Target dataset root (evaluated without further training).")
@click.option("--episodes", type=int, default=200, show_default=True)
@click.option("--alpha", type=float, default=None)
@click.option("--seed", type=int, default=None)
@_out_option
@handle_errors
def cmd_xdomain(checkpoint, target_root, episodes, alpha, seed, out_dir):
    """Cross-domain evaluation of a checkpoint on a second dataset."""
    report = training.cross_domain_evaluate(
        checkpoint, target_root, episodes=episodes, alpha=alpha, seed=seed
    )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_effective_config(
        checkpoint, out_dir,
        data_root=target_root, alpha=alpha, eval_episodes=episodes, seed=seed,
    )
    path = out_dir / "xdomain_report.json"
    path.write_text(
        json.dumps(report.to_json_dict(), sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    click.echo(
        f"cross-domain mIoU {report.miou_mean:.4f} +/- {report.miou_std:.4f}; report at {path}"
    )


@main.command("plot")
@click.option("--metrics", "metrics_path", type=click.Path(path_type=Path), default=None,
              help="metrics.jsonl for a loss curve.")
@click.option("--report", "report_path", type=click.Path(path_type=Path), default=None,
              help="Sweep/ablation report for a bar chart.")
@click.option("--eval-report", "eval_report_path", type=click.Path(path_type=Path),
              default=None, help="Evaluation report for per-category IoU bars.")
@click.option("--ckpt", "checkpoint", type=click.Path(path_type=Path), default=None,
              help="Checkpoint for a qualitative prediction panel.")
@click.option("--data", "data_root", type=str, default=None)
@click.option("--episode-seed", type=int, default=0, show_default=True)
@_out_option
@handle_errors
def cmd_plot(metrics_path, report_path, eval_report_path, checkpoint, data_root,
             episode_seed, out_dir):
    """Render figures from run artifacts to PNG files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    made = []
    if metrics_path is not None:
        made.append(plotting.plot_loss_curve(metrics_path, out_dir / "loss_curve.png"))
    if report_path is not None:
        made.append(plotting.plot_sweep_bars(report_path, out_dir / "sweep_bars.png"))
    if eval_report_path is not None:
        report = json.loads(Path(eval_report_path).read_text(encoding="utf-8"))
        made.append(plotting.plot_per_class_iou(report, out_dir / "per_category_iou.png"))
    if checkpoint is not None:
        model, config = training.load_model_from_checkpoint(checkpoint)
        index = ingest_dataset(Path(data_root or config.data_root))
        split = build_splits(index, config.split_id, config.split_seed)
        rng = numpy_rng_for(episode_seed, "plot_episode")
        episode = sample_episode(index, split, "novel", config.k_shot, rng)
        prediction = model.predict_episode(episode, alpha=config.alpha)
        made.append(
            plotting.plot_qualitative(
                episode.query.image,
                episode.query.mask,
                prediction.labels,
                out_dir / "qualitative.png",
            )
        )
    if not made:
        raise ConfigurationError(
            "nothing to plot: pass --metrics, --report, --eval-report and/or --ckpt"
        )
    for path in made:
        click.echo(f"wrote {path}")


if __name__ == "__main__":
    main()
