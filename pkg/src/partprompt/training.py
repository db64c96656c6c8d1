"""Episodic training loop, evaluation, and the comparison harnesses.

Training samples one episode per optimizer step (batch granularity is a
single episode), uses SGD with momentum 0.9 under a polynomial learning
rate schedule, and runs the shared-token moving-average update after each
step for exactly the keys that episode consumed. The text encoder is
frozen throughout.

Every run writes ``resolved_config.json``, a ``metrics.jsonl`` stream (one
record per step, optional evaluation records) and a checkpoint archive.
All reports serialize deterministically (sorted keys, no timestamps) so
reruns with identical seeds reproduce output files bitwise in
deterministic mode.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpointing import load_checkpoint, read_manifest, restore_rng, save_checkpoint
from .config import RunConfig, write_resolved_config
from .data import (
    DatasetIndex,
    Episode,
    SplitSpec,
    build_splits,
    ingest_dataset,
    sample_episode,
)
from .determinism import (
    derive_seed,
    deterministic_mode_forced,
    enable_deterministic_execution,
    numpy_rng_for,
    resolve_dtype,
)
from .encoders import build_encoder_bundle
from .errors import NumericsError, SamplingError
from .model import PartSegmenter
from .segmentation import miou

CHECKPOINT_FILENAME = "checkpoint.ckpt"
METRICS_FILENAME = "metrics.jsonl"


def polynomial_lr(base_lr: float, step: int, max_steps: int, power: float) -> float:
    """lr_t = base_lr * (1 - t / max_steps)^power; non-increasing, 0 at the end."""
    if max_steps <= 0:
        return base_lr
    fraction = min(max(step / max_steps, 0.0), 1.0)
    return base_lr * (1.0 - fraction) ** power


def build_model(config: RunConfig) -> PartSegmenter:
    dtype = resolve_dtype(config.dtype)
    bundle = build_encoder_bundle(
        visual_arch=config.visual_arch,
        text_arch=config.text_arch,
        channels=config.channels,
        stride=config.stride,
        token_dim=config.token_dim,
        context_limit=config.context_limit,
        text_frozen=config.text_frozen,
        dtype=dtype,
        seed=config.seed,
    )
    return PartSegmenter(
        bundle=bundle,
        design=config.design,
        n_specific=config.n_specific,
        n_shared=config.n_shared,
        n_text=config.n_text,
        momentum=config.momentum,
        background_in_softmax=config.background_in_softmax,
        learned_background=config.learned_background,
        loss_weight_visual=config.loss_weight_visual,
        loss_weight_textual=config.loss_weight_textual,
        seed=config.seed,
    )


def prepare_run(config: RunConfig):
    """Ingest the dataset, build the split and a model with the base vocabulary."""
    index = ingest_dataset(Path(config.data_root))
    split = build_splits(index, config.split_id, config.split_seed)
    model = build_model(config)
    model.register_part_vocabulary(
        index.part_vocabulary(sorted(split.base_categories))
    )
    return index, split, model


@dataclass
class TrainResult:
    model: PartSegmenter
    config: RunConfig
    checkpoint_path: Path
    metrics_path: Path
    steps_run: int
    final_loss: float | None
    loss_history: list[float] = field(default_factory=list)


def _dump_numeric_failure(out_dir: Path, step: int, episode: Episode, detail: str) -> None:
    (Path(out_dir) / "numeric_failure.json").write_text(
        json.dumps(
            {"step": step, "episode": episode.sample_ids, "detail": detail},
            sort_keys=True,
            indent=2,
        ),
        encoding="utf-8",
    )


class _MetricsWriter:
    def __init__(self, path: Path, append: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a" if append else "w", encoding="utf-8")

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self) -> None:
        self._fh.flush()
        self._fh.close()


def train(
    config: RunConfig, out_dir: Path, resume_from: Path | None = None
) -> TrainResult:
    """Run (or resume) episodic training and write all run artifacts."""
    if deterministic_mode_forced():
        enable_deterministic_execution()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_resolved_config(config, out_dir)

    index, split, model = prepare_run(config)
    optimizer = torch.optim.SGD(
        model.trainable_parameters(), lr=config.base_lr, momentum=config.sgd_momentum
    )

    # Module constructors consume torch's global RNG; pin it so the saved
    # RNG snapshot (and thus the checkpoint bytes) depend only on the config.
    torch.manual_seed(derive_seed(config.seed, "torch_global"))

    start_step = 0
    sampler = numpy_rng_for(config.seed, "train_sampler")
    if resume_from is not None:
        manifest, rng_payload = load_checkpoint(resume_from, model, optimizer)
        start_step = manifest["step"]
        restored = restore_rng(rng_payload)
        if restored is not None:
            sampler = restored

    overfit_episode: Episode | None = None
    if config.overfit_one_episode:
        overfit_episode = sample_episode(
            index, split, "base", config.k_shot, numpy_rng_for(config.seed, "overfit_episode")
        )

    metrics = _MetricsWriter(out_dir / METRICS_FILENAME, append=start_step > 0)
    loss_history: list[float] = []
    final_loss: float | None = None
    try:
        for step in range(start_step, config.max_steps):
            lr = polynomial_lr(config.base_lr, step, config.max_steps, config.poly_power)
            for group in optimizer.param_groups:
                group["lr"] = lr

            episode = overfit_episode or sample_episode(
                index, split, "base", config.k_shot, sampler
            )
            try:
                outputs = model.forward_episode(episode, training=True)
                finite = bool(torch.isfinite(outputs.loss_total))
            except ValueError as exc:
                if "non-finite" not in str(exc):
                    raise
                _dump_numeric_failure(out_dir, step, episode, str(exc))
                raise NumericsError(
                    f"non-finite values at step {step} on episode "
                    f"{episode.sample_ids}: {exc}"
                ) from exc
            if not finite:
                _dump_numeric_failure(out_dir, step, episode, "non-finite loss")
                raise NumericsError(
                    f"non-finite loss at step {step} on episode {episode.sample_ids}; "
                    f"diagnostics at {out_dir / 'numeric_failure.json'}"
                )

            optimizer.zero_grad()
            outputs.loss_total.backward()
            optimizer.step()
            model.apply_ema_updates(outputs.bank_keys_used)

            record = {
                "step": step,
                "loss_vcl": outputs.loss_visual.item(),
                "loss_tcl": None
                if outputs.loss_textual is None
                else outputs.loss_textual.item(),
                "loss_total": outputs.loss_total.item(),
                "lr": lr,
            }
            final_loss = record["loss_total"]
            loss_history.append(final_loss)
            metrics.write(record)

            if config.eval_every > 0 and (step + 1) % config.eval_every == 0:
                report = evaluate_model(
                    model,
                    index,
                    split,
                    partition=config.eval_partition,
                    episodes=min(config.eval_episodes, 20),
                    rng=numpy_rng_for(config.seed, f"eval_during:{step}"),
                    alpha=config.alpha,
                    k_shot=config.k_shot,
                )
                metrics.write({"step": step, "eval_miou": report.miou_mean})

            if config.checkpoint_every > 0 and (step + 1) % config.checkpoint_every == 0:
                save_checkpoint(
                    out_dir / f"checkpoint_step_{step + 1}.ckpt",
                    model,
                    config,
                    step=step + 1,
                    optimizer=optimizer,
                    sampler_rng=sampler,
                )
    finally:
        metrics.close()

    checkpoint_path = save_checkpoint(
        out_dir / CHECKPOINT_FILENAME,
        model,
        config,
        step=config.max_steps,
        optimizer=optimizer,
        sampler_rng=sampler,
    )
    return TrainResult(
        model=model,
        config=config,
        checkpoint_path=checkpoint_path,
        metrics_path=out_dir / METRICS_FILENAME,
        steps_run=config.max_steps - start_step,
        final_loss=final_loss,
        loss_history=loss_history,
    )


# -- evaluation ----------------------------------------------------------


@dataclass
class EvalReport:
    partition: str
    alpha: float
    episode_count: int
    miou_mean: float
    miou_std: float
    per_episode_miou: list[float]
    episode_ids: list[dict]
    per_category: dict[str, dict]

    def to_json_dict(self) -> dict:
        return {
            "partition": self.partition,
            "alpha": self.alpha,
            "episode_count": self.episode_count,
            "miou_mean": self.miou_mean,
            "miou_std": self.miou_std,
            "per_episode_miou": self.per_episode_miou,
            "episode_ids": self.episode_ids,
            "per_category": self.per_category,
        }


def evaluate_model(
    model: PartSegmenter,
    index: DatasetIndex,
    split: SplitSpec,
    partition: str,
    episodes: int,
    rng: np.random.Generator,
    alpha: float,
    k_shot: int = 1,
) -> EvalReport:
    """Segment ``episodes`` sampled episodes and aggregate their mIoU.

    Pure read-only evaluation: no parameter updates, shared-token buffers
    consumed as-is.
    """
    was_training = model.training
    model.eval()
    scores: list[float] = []
    ids: list[dict] = []
    by_category: dict[str, list[float]] = {}
    try:
        with torch.no_grad():
            for _ in range(episodes):
                episode = sample_episode(index, split, partition, k_shot, rng)
                prediction = model.predict_episode(episode, alpha=alpha)
                report = miou(
                    prediction.labels,
                    episode.query.mask,
                    num_classes=episode.category.num_parts + 1,
                )
                score = report.mean_iou
                scores.append(score)
                ids.append(episode.sample_ids)
                by_category.setdefault(episode.category.name, []).append(score)
    finally:
        if was_training:
            model.train()
    mean = float(np.mean(scores))
    std = float(np.std(scores))
    per_category = {
        name: {"mean": float(np.mean(vals)), "count": len(vals)}
        for name, vals in sorted(by_category.items())
    }
    return EvalReport(
        partition=partition,
        alpha=alpha,
        episode_count=episodes,
        miou_mean=mean,
        miou_std=std,
        per_episode_miou=[float(s) for s in scores],
        episode_ids=ids,
        per_category=per_category,
    )


def load_model_from_checkpoint(path: Path) -> tuple[PartSegmenter, RunConfig]:
    """Rebuild the model a checkpoint describes and restore its tensors."""
    manifest = read_manifest(path)
    config = RunConfig.from_dict(manifest["config"])
    model = build_model(config)
    if model.bank is not None and manifest["bank"] is not None:
        model.bank.ensure_keys(manifest["bank"]["keys"])
        model.bank.to(next(model.bundle.parameters()).dtype)
    load_checkpoint(path, model)
    return model, config


def evaluate_checkpoint(
    checkpoint_path: Path,
    data_root: Path | None = None,
    partition: str = "novel",
    episodes: int = 200,
    alpha: float | None = None,
    seed: int | None = None,
) -> EvalReport:
    if deterministic_mode_forced():
        enable_deterministic_execution()
    model, config = load_model_from_checkpoint(checkpoint_path)
    index = ingest_dataset(Path(data_root or config.data_root))
    split = build_splits(index, config.split_id, config.split_seed)
    eval_seed = config.seed if seed is None else seed
    return evaluate_model(
        model,
        index,
        split,
        partition=partition,
        episodes=episodes,
        rng=numpy_rng_for(eval_seed, f"eval:{partition}"),
        alpha=config.alpha if alpha is None else alpha,
        k_shot=config.k_shot,
    )


def cross_domain_evaluate(
    checkpoint_path: Path,
    target_root: Path,
    episodes: int = 200,
    alpha: float | None = None,
    seed: int | None = None,
) -> EvalReport:
    """Evaluate a trained checkpoint directly on another dataset.

    No further optimization happens; part names never seen in training
    fall back to prompts with an empty shared block. Every category of the
    target dataset is treated as novel.
    """
    if deterministic_mode_forced():
        enable_deterministic_execution()
    model, config = load_model_from_checkpoint(checkpoint_path)
    index = ingest_dataset(Path(target_root))
    all_categories = frozenset(index.category_names())
    split = SplitSpec(
        split_id=0, base_categories=frozenset(), novel_categories=all_categories
    )
    eval_seed = config.seed if seed is None else seed
    try:
        return evaluate_model(
            model,
            index,
            split,
            partition="novel",
            episodes=episodes,
            rng=numpy_rng_for(eval_seed, "eval:xdomain"),
            alpha=config.alpha if alpha is None else alpha,
            k_shot=config.k_shot,
        )
    except SamplingError as exc:
        raise SamplingError(
            f"no evaluable categories in cross-domain target {target_root}: {exc}"
        ) from exc


# -- harnesses -----------------------------------------------------------

ABLATION_ROWS: tuple[tuple[str, dict], ...] = (
    ("protonet", {"design": "protonet"}),
    ("text_only", {"design": "ppl", "n_specific": 0, "n_shared": 0}),
    ("lgp", {"design": "lgp"}),
    ("lpp", {"design": "lpp"}),
    ("ppl", {"design": "ppl"}),
)


def _train_and_evaluate_row(config: RunConfig, row_dir: Path) -> dict:
    """One harness row: fresh training plus a paired-stream evaluation."""
    result = train(config, row_dir)
    index = ingest_dataset(Path(config.data_root))
    split = build_splits(index, config.split_id, config.split_seed)
    report = evaluate_model(
        result.model,
        index,
        split,
        partition=config.eval_partition,
        episodes=config.eval_episodes,
        rng=numpy_rng_for(config.seed, "harness_eval"),
        alpha=config.alpha,
        k_shot=config.k_shot,
    )
    return {
        "miou_mean": report.miou_mean,
        "miou_std": report.miou_std,
        "episode_ids": report.episode_ids,
        "final_loss": result.final_loss,
    }


def run_ablation(base_config: RunConfig, out_dir: Path, rows=ABLATION_ROWS) -> dict:
    """Train and evaluate every prompt design over identical episode streams."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_resolved_config(base_config, out_dir)
    report_rows = []
    for label, delta in rows:
        config = base_config.replace(**delta)
        row = _train_and_evaluate_row(config, out_dir / label)
        row.update(
            {
                "label": label,
                "design": config.design,
                "n_specific": config.n_specific,
                "n_shared": config.n_shared,
            }
        )
        report_rows.append(row)
    report = {"kind": "ablation", "rows": report_rows, "seed": base_config.seed}
    path = out_dir / "ablation_report.json"
    path.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return report


def sweep_momentum(base_config: RunConfig, values, out_dir: Path) -> dict:
    """Train and evaluate once per moving-average momentum value."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_resolved_config(base_config, out_dir)
    report_rows = []
    for value in values:
        config = base_config.replace(momentum=float(value))
        row = _train_and_evaluate_row(config, out_dir / f"m_{value}")
        row.update({"momentum": float(value)})
        report_rows.append(row)
    report = {"kind": "sweep_m", "rows": report_rows, "seed": base_config.seed}
    path = out_dir / "sweep_m_report.json"
    path.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return report
