"""Estimator-style facade so the segmenter composes like any fit/predict model.

    seg = FewShotPartSegmenter(design="ppl", max_steps=500, seed=1)
    seg.fit("data/synth", split_id=0)
    labels = seg.predict(episode)          # (H, W) part-id grid
    mean_iou = seg.score(episodes=50)

Constructor arguments are stored verbatim and exposed through
``get_params``/``set_params``; all fitted state lives in trailing-
underscore attributes.
"""

from __future__ import annotations

import inspect
import tempfile
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import DatasetIndex, Episode, build_splits, ingest_dataset
from .determinism import numpy_rng_for
from .errors import NotFittedError
from .segmentation import miou
from .training import (
    evaluate_model,
    load_model_from_checkpoint,
    train,
)
from .checkpointing import save_checkpoint


class FewShotPartSegmenter:
    """Few-shot part segmenter with prompt-conditioned textual prototypes."""

    def __init__(
        self,
        design: str = "ppl",
        n_specific: int = 4,
        n_shared: int = 4,
        n_text: int = 4,
        momentum: float = 0.99,
        alpha: float = 0.5,
        channels: int = 64,
        stride: int = 8,
        token_dim: int = 32,
        base_lr: float = 0.01,
        max_steps: int = 3000,
        k_shot: int = 1,
        seed: int = 0,
        background_in_softmax: bool = True,
        dtype: str = "float64",
        split_seed: int = 0,
        out_dir: str | None = None,
    ):
        self.design = design
        self.n_specific = n_specific
        self.n_shared = n_shared
        self.n_text = n_text
        self.momentum = momentum
        self.alpha = alpha
        self.channels = channels
        self.stride = stride
        self.token_dim = token_dim
        self.base_lr = base_lr
        self.max_steps = max_steps
        self.k_shot = k_shot
        self.seed = seed
        self.background_in_softmax = background_in_softmax
        self.dtype = dtype
        self.split_seed = split_seed
        self.out_dir = out_dir

    # -- sklearn-style parameter plumbing ---------------------------------

    @classmethod
    def _param_names(cls) -> list[str]:
        signature = inspect.signature(cls.__init__)
        return [name for name in signature.parameters if name != "self"]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params) -> "FewShotPartSegmenter":
        valid = set(self._param_names())
        for name, value in params.items():
            if name not in valid:
                raise ValueError(
                    f"invalid parameter {name!r} for FewShotPartSegmenter; "
                    f"valid parameters: {sorted(valid)}"
                )
            setattr(self, name, value)
        return self

    # -- fitting -----------------------------------------------------------

    def _build_config(self, data_root: str, split_id: int) -> RunConfig:
        return RunConfig(
            data_root=str(data_root),
            split_id=split_id,
            split_seed=self.split_seed,
            design=self.design,
            channels=self.channels,
            stride=self.stride,
            token_dim=self.token_dim,
            n_specific=self.n_specific,
            n_shared=self.n_shared,
            n_text=self.n_text,
            momentum=self.momentum,
            alpha=self.alpha,
            background_in_softmax=self.background_in_softmax,
            base_lr=self.base_lr,
            max_steps=self.max_steps,
            k_shot=self.k_shot,
            seed=self.seed,
            dtype=self.dtype,
        )

    def fit(self, data_root, split_id: int = 0) -> "FewShotPartSegmenter":
        """Episodic training on the base partition of ``data_root``."""
        root = data_root.root if isinstance(data_root, DatasetIndex) else data_root
        config = self._build_config(root, split_id)
        if self.out_dir is not None:
            out_dir = Path(self.out_dir)
            result = train(config, out_dir)
        else:
            with tempfile.TemporaryDirectory(prefix="partprompt_fit_") as tmp:
                result = train(config, Path(tmp))
        self.model_ = result.model
        self.config_ = config
        self.index_ = ingest_dataset(Path(root))
        self.split_ = build_splits(self.index_, split_id, self.split_seed)
        self.loss_history_ = result.loss_history
        return self

    def _check_fitted(self) -> None:
        if not hasattr(self, "model_"):
            raise NotFittedError(
                "this FewShotPartSegmenter is not fitted yet; call fit() or load()"
            )

    # -- inference -----------------------------------------------------------

    def predict(self, episode: Episode) -> np.ndarray:
        """Label grid for the episode's query image (never reads its mask)."""
        self._check_fitted()
        return self.model_.predict_episode(episode, alpha=self.alpha).labels

    def score_episode(self, episode: Episode) -> float:
        self._check_fitted()
        labels = self.predict(episode)
        report = miou(labels, episode.query.mask, episode.category.num_parts + 1)
        return report.mean_iou

    def score(
        self, episodes: int = 100, partition: str = "novel", eval_seed: int | None = None
    ) -> float:
        """Mean mIoU over sampled episodes of the fitted dataset's partition."""
        self._check_fitted()
        report = evaluate_model(
            self.model_,
            self.index_,
            self.split_,
            partition=partition,
            episodes=episodes,
            rng=numpy_rng_for(self.seed if eval_seed is None else eval_seed, "score"),
            alpha=self.alpha,
            k_shot=self.k_shot,
        )
        return report.miou_mean

    # -- persistence -----------------------------------------------------------

    def save(self, path) -> Path:
        self._check_fitted()
        return save_checkpoint(
            Path(path), self.model_, self.config_, step=self.config_.max_steps
        )

    @classmethod
    def load(cls, path, data_root=None) -> "FewShotPartSegmenter":
        """Rebuild an estimator from a checkpoint archive."""
        model, config = load_model_from_checkpoint(Path(path))
        est = cls(
            design=config.design,
            n_specific=config.n_specific,
            n_shared=config.n_shared,
            n_text=config.n_text,
            momentum=config.momentum,
            alpha=config.alpha,
            channels=config.channels,
            stride=config.stride,
            token_dim=config.token_dim,
            base_lr=config.base_lr,
            max_steps=config.max_steps,
            k_shot=config.k_shot,
            seed=config.seed,
            background_in_softmax=config.background_in_softmax,
            dtype=config.dtype,
            split_seed=config.split_seed,
        )
        est.model_ = model
        est.config_ = config
        root_value = data_root or config.data_root
        if root_value and (Path(root_value) / "manifest.json").is_file():
            est.index_ = ingest_dataset(Path(root_value))
            est.split_ = build_splits(est.index_, config.split_id, config.split_seed)
        return est
