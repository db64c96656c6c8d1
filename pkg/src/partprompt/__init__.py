"""Few-shot part segmentation with prototype pooling and part-aware prompts."""

from .config import RunConfig
from .data import (
    Category,
    DatasetIndex,
    Episode,
    PartClass,
    Sample,
    SplitSpec,
    SynthConfig,
    build_splits,
    default_synth_config,
    generate_synthetic_dataset,
    ingest_dataset,
    sample_episode,
)
from .encoders import EncoderBundle, FeatureMap, TokenSequence, build_encoder_bundle
from .errors import (
    ConfigurationError,
    DataValidationError,
    NotFittedError,
    NumericsError,
    PartPromptError,
    SamplingError,
)
from .estimator import FewShotPartSegmenter
from .model import PartSegmenter
from .prompts import SharedTokenBank, select_prompt_design
from .prototypes import compute_prototype_set, downsample_mask, masked_average_pool
from .segmentation import (
    MiouReport,
    contrast_loss,
    correlate,
    miou,
    predict_segmentation,
    softmax_prob,
    total_loss,
)
from .training import (
    EvalReport,
    cross_domain_evaluate,
    evaluate_checkpoint,
    evaluate_model,
    load_model_from_checkpoint,
    run_ablation,
    sweep_momentum,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "Category",
    "ConfigurationError",
    "DatasetIndex",
    "DataValidationError",
    "EncoderBundle",
    "Episode",
    "EvalReport",
    "FeatureMap",
    "FewShotPartSegmenter",
    "MiouReport",
    "NotFittedError",
    "NumericsError",
    "PartClass",
    "PartPromptError",
    "PartSegmenter",
    "RunConfig",
    "Sample",
    "SamplingError",
    "SharedTokenBank",
    "SplitSpec",
    "SynthConfig",
    "TokenSequence",
    "build_encoder_bundle",
    "build_splits",
    "compute_prototype_set",
    "contrast_loss",
    "correlate",
    "cross_domain_evaluate",
    "default_synth_config",
    "downsample_mask",
    "evaluate_checkpoint",
    "evaluate_model",
    "generate_synthetic_dataset",
    "ingest_dataset",
    "load_model_from_checkpoint",
    "masked_average_pool",
    "miou",
    "predict_segmentation",
    "run_ablation",
    "sample_episode",
    "select_prompt_design",
    "softmax_prob",
    "sweep_momentum",
    "total_loss",
    "train",
]
