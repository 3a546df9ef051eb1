"""Reproducible benchmark for binary violence recognition in short videos."""

__version__ = "0.1.0"

from vidbench.augmentation import (  # noqa: E402
    AugmentationParams,
    SequenceAugmenter,
    apply_brightness,
    apply_gaussian_blur,
    apply_zoom,
    augment_sequence,
    sample_params,
)
from vidbench.data_ingest import (  # noqa: E402
    DatasetSplit,
    FrameLoader,
    FrameSequence,
    Label,
    TensorCache,
    VideoFrameExtractor,
    VideoSample,
    decode_and_resize,
    load_manifest,
    sample_frame_indices,
    split_dataset,
)
from vidbench.estimator import VideoClassifier  # noqa: E402
from vidbench.evaluation import (  # noqa: E402
    EvaluationReport,
    confusion_matrix,
    emit_report,
    metrics_from_confusion,
    predict_all,
)
from vidbench.experiment import (  # noqa: E402
    AblationSummary,
    ExperimentConfig,
    ablation_summary,
    run_experiment,
)
from vidbench.model_zoo import (  # noqa: E402
    Family,
    ModelHandle,
    ModelSpec,
    build_backbone_bilstm,
    build_cnn2d_bilstm,
    build_cnn3d,
    build_model,
    forward,
)
from vidbench.training import (  # noqa: E402
    TrainingConfig,
    TrainingHistory,
    default_config,
    exponential_lr,
    plateau_lr,
    train,
    tune_hyperparameters,
)
