"""Dual-modality semantic segmentation with missing-modality inference."""

from .alignment import (
    AlignmentBatch,
    AlignmentConfig,
    AlignmentOutcome,
    TranslationModule,
    alignment_losses,
    build_translators,
    gather_features,
    ncs_loss,
    psc_loss,
    sample_balanced_pixels,
)
from .backbone import (
    DualBranchFeatures,
    DualEncoderBackbone,
    Encoder,
    EncoderConfig,
    FeaturePyramid,
    ModalityStem,
    canonical_parameter_names,
    parameter_count,
)
from .config import RunConfig, load_run_config
from .data import (
    IGNORE,
    DatasetManifest,
    SampleRecord,
    SyntheticSceneConfig,
    class_histogram,
    generate_synthetic_dataset,
    iterate_batches,
    load_batch,
    read_raster,
    write_raster,
)
from .diagnostics import (
    ParamDistribution,
    SimilarityMatrix,
    class_similarity,
    collapse_monitor,
    export_param_distributions,
    grad_cam,
)
from .errors import (
    CheckpointConfigMismatch,
    CheckpointIntegrityError,
    ConfigurationError,
    DatasetError,
    NumericalDivergenceError,
)
from .evaluation import ConfusionMatrix, EvalReport, evaluate, mf1, miou
from .fusion import FPNDecoder, FusionModule, FusionStack, SCSEBlock
from .model import BaselineModel, Stars, build_from_description
from .training import (
    Checkpoint,
    StepReport,
    TrainConfig,
    Trainer,
    load_checkpoint,
    lr_schedule,
    restore_model,
    save_checkpoint,
    seg_loss,
    total_loss,
)

__version__ = "0.1.0"
