from importlib import metadata

from .adl import (
    Fitter,
    WindowPredictions,
    fit_predict,
    fitting_loss,
    impute,
    reconstruct_plan,
)
from .checkpoint import RunManifest, load_checkpoint, save_checkpoint
from .common import (
    AlignmentPreconditionError,
    ConditioningError,
    ConfigurationError,
    DataError,
    DegenerateColumnError,
    DegenerateVectorError,
    DimensionError,
    EmptySequenceError,
    EmptySupportError,
    LabelError,
    MMAlignError,
    NonFiniteLossError,
    NumericalError,
    SchemaError,
    StatisticsError,
    UndefinedMetricError,
)
from .config import ModelConfig, TrainConfig
from .data import (
    Sample,
    SplitDataset,
    SplitSpec,
    apply_missing,
    ingest,
    split_dataset,
    synth_generate,
)
from .encoder import ModalitySequence, SharedRepr, cross_attend, encode
from .enums import (
    Ablation,
    Condition,
    FitLossMode,
    Modality,
    ResidualStyle,
    Setting,
    TargetFeatures,
    TaskMode,
)
from .evaluation import (
    MetricReport,
    SweepReport,
    paired_ttest,
    run_condition,
    fitter_shift_recovery,
    shift_recovery,
    window_sweep,
)
from .model import (
    MMAlignModel,
    ModelParams,
    Prediction,
    contrastive_loss,
    forward_complete,
    forward_missing,
    main_loss,
)
from .ot_align import (
    AlignmentPlan,
    BandedCost,
    band_slot_means,
    build_cost,
    sinkhorn,
    stream_rotation,
    transport_cost,
)
from .training import EpochReport, FitResult, Trainer, fit

# installed version, so it can lag behind an editable checkout
__version__ = metadata.version(__package__)
__distribution_name__ = metadata.metadata(__package__)["Name"]

__all__ = [
    # alignment
    "AlignmentPlan",
    "BandedCost",
    "build_cost",
    "sinkhorn",
    "stream_rotation",
    "transport_cost",
    "band_slot_means",
    # alignment dynamics learner
    "Fitter",
    "WindowPredictions",
    "fit_predict",
    "fitting_loss",
    "reconstruct_plan",
    "impute",
    # backbone
    "ModalitySequence",
    "SharedRepr",
    "encode",
    "cross_attend",
    "MMAlignModel",
    "ModelParams",
    "Prediction",
    "forward_complete",
    "forward_missing",
    "main_loss",
    "contrastive_loss",
    # training
    "ModelConfig",
    "TrainConfig",
    "Trainer",
    "EpochReport",
    "FitResult",
    "fit",
    "save_checkpoint",
    "load_checkpoint",
    "RunManifest",
    # data
    "Sample",
    "SplitSpec",
    "SplitDataset",
    "synth_generate",
    "split_dataset",
    "apply_missing",
    "ingest",
    # evaluation
    "MetricReport",
    "SweepReport",
    "run_condition",
    "window_sweep",
    "shift_recovery",
    "fitter_shift_recovery",
    "paired_ttest",
    # enums
    "Ablation",
    "Condition",
    "FitLossMode",
    "Modality",
    "ResidualStyle",
    "Setting",
    "TargetFeatures",
    "TaskMode",
    # exceptions
    "MMAlignError",
    "ConfigurationError",
    "DataError",
    "DimensionError",
    "SchemaError",
    "LabelError",
    "AlignmentPreconditionError",
    "EmptySequenceError",
    "NumericalError",
    "EmptySupportError",
    "DegenerateVectorError",
    "DegenerateColumnError",
    "ConditioningError",
    "NonFiniteLossError",
    "StatisticsError",
    "UndefinedMetricError",
]
