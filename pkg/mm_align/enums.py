from enum import Enum
from typing import TypeVar

from enum_properties import EnumProperties, p  # type: ignore

try:
    from enum_tools import document_enum
except ImportError:  # enum_tools is only available when doc deps installed

    T = TypeVar("T")

    def document_enum(x: T) -> T:  # type: ignore[misc]
        return x


@document_enum
class Modality(Enum):
    """
    The two modality streams of a sample.
    """

    M1 = "m1"
    "Surviving modality (always present)"
    M2 = "m2"
    "Victim modality (may be missing)"


class Setting(EnumProperties, p("full_name")):  # type: ignore[misc]
    A = "A", "victim modality absent from every val/test sample"
    B = "B", "victim modality absent from val/test at the training rate"


class TaskMode(
    EnumProperties,  # type: ignore[misc]
    p("metric"),
    p("higher_is_better"),
):
    REGRESSION = "regression", "mae", False
    CLASSIFICATION = "classification", "macro_f1", True


@document_enum
class FitLossMode(Enum):
    """
    How the fitter's predictions are compared to the Sinkhorn targets.
    """

    MSE = "mse"
    "Mean of squared differences over valid band slots"
    SCALED_ROOT = "scaled-root"
    "Root of the summed squared differences, scaled by 1/((2W+1)l)"


@document_enum
class ResidualStyle(Enum):
    """
    Residual/normalization arrangement of a transformer layer.
    """

    INNER_LN = "inner_ln"
    "FFN(Z) + LN(Z) with Z = MATT + x"
    PRE_LN = "pre_ln"
    "FFN(LN(Z)) + Z with Z = MATT + x"
    POST_LN = "post_ln"
    "LN2(Z + FFN(Z)) with Z = LN1(MATT + x)"


class Ablation(EnumProperties, p("full_name")):  # type: ignore[misc]
    NONE = "none", "full model"
    NO_CON = "no-con", "without the contrastive loss (lambda = 0)"
    RANDOM_FITTER = "random-fitter", "fitter never trained (random plans)"
    SPLIT_LOOP = "split-loop", "fitter and backbone steps in separate passes"


class Condition(
    EnumProperties,  # type: ignore[misc]
    p("full_name"),
    p("masks_training"),
):
    MM_ALIGN = "mm-align", "ADL imputation with denoising training", True
    LOWER_BOUND = "lb", "single-modality backbone (no victim input)", True
    UPPER_BOUND = "ub", "both modalities complete everywhere", False
    ZERO_IMPUTE = "zero-impute", "victim representation replaced by 0", True


@document_enum
class TargetFeatures(Enum):
    """
    Features the fitter's Sinkhorn targets are computed on.
    """

    SHARED = "shared"
    "Encoded content positions of both streams"
    INPUT = "input"
    "Raw inputs, victim stream rotated into the surviving stream's frame"
