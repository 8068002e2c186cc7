"""
Model and training hyperparameters plus the flat ``key=value`` config file.
"""
from collections.abc import Mapping
from dataclasses import asdict, dataclass, fields
from enum import Enum
from pathlib import Path
from typing import Any, Type, TypeVar

from .common import ConfigurationError
from .enums import (
    Ablation,
    FitLossMode,
    ResidualStyle,
    Setting,
    TargetFeatures,
    TaskMode,
)

C = TypeVar("C", bound="_DictConfig")


class _DictConfig:
    def to_dict(self) -> dict[str, Any]:
        return {
            key: value.value if isinstance(value, Enum) else value
            for key, value in asdict(self).items()  # type: ignore
        }

    @classmethod
    def from_dict(cls: Type[C], data: Mapping[str, Any]) -> C:
        kwargs = {}
        for f in fields(cls):  # type: ignore[arg-type]
            if f.name not in data:
                continue
            value = data[f.name]
            if isinstance(f.type, type) and issubclass(f.type, Enum):
                value = f.type(value)
            kwargs[f.name] = value
        return cls(**kwargs)


@dataclass
class ModelConfig(_DictConfig):
    d_in1: int = 8
    "Feature dimension of the surviving modality"
    d_in2: int = 8
    "Feature dimension of the victim modality"
    d_model: int = 32
    num_heads: int = 4
    ffn_dim: int = 64
    encoder_layers: int = 1
    fusion_layers: int = 2
    max_len: int = 256
    "Size of the learned positional table (sequence length + head token)"
    positional: bool = True
    residual_style: ResidualStyle = ResidualStyle.INNER_LN
    task: TaskMode = TaskMode.REGRESSION
    num_classes: int = 7
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        for name in ("d_in1", "d_in2", "d_model", "num_heads", "ffn_dim"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.d_model % self.num_heads != 0:
            raise ConfigurationError(
                f"d_model={self.d_model} not divisible by "
                f"num_heads={self.num_heads}"
            )
        if self.encoder_layers < 0 or self.fusion_layers < 0:
            raise ConfigurationError("layer counts must be >= 0")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")

    @property
    def out_dim(self) -> int:
        return 1 if self.task is TaskMode.REGRESSION else self.num_classes


@dataclass
class TrainConfig(_DictConfig):
    eta_main: float = 1e-3
    "Backbone learning rate"
    eta_fit: float = 5e-4
    "Fitter learning rate"
    batch_size: int = 32
    lambda_con: float = 0.1
    "Weight of the contrastive loss"
    mu: float = 0.1
    "Entropic weight of the Sinkhorn solver"
    tau: float = 0.1
    "Contrastive temperature"
    window: int = 8
    warm_up_epochs: int = 1
    patience: int = 10
    max_epochs: int = 30
    surviving_rate: float = 0.5
    setting: Setting = Setting.A
    seed: int = 0
    fit_loss_mode: FitLossMode = FitLossMode.MSE
    column_renorm: bool = True
    ablation: Ablation = Ablation.NONE
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    sinkhorn_tol: float = 1e-6
    sinkhorn_max_iter: int = 500
    log_domain_retry: bool = False
    target_features: TargetFeatures = TargetFeatures.SHARED
    "Features the fitter's Sinkhorn targets are computed on"
    column_relaxation: float | None = None
    "KL weight of a relaxed target column marginal (None: balanced)"

    def __post_init__(self):
        if self.column_relaxation is not None and self.column_relaxation < 0:
            raise ConfigurationError("column_relaxation must be >= 0")
        for name in ("eta_main", "eta_fit", "mu", "tau", "sinkhorn_tol"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be > 0")
        if self.lambda_con < 0:
            raise ConfigurationError("lambda_con must be >= 0")
        if not 0 < self.surviving_rate <= 1:
            raise ConfigurationError(
                f"surviving rate p must be in (0, 1], "
                f"got {self.surviving_rate}"
            )
        if self.window < 0:
            raise ConfigurationError(f"window must be >= 0, got {self.window}")
        if self.batch_size < 1:
            raise ConfigurationError("batch size must be >= 1")
        for name in ("warm_up_epochs", "patience"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        if self.max_epochs < 1 or self.sinkhorn_max_iter < 1:
            raise ConfigurationError(
                "max_epochs and sinkhorn_max_iter must be >= 1"
            )
        if not 0 <= self.adam_beta1 < 1 or not 0 <= self.adam_beta2 < 1:
            raise ConfigurationError("Adam decay rates must be in [0, 1)")

    @property
    def effective_lambda(self) -> float:
        return 0.0 if self.ablation is Ablation.NO_CON else self.lambda_con


def load_flat_config(path: Path) -> dict[str, str]:
    """
    Read a flat ``key=value`` file.

    Blank lines and lines starting with ``#`` are ignored, keys are
    normalized to use underscores.
    """
    values: dict[str, str] = {}
    for line_number, line in enumerate(
        path.read_text(encoding="utf-8").splitlines(), start=1
    ):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        if not sep or not key.strip():
            raise ConfigurationError(
                f"{path}:{line_number}: expected key=value, got {line!r}"
            )
        values[key.strip().replace("-", "_")] = value.strip()
    return values
