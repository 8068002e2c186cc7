"""
The full network: two unimodal encoders, the alignment dynamics learner,
cross-modal fusion in both directions and the output head, plus the main
and contrastive losses.

Batched arrays are ``(batch, time, features)``; all sequences within a
batch share one length.
"""
import hashlib
from collections.abc import Iterable, Mapping
from dataclasses import dataclass
from typing import Any

import numpy as np
import numpy.typing as npt
from scipy.special import logsumexp

from .adl import (
    Fitter,
    impute_content,
    impute_content_backward,
    reconstruct_band,
)
from .common import (
    AlignmentPreconditionError,
    ConfigurationError,
    LabelError,
    NumericalError,
)
from .config import ModelConfig
from .encoder import (
    CrossModalStack,
    ModalityEncoder,
    ModalitySequence,
    SharedRepr,
)
from .enums import TaskMode
from .layers import Linear
from .numerics import Grads, Matrix, Module, masked_softmax

param_groups: dict[str, tuple[str, ...]] = {
    "theta_enc": ("enc1", "enc2"),
    "theta_fu": ("fuse12", "fuse21"),
    "theta_out": ("head",),
    "psi": ("fitter",),
}
"Top-level children making up each parameter group"

theta_groups = ("theta_enc", "theta_fu", "theta_out")


class OutputHead(Module):
    """
    ``W_2 tanh(W_1 [z_12, z_21] + b_1) + b_2`` on the fused head tokens.
    """

    def __init__(self, rng: np.random.Generator, dim: int, out_dim: int):
        super().__init__()
        self.hidden = self.add_child("hidden", Linear(rng, 2 * dim, dim))
        self.output = self.add_child("output", Linear(rng, dim, out_dim))

    def forward(self, features: Matrix):
        pre, hidden_cache = self.hidden.forward(features)
        activated = np.tanh(pre)
        out, output_cache = self.output.forward(activated)
        return out, (activated, hidden_cache, output_cache)

    def backward(self, d_out: Matrix, cache):
        activated, hidden_cache, output_cache = cache
        d_activated, output_grads = self.output.backward(d_out, output_cache)
        d_features, hidden_grads = self.hidden.backward(
            d_activated * (1.0 - activated**2), hidden_cache
        )
        return d_features, {
            **self.prefixed("hidden", hidden_grads),
            **self.prefixed("output", output_grads),
        }


@dataclass
class ForwardCache:
    """
    Intermediate values of one batched forward pass.

    ``z1`` and ``z2`` are the shared representations (head token first)
    fed into fusion; in the missing-modality path ``z2`` is the imputed
    one and ``plan_band`` the reconstructed plan used for it.
    """

    kind: str
    z1: Matrix
    z2: Matrix
    enc1: Any
    enc2: Any
    fuse12: Any
    fuse21: Any
    head: Any
    plan_band: Matrix | None = None


def _check_batch(x: Matrix, name: str) -> Matrix:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[1] < 1:
        raise AlignmentPreconditionError(
            f"{name} must be a (batch, l >= 1, d) array, got {x.shape}"
        )
    return x


class MMAlignModel(Module):
    """
    Backbone network (encoders, fusion, head) plus the fitter.

    Args:
        config: Architecture hyperparameters.
        window: Band radius ``W`` of the alignment dynamics learner.
        rng: Generator used for parameter initialization.
        renormalize: Whether plans reconstructed from the fitter are
            rescaled to unit column mass.
    """

    def __init__(
        self,
        config: ModelConfig,
        window: int,
        rng: np.random.Generator,
        renormalize: bool = True,
    ):
        super().__init__()
        if window < 0:
            raise ConfigurationError(f"window must be >= 0, got {window}")
        self.config = config
        self.window = window
        self.renormalize = renormalize
        dim = config.d_model

        def encoder(in_dim: int) -> ModalityEncoder:
            return ModalityEncoder(
                rng,
                in_dim,
                dim,
                config.num_heads,
                config.ffn_dim,
                config.encoder_layers,
                config.max_len,
                config.positional,
                config.residual_style,
                config.layer_norm_eps,
            )

        def fusion() -> CrossModalStack:
            return CrossModalStack(
                rng,
                dim,
                config.num_heads,
                config.ffn_dim,
                config.fusion_layers,
                config.residual_style,
                config.layer_norm_eps,
            )

        self.enc1 = self.add_child("enc1", encoder(config.d_in1))
        self.enc2 = self.add_child("enc2", encoder(config.d_in2))
        # fuse12 refines the victim sequence with the surviving one,
        # fuse21 the other way round
        self.fuse12 = self.add_child("fuse12", fusion())
        self.fuse21 = self.add_child("fuse21", fusion())
        self.head = self.add_child(
            "head", OutputHead(rng, dim, config.out_dim)
        )
        self.fitter = self.add_child("fitter", Fitter(rng, dim, window))

    @property
    def task(self) -> TaskMode:
        return self.config.task

    # forward paths

    def _fuse_and_head(
        self, kind: str, z1: Matrix, z2: Matrix, enc1: Any, enc2: Any, **kw
    ) -> tuple[Matrix, ForwardCache]:
        f12, fuse12_cache = self.fuse12.forward((z2, z1))
        f21, fuse21_cache = self.fuse21.forward((z1, z2))
        features = np.concatenate([f12[:, 0], f21[:, 0]], axis=-1)
        out, head_cache = self.head.forward(features)
        return out, ForwardCache(
            kind,
            z1,
            z2,
            enc1,
            enc2,
            fuse12_cache,
            fuse21_cache,
            head_cache,
            **kw,
        )

    def forward_complete(
        self, x1: Matrix, x2: Matrix
    ) -> tuple[Matrix, ForwardCache]:
        """
        Both modalities present; returns head outputs ``(batch, out)``.
        """
        x1 = _check_batch(x1, "x1")
        x2 = _check_batch(x2, "x2")
        if x1.shape[:2] != x2.shape[:2]:
            raise AlignmentPreconditionError(
                f"modality batches differ in batch size or length: "
                f"{x1.shape[:2]} vs {x2.shape[:2]}"
            )
        z1, enc1_cache = self.enc1.forward(x1)
        z2, enc2_cache = self.enc2.forward(x2)
        return self._fuse_and_head(
            "complete", z1, z2, enc1_cache, enc2_cache
        )

    def impute_victim(
        self, z1: Matrix, zero_impute: bool = False
    ) -> tuple[Matrix, Matrix | None]:
        """
        Imputed victim representation for encoded surviving sequences.

        The fitter is evaluated without keeping a cache: its output is a
        constant of the backbone's computation graph.
        """
        batch, positions, dim = z1.shape
        head = np.broadcast_to(self.enc2.head_token, (batch, 1, dim))
        if zero_impute:
            content = np.zeros((batch, positions - 1, dim))
            plan_band = None
        else:
            probs, _ = self.fitter.forward(z1[:, 1:])
            plan_band = reconstruct_band(probs, self.renormalize)
            content = impute_content(plan_band, z1[:, 1:])
        return np.concatenate([head, content], axis=1), plan_band

    def forward_missing(
        self, x1: Matrix, zero_impute: bool = False
    ) -> tuple[Matrix, ForwardCache]:
        """
        Victim modality absent: encode ``x1``, impute the victim's shared
        representation from the fitter's plan and fuse as usual.
        """
        x1 = _check_batch(x1, "x1")
        z1, enc1_cache = self.enc1.forward(x1)
        z2, plan_band = self.impute_victim(z1, zero_impute)
        return self._fuse_and_head(
            "missing", z1, z2, enc1_cache, None, plan_band=plan_band
        )

    def forward_single(self, x1: Matrix) -> tuple[Matrix, ForwardCache]:
        """
        Single-modality backbone: the surviving sequence is fused with
        itself in both directions.
        """
        x1 = _check_batch(x1, "x1")
        z1, enc1_cache = self.enc1.forward(x1)
        return self._fuse_and_head("single", z1, z1, enc1_cache, None)

    # backward

    def backward(
        self,
        d_out: Matrix,
        cache: ForwardCache,
        d_z1: Matrix | None = None,
        d_z2: Matrix | None = None,
    ) -> Grads:
        """
        Backbone gradients of a forward pass.

        Args:
            d_out: Gradient w.r.t. the head outputs.
            cache: Cache returned by one of the forward methods.
            d_z1: Extra gradient w.r.t. the surviving shared representation
                (e.g. from the contrastive loss).
            d_z2: Same for the victim representation (complete path only).

        Returns:
            Gradients keyed like :attr:`params`; never contains fitter keys.
        """
        dim = cache.z1.shape[-1]
        d_features, head_grads = self.head.backward(d_out, cache.head)
        d_f12 = np.zeros_like(cache.z2)
        d_f12[:, 0] = d_features[:, :dim]
        d_f21 = np.zeros_like(cache.z1)
        d_f21[:, 0] = d_features[:, dim:]
        (d_z2_target, d_z1_source), fuse12_grads = self.fuse12.backward(
            d_f12, cache.fuse12
        )
        (d_z1_target, d_z2_source), fuse21_grads = self.fuse21.backward(
            d_f21, cache.fuse21
        )
        grad_z1 = d_z1_target
        if d_z1_source is not None:
            grad_z1 = grad_z1 + d_z1_source
        grad_z2 = d_z2_target
        if d_z2_source is not None:
            grad_z2 = grad_z2 + d_z2_source
        if d_z1 is not None:
            grad_z1 = grad_z1 + d_z1
        if d_z2 is not None:
            grad_z2 = grad_z2 + d_z2
        grads: Grads = {
            **self.prefixed("head", head_grads),
            **self.prefixed("fuse12", fuse12_grads),
            **self.prefixed("fuse21", fuse21_grads),
        }
        if cache.kind == "complete":
            _, enc2_grads = self.enc2.backward(grad_z2, cache.enc2)
            grads.update(self.prefixed("enc2", enc2_grads))
        elif cache.kind == "missing":
            grads["enc2.head_token"] = grad_z2[:, 0].sum(axis=0)
            if cache.plan_band is not None:
                grad_z1 = grad_z1.copy()
                grad_z1[:, 1:] += impute_content_backward(
                    cache.plan_band, grad_z2[:, 1:]
                )
        else:
            grad_z1 = grad_z1 + grad_z2
        _, enc1_grads = self.enc1.backward(grad_z1, cache.enc1)
        grads.update(self.prefixed("enc1", enc1_grads))
        return grads


@dataclass
class ModelParams:
    """
    Partition of a model's parameters into the backbone groups and the
    fitter's.

    Values are the model's own arrays (shared by reference).
    """

    theta_enc: dict[str, Matrix]
    theta_fu: dict[str, Matrix]
    theta_out: dict[str, Matrix]
    psi: dict[str, Matrix]

    @classmethod
    def of(cls, model: Module) -> "ModelParams":
        groups: dict[str, dict[str, Matrix]] = {g: {} for g in param_groups}
        for name, value in model.named_params():
            top = name.split(".", 1)[0]
            owners = [g for g, tops in param_groups.items() if top in tops]
            if len(owners) != 1:
                raise ConfigurationError(
                    f"parameter {name!r} belongs to {len(owners)} groups"
                )
            groups[owners[0]][name] = value
        return cls(**groups)

    def groups(self) -> dict[str, dict[str, Matrix]]:
        return {name: getattr(self, name) for name in param_groups}

    @property
    def theta(self) -> dict[str, Matrix]:
        return {**self.theta_enc, **self.theta_fu, **self.theta_out}

    def digest(self, group: str | None = None) -> str:
        if group is None:
            return params_digest(
                {
                    name: value
                    for values in self.groups().values()
                    for name, value in values.items()
                }
            )
        return params_digest(self.groups()[group])


def params_digest(params: Mapping[str, Matrix]) -> str:
    "SHA-256 over parameter names and little-endian f64 bytes"
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    return h.hexdigest()


def group_of(name: str) -> str:
    top = name.split(".", 1)[0]
    for group, tops in param_groups.items():
        if top in tops:
            return group
    raise KeyError(name)


def select_grads(grads: Grads, groups: Iterable[str]) -> Grads:
    wanted = set(groups)
    return {k: v for k, v in grads.items() if group_of(k) in wanted}


# predictions and losses


@dataclass
class Prediction:
    """
    A single prediction: a real score for regression, class logits for
    classification.
    """

    task: TaskMode
    value: Matrix

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if not np.isfinite(self.value).all():
            raise NumericalError("prediction is not finite")

    @property
    def score(self) -> float:
        if self.task is not TaskMode.REGRESSION:
            raise ConfigurationError(
                "classification predictions have no score"
            )
        return float(self.value.reshape(-1)[0])

    @property
    def label(self) -> int:
        if self.task is TaskMode.REGRESSION:
            raise ConfigurationError("regression predictions have no label")
        return int(np.argmax(self.value))


def _labels_as_classes(y: npt.ArrayLike, num_classes: int) -> np.ndarray:
    labels = np.asarray(y)
    if labels.dtype.kind == "f":
        integral = np.all(np.isfinite(labels)) and np.all(
            labels == np.round(labels)
        )
        if not integral:
            raise LabelError(f"class labels must be integers, got {labels}")
    classes = labels.astype(np.int64)
    if classes.size and (classes.min() < 0 or classes.max() >= num_classes):
        raise LabelError(
            f"class index out of range [0, {num_classes}): {classes}"
        )
    return classes


def main_loss_and_grad(
    output: Matrix, y: npt.ArrayLike, task: TaskMode
) -> tuple[float, Matrix]:
    """
    Batch mean of the main loss and its gradient w.r.t. the head outputs.

    Args:
        output: Head outputs ``(batch, 1)`` or ``(batch, classes)``.
        y: Real targets (regression) or class indices (classification).
        task: Task mode.
    """
    batch = output.shape[0]
    if task is TaskMode.REGRESSION:
        target = np.asarray(y, dtype=np.float64).reshape(batch)
        diff = output[:, 0] - target
        d_out = np.zeros_like(output)
        d_out[:, 0] = 2.0 * diff / batch
        return float(np.mean(diff**2)), d_out
    classes = _labels_as_classes(y, output.shape[1]).reshape(batch)
    rows = np.arange(batch)
    log_probs = output - logsumexp(output, axis=1, keepdims=True)
    probs = masked_softmax(output)
    d_out = probs.copy()
    d_out[rows, classes] -= 1.0
    return float(-log_probs[rows, classes].mean()), d_out / batch


def main_loss(pred: Prediction, y: float | int) -> float:
    """
    Squared error for regression, cross-entropy for classification.
    """
    loss, _ = main_loss_and_grad(
        pred.value.reshape(1, -1), np.array([y]), pred.task
    )
    return loss


def pool(z: Matrix) -> Matrix:
    "Mean over content positions (head token excluded)"
    return z[..., 1:, :].mean(axis=-2)


def pool_backward(d_pooled: Matrix, z: Matrix) -> Matrix:
    d_z = np.zeros_like(z)
    d_z[..., 1:, :] = d_pooled[..., None, :] / (z.shape[-2] - 1)
    return d_z


def contrastive_loss_and_grad(
    p1: Matrix, p2: Matrix, tau: float
) -> tuple[float, Matrix, Matrix]:
    """
    InfoNCE over pooled vectors ``(batch, d)`` with scores ``p1 p2^T / tau``.

    Returns:
        The loss and its gradients w.r.t. ``p1`` and ``p2``.
    """
    if tau <= 0:
        raise ConfigurationError(f"temperature tau must be > 0, got {tau}")
    if p1.shape != p2.shape or p1.ndim != 2 or p1.shape[0] < 1:
        raise AlignmentPreconditionError(
            f"pooled batches must be equal (N >= 1, d) arrays, got "
            f"{p1.shape} and {p2.shape}"
        )
    batch = p1.shape[0]
    scores = p1 @ p2.T / tau
    loss = float(np.mean(logsumexp(scores, axis=1) - np.diag(scores)))
    d_scores = (masked_softmax(scores) - np.eye(batch)) / batch
    return loss, d_scores @ p2 / tau, d_scores.T @ p1 / tau


def contrastive_loss(z1: Matrix, z2: Matrix, tau: float) -> float:
    """
    Contrastive loss between two batches of shared representations
    ``(batch, l + 1, d)``, mean-pooled over content positions.
    """
    loss, _, _ = contrastive_loss_and_grad(pool(z1), pool(z2), tau)
    return loss


# single-sample wrappers


def _prediction(model: MMAlignModel, out: Matrix) -> Prediction:
    return Prediction(model.task, out[0])


def forward_complete(
    x1: ModalitySequence, x2: ModalitySequence, model: MMAlignModel
) -> tuple[Prediction, SharedRepr, SharedRepr]:
    if x1.length != x2.length:
        raise AlignmentPreconditionError(
            f"modality lengths differ: {x1.length} vs {x2.length}"
        )
    out, cache = model.forward_complete(x1.values[None], x2.values[None])
    return (
        _prediction(model, out),
        SharedRepr(cache.z1[0]),
        SharedRepr(cache.z2[0]),
    )


def forward_missing(x1: ModalitySequence, model: MMAlignModel) -> Prediction:
    out, _ = model.forward_missing(x1.values[None])
    return _prediction(model, out)
