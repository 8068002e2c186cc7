"""
Denoising training: warm-up on the complete split, then epochs that
interleave fitter and backbone updates on complete batches with imputed
backbone updates on missing batches, stopped early on the validation
metric.
"""
import time
from collections.abc import Iterator, Sequence
from dataclasses import asdict, dataclass, field
from logging import Logger, getLogger
from typing import Any

import numpy as np

from .adl import fitting_loss_and_grad
from .common import (
    ConditioningError,
    ConfigurationError,
    DataError,
    NonFiniteLossError,
)
from .config import ModelConfig, TrainConfig
from .data import Sample, SplitDataset, stack
from .enums import Ablation, Condition, TargetFeatures, TaskMode
from .metrics import is_improvement, task_metrics
from .model import (
    MMAlignModel,
    ModelParams,
    contrastive_loss_and_grad,
    main_loss_and_grad,
    pool,
    pool_backward,
)
from .numerics import Matrix
from .optim import Adam
from .ot_align import (
    AlignmentPlan,
    build_cost,
    sinkhorn,
    stream_rotation,
)

default_logger = getLogger(__name__)

nondeterministic_fields = frozenset({"phase_seconds"})


@dataclass
class EpochReport:
    """
    Summary of one warm-up or training epoch.

    Loss fields are means over the steps that computed them (0 when there
    were none).
    """

    epoch: int
    phase: str
    "``warm-up`` or ``train``"
    main_loss: float
    con_loss: float
    fit_loss: float
    val_metric: float | None
    con_grad_norm: float
    "Mean norm of the contrastive gradient injected into the encoders"
    complete_steps: int = 0
    missing_steps: int = 0
    fit_steps: int = 0
    skipped_batches: int = 0
    phase_seconds: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def deterministic_fields(self) -> dict[str, Any]:
        return {
            k: v
            for k, v in self.to_dict().items()
            if k not in nondeterministic_fields
        }


@dataclass
class FitResult:
    best_params: dict[str, Matrix]
    best_metric: float | None
    best_epoch: int
    log: list[EpochReport]


class _Means:
    def __init__(self) -> None:
        self.totals: dict[str, float] = {}
        self.counts: dict[str, int] = {}

    def add(self, name: str, value: float) -> None:
        self.totals[name] = self.totals.get(name, 0.0) + value
        self.counts[name] = self.counts.get(name, 0) + 1

    def mean(self, name: str) -> float:
        count = self.counts.get(name, 0)
        return self.totals[name] / count if count else 0.0


def build_model(
    model_cfg: ModelConfig, train_cfg: TrainConfig
) -> MMAlignModel:
    """
    Freshly initialized model; initialization is a function of the seed.
    """
    return MMAlignModel(
        model_cfg,
        train_cfg.window,
        np.random.default_rng([train_cfg.seed, 0]),
        renormalize=train_cfg.column_renorm,
    )


def make_batches(
    samples: Sequence[Sample], batch_size: int, rng: np.random.Generator
) -> list[list[Sample]]:
    """
    Shuffle, then group into batches of equal sequence length.

    Within each length the shuffled order is kept and the last partial
    batch is kept too; batches are ordered by their first sample's
    shuffled position.
    """
    order = rng.permutation(len(samples))
    by_length: dict[int, list[tuple[int, Sample]]] = {}
    for position, index in enumerate(order):
        sample = samples[index]
        by_length.setdefault(sample.length, []).append((position, sample))
    batches = []
    for group in by_length.values():
        for start in range(0, len(group), batch_size):
            batches.append(group[start : start + batch_size])
    batches.sort(key=lambda batch: batch[0][0])
    return [[sample for _, sample in batch] for batch in batches]


def predict(
    model: MMAlignModel,
    samples: Sequence[Sample],
    condition: Condition = Condition.MM_ALIGN,
    batch_size: int = 64,
) -> np.ndarray:
    """
    Predictions in sample order: scores for regression, class indices for
    classification.

    Samples with the victim modality use the complete path, others the
    missing-modality path (the single-modality path for the lower bound).
    """
    outputs: list[Matrix | None] = [None] * len(samples)
    groups: dict[tuple[int, bool], list[int]] = {}
    for i, sample in enumerate(samples):
        groups.setdefault((sample.length, sample.is_masked), []).append(i)
    for (_, masked), indices in groups.items():
        for start in range(0, len(indices), batch_size):
            chunk = indices[start : start + batch_size]
            x1, x2, _ = stack([samples[i] for i in chunk])
            if condition is Condition.LOWER_BOUND:
                out, _ = model.forward_single(x1)
            elif not masked and x2 is not None:
                out, _ = model.forward_complete(x1, x2)
            else:
                out, _ = model.forward_missing(
                    x1, zero_impute=condition is Condition.ZERO_IMPUTE
                )
            for i, row in zip(chunk, out):
                outputs[i] = row
    if not samples:
        return np.zeros(0)
    stacked = np.stack(outputs)  # type: ignore[arg-type]
    if model.task is TaskMode.REGRESSION:
        return stacked[:, 0]
    return np.argmax(stacked, axis=1)


def _labels(samples: Sequence[Sample]) -> np.ndarray:
    return np.array([s.y for s in samples])


def validation_metric(
    model: MMAlignModel,
    samples: Sequence[Sample],
    condition: Condition = Condition.MM_ALIGN,
) -> float:
    task = model.task
    metrics = task_metrics(
        task,
        predict(model, samples, condition),
        _labels(samples),
        model.config.num_classes,
    )
    return metrics[task.metric]


class Trainer:
    """
    Runs denoising training for one model.

    Backbone and fitter have separate optimizers, so a fitter step leaves
    every backbone parameter bit-identical and vice versa.

    Args:
        model: Model to train in place.
        cfg: Training hyperparameters.
        condition: Training regime; baselines reuse the same loop with the
            appropriate paths switched off.
        logger: Logger to log messages to.
    """

    def __init__(
        self,
        model: MMAlignModel,
        cfg: TrainConfig,
        condition: Condition = Condition.MM_ALIGN,
        logger: Logger = default_logger,
    ):
        self.model = model
        self.cfg = cfg
        self.condition = condition
        self.logger = logger
        self.params = ModelParams.of(model)
        adam_args = dict(
            beta1=cfg.adam_beta1,
            beta2=cfg.adam_beta2,
            eps=cfg.adam_eps,
            clip_norm=cfg.clip_norm,
        )
        self.theta_optimizer = Adam(
            self.params.theta, cfg.eta_main, **adam_args
        )
        self.psi_optimizer = Adam(self.params.psi, cfg.eta_fit, **adam_args)
        self.batch_rng = np.random.default_rng([cfg.seed, 1])
        self._epoch = 0
        self._where: tuple[str, int] = ("", 0)
        # victim-to-surviving map of input-space targets, fitted lazily
        self.victim_rotation: Matrix | None = None

    @property
    def trains_fitter(self) -> bool:
        return self.condition is Condition.MM_ALIGN and (
            self.cfg.ablation is not Ablation.RANDOM_FITTER
        )

    def _check_finite(self, **losses: float) -> None:
        if all(np.isfinite(v) for v in losses.values()):
            return
        phase, batch = self._where
        raise NonFiniteLossError(
            "training diverged",
            {"epoch": self._epoch, "phase": phase, "batch": batch, **losses},
        )

    # single steps

    def prepare_targets(self, complete: Sequence[Sample]) -> None:
        """
        Fit the victim-to-surviving rotation used by input-space targets
        (no-op for shared-space targets or once fitted).
        """
        if self.cfg.target_features is not TargetFeatures.INPUT:
            return
        if self.victim_rotation is not None or not complete:
            return
        self.victim_rotation = stream_rotation(
            np.concatenate([s.x1.values for s in complete]),
            np.concatenate(
                [s.x2.values for s in complete]  # type: ignore[union-attr]
            ),
        )
        self.logger.debug("fitted victim rotation for input-space targets")

    def alignment_targets(
        self,
        z1: Matrix,
        z2: Matrix,
        x1: Matrix | None = None,
        x2: Matrix | None = None,
    ) -> AlignmentPlan:
        """
        Sinkhorn plans the fitter is trained towards, on encoded content
        positions or on raw inputs depending on the configuration.

        Raises:
            ConditioningError: If the Sinkhorn kernel is ill-conditioned.
        """
        cfg = self.cfg
        if cfg.target_features is TargetFeatures.INPUT:
            if x1 is None or x2 is None:
                raise ConfigurationError(
                    "input-space targets need the raw input batch"
                )
            if self.victim_rotation is None:
                self.victim_rotation = stream_rotation(x1, x2)
            cost = build_cost(x1, x2 @ self.victim_rotation, cfg.window)
        else:
            cost = build_cost(z1[:, 1:], z2[:, 1:], cfg.window)
        return sinkhorn(
            cost,
            cfg.mu,
            cfg.sinkhorn_tol,
            cfg.sinkhorn_max_iter,
            cfg.log_domain_retry,
            logger=self.logger,
            column_relaxation=cfg.column_relaxation,
        )

    def fitter_step(
        self,
        z1: Matrix,
        z2: Matrix,
        x1: Matrix | None = None,
        x2: Matrix | None = None,
    ) -> float:
        """
        Solve Sinkhorn targets for a complete batch and update the fitter
        once.

        Raises:
            ConditioningError: If the Sinkhorn kernel is ill-conditioned.
        """
        cfg = self.cfg
        target = self.alignment_targets(z1, z2, x1, x2)
        fitter = self.model.fitter
        probs, cache = fitter.forward(z1[:, 1:])
        loss, d_probs = fitting_loss_and_grad(
            probs, target.band, cfg.window, cfg.fit_loss_mode
        )
        self._check_finite(fit=loss)
        _, grads = fitter.backward(d_probs, cache)
        self.psi_optimizer.step(fitter.prefixed("fitter", grads))
        return loss

    def complete_step(
        self, x1: Matrix, x2: Matrix, y: np.ndarray, fit: bool
    ) -> dict[str, float]:
        """
        One fused iteration on a complete batch: optionally a fitter step
        on the current encodings, then a backbone step on the main plus
        weighted contrastive loss.
        """
        model = self.model
        out, cache = model.forward_complete(x1, x2)
        result: dict[str, float] = {}
        if fit:
            result["fit"] = self.fitter_step(cache.z1, cache.z2, x1, x2)
        main, d_out = main_loss_and_grad(out, y, model.task)
        con, d_p1, d_p2 = contrastive_loss_and_grad(
            pool(cache.z1), pool(cache.z2), self.cfg.tau
        )
        lam = self.cfg.effective_lambda
        d_z1 = lam * pool_backward(d_p1, cache.z1)
        d_z2 = lam * pool_backward(d_p2, cache.z2)
        self._check_finite(main=main, con=con)
        grads = model.backward(d_out, cache, d_z1, d_z2)
        self.theta_optimizer.step(grads)
        result.update(
            main=main,
            con=con,
            con_grad_norm=float(
                np.sqrt(np.sum(d_z1 * d_z1) + np.sum(d_z2 * d_z2))
            ),
        )
        return result

    def missing_step(self, x1: Matrix, y: np.ndarray) -> float:
        """
        Backbone step on the main loss through the imputed (or, for the
        baselines, zero or absent) victim representation.
        """
        model = self.model
        if self.condition is Condition.LOWER_BOUND:
            out, cache = model.forward_single(x1)
        else:
            out, cache = model.forward_missing(
                x1, zero_impute=self.condition is Condition.ZERO_IMPUTE
            )
        main, d_out = main_loss_and_grad(out, y, model.task)
        self._check_finite(main=main)
        self.theta_optimizer.step(model.backward(d_out, cache))
        return main

    # epochs

    def _report(
        self,
        phase: str,
        means: _Means,
        skipped: int,
        seconds: dict[str, float],
        val_metric: float | None = None,
    ) -> EpochReport:
        return EpochReport(
            epoch=self._epoch,
            phase=phase,
            main_loss=means.mean("main"),
            con_loss=means.mean("con"),
            fit_loss=means.mean("fit"),
            val_metric=val_metric,
            con_grad_norm=means.mean("con_grad_norm"),
            complete_steps=means.counts.get("main_complete", 0),
            missing_steps=means.counts.get("main_missing", 0),
            fit_steps=means.counts.get("fit", 0),
            skipped_batches=skipped,
            phase_seconds=seconds,
        )

    def _record(self, means: _Means, values: dict[str, float]) -> None:
        for name, value in values.items():
            means.add(name, value)
        if "main" in values:
            means.add("main_complete", values["main"])

    def _batches(self, samples: Sequence[Sample]) -> Iterator[list[Sample]]:
        yield from make_batches(samples, self.cfg.batch_size, self.batch_rng)

    def warm_up(self, complete: Sequence[Sample]) -> list[EpochReport]:
        """
        Backbone-only epochs on the complete split; the fitter is not
        touched.
        """
        if not complete:
            raise DataError("warm-up needs a non-empty complete split")
        reports = []
        for _ in range(self.cfg.warm_up_epochs):
            self._epoch += 1
            started = time.perf_counter()
            means = _Means()
            for i, batch in enumerate(self._batches(complete)):
                x1, x2, y = stack(batch)
                assert x2 is not None
                self._where = ("warm-up", i)
                values = self.complete_step(x1, x2, y, fit=False)
                self._record(means, values)
            report = self._report(
                "warm-up",
                means,
                0,
                {"complete": time.perf_counter() - started},
            )
            self.logger.info(
                "warm-up epoch %d: main %.4g, con %.4g",
                report.epoch,
                report.main_loss,
                report.con_loss,
            )
            reports.append(report)
        return reports

    def _complete_pass(
        self, complete: Sequence[Sample], fit: bool, backbone: bool
    ) -> tuple[_Means, int]:
        means = _Means()
        skipped = 0
        for i, batch in enumerate(self._batches(complete)):
            x1, x2, y = stack(batch)
            assert x2 is not None
            self._where = ("complete", i)
            try:
                if backbone:
                    values = self.complete_step(x1, x2, y, fit)
                else:
                    _, cache = self.model.forward_complete(x1, x2)
                    values = {
                        "fit": self.fitter_step(cache.z1, cache.z2, x1, x2)
                    }
            except ConditioningError as e:
                skipped += 1
                self.logger.warning("skipping batch %d: %s", i, e)
                continue
            self._record(means, values)
            self.logger.debug("complete batch %d: %s", i, values)
        return means, skipped

    def train_epoch(
        self,
        complete: Sequence[Sample],
        missing: Sequence[Sample],
    ) -> EpochReport:
        """
        One epoch: the complete-split pass (fitter then backbone per batch,
        or two separate passes in the split-loop ablation), then the
        missing-split pass.
        """
        self._epoch += 1
        seconds: dict[str, float] = {}
        started = time.perf_counter()
        fit = self.trains_fitter
        if fit:
            self.prepare_targets(complete)
        if self.condition is Condition.LOWER_BOUND:
            # no victim input at all: every sample goes the single path
            missing = list(complete) + list(missing)
            complete = []
        if fit and self.cfg.ablation is Ablation.SPLIT_LOOP:
            fit_means, fit_skipped = self._complete_pass(
                complete, fit=True, backbone=False
            )
            means, skipped = self._complete_pass(
                complete, fit=False, backbone=True
            )
            if "fit" in fit_means.totals:
                means.totals["fit"] = fit_means.totals["fit"]
                means.counts["fit"] = fit_means.counts["fit"]
            skipped += fit_skipped
        else:
            means, skipped = self._complete_pass(
                complete, fit=fit, backbone=True
            )
        seconds["complete"] = time.perf_counter() - started
        started = time.perf_counter()
        for i, batch in enumerate(self._batches(missing)):
            x1, _, y = stack(batch)
            self._where = ("missing", i)
            main = self.missing_step(x1, y)
            means.add("main", main)
            means.add("main_missing", main)
        seconds["missing"] = time.perf_counter() - started
        return self._report("train", means, skipped, seconds)

    def fit(self, dataset: SplitDataset) -> FitResult:
        """
        Warm up, then train until the validation metric has not improved
        for ``patience`` epochs (or ``max_epochs`` is reached). The model
        ends up holding the best parameters.
        """
        cfg = self.cfg
        task = self.model.task
        if not dataset.val:
            raise DataError("validation split is empty")
        complete = [s for s in dataset.train if not s.is_masked]
        missing = [s for s in dataset.train if s.is_masked]
        log: list[EpochReport] = []
        if self.condition is not Condition.LOWER_BOUND:
            log.extend(self.warm_up(complete))
        best_metric: float | None = None
        best_epoch = 0
        best_params = self._snapshot()
        stale = 0
        for _ in range(cfg.max_epochs):
            report = self.train_epoch(complete, missing)
            started = time.perf_counter()
            report.val_metric = validation_metric(
                self.model, dataset.val, self.condition
            )
            report.phase_seconds["validation"] = time.perf_counter() - started
            log.append(report)
            self.logger.info(
                "epoch %d: main %.4g, con %.4g, fit %.4g, val %s %.4g "
                "(%d skipped batches)",
                report.epoch,
                report.main_loss,
                report.con_loss,
                report.fit_loss,
                task.metric,
                report.val_metric,
                report.skipped_batches,
            )
            if is_improvement(task, report.val_metric, best_metric):
                best_metric = report.val_metric
                best_epoch = report.epoch
                best_params = self._snapshot()
                stale = 0
            else:
                stale += 1
            if stale >= cfg.patience:
                break
        self._restore(best_params)
        return FitResult(best_params, best_metric, best_epoch, log)

    def _snapshot(self) -> dict[str, Matrix]:
        return {
            name: value.copy() for name, value in self.model.named_params()
        }

    def _restore(self, snapshot: dict[str, Matrix]) -> None:
        for name, value in self.model.named_params():
            value[...] = snapshot[name]


def fit(
    model: MMAlignModel,
    dataset: SplitDataset,
    cfg: TrainConfig,
    condition: Condition = Condition.MM_ALIGN,
    logger: Logger = default_logger,
) -> FitResult:
    """
    Train ``model`` in place on ``dataset`` (already masked) and leave it
    holding the parameters with the best validation metric.
    """
    trainer = Trainer(model, cfg, condition, logger)
    return trainer.fit(dataset)
