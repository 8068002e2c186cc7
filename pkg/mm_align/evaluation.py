"""
Multi-seed runs of MM-Align and its baselines, window sweeps and paired
significance tests.
"""
import csv
import io
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from logging import Logger, getLogger
from typing import Any

import numpy as np
import numpy.typing as npt
from scipy.stats import ttest_rel

from .common import ConfigurationError, DimensionError, StatisticsError
from .config import ModelConfig, TrainConfig
from .data import Sample, SplitDataset, SplitSpec, apply_missing, stack
from .enums import Condition, TaskMode
from .metrics import task_metrics
from .model import MMAlignModel
from .numerics import Matrix
from .ot_align import build_cost, sinkhorn, stream_rotation
from .training import build_model, fit, predict
from .utils.asyncio import gather_in_threads, top_level_sync

default_logger = getLogger(__name__)

significance_level = 0.05


def paired_ttest(a: npt.ArrayLike, b: npt.ArrayLike) -> float:
    """
    Two-sided paired t-test p-value over per-seed metric pairs.

    Identical pairs give 1.0; a constant non-zero difference gives 0.0.
    """
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"unpaired samples: {x.shape} vs {y.shape}")
    if x.size < 2:
        raise StatisticsError(
            f"a paired t-test needs at least 2 seeds, got {x.size}"
        )
    diff = x - y
    if np.all(diff == 0):
        return 1.0
    if np.all(diff == diff[0]):
        return 0.0
    return float(ttest_rel(x, y).pvalue)


def evaluate_model(
    model: MMAlignModel,
    samples: Sequence[Sample],
    condition: Condition = Condition.MM_ALIGN,
) -> dict[str, float]:
    return task_metrics(
        model.task,
        predict(model, samples, condition),
        np.array([s.y for s in samples]),
        model.config.num_classes,
    )


@dataclass
class MetricReport:
    task: TaskMode
    condition: Condition
    setting: str
    surviving_rate: float
    victim: str
    seeds: list[int]
    per_seed: dict[str, list[float]]
    reference: str | None = None
    p_value: float | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def mean(self) -> dict[str, float]:
        return {k: float(np.mean(v)) for k, v in self.per_seed.items()}

    @property
    def std(self) -> dict[str, float]:
        return {k: float(np.std(v)) for k, v in self.per_seed.items()}

    @property
    def primary(self) -> list[float]:
        return self.per_seed[self.task.metric]

    @property
    def significant(self) -> bool | None:
        if self.p_value is None:
            return None
        return self.p_value < significance_level

    def to_dict(self) -> dict[str, Any]:
        return {
            "task": self.task.value,
            "condition": self.condition.value,
            "setting": self.setting,
            "surviving_rate": self.surviving_rate,
            "victim": self.victim,
            "seeds": self.seeds,
            "per_seed": self.per_seed,
            "mean": self.mean,
            "std": self.std,
            "reference": self.reference,
            "p_value": self.p_value,
            **self.extra,
        }

    def table_rows(self) -> list[tuple[str, str]]:
        rows = [
            (name, f"{self.mean[name]:.4f} ± {self.std[name]:.4f}")
            for name in self.per_seed
        ]
        if self.p_value is not None:
            rows.append((f"p vs {self.reference}", f"{self.p_value:.4g}"))
        return rows


def _run_seed(
    condition: Condition,
    reference: SplitDataset,
    spec: SplitSpec,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    logger: Logger,
) -> dict[str, float]:
    if condition.masks_training:
        dataset = apply_missing(reference, spec, logger=logger)
    else:
        dataset = reference
    model = build_model(model_cfg, train_cfg)
    fit(model, dataset, train_cfg, condition, logger=logger)
    return evaluate_model(model, dataset.test, condition)


def run_condition(
    condition: Condition,
    reference: SplitDataset,
    spec: SplitSpec,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    compare_to: MetricReport | None = None,
    workers: int = 1,
    logger: Logger = default_logger,
) -> MetricReport:
    """
    Train and test one condition once per seed.

    Args:
        condition: MM-Align or one of the baselines.
        reference: Unmasked train/val/test splits; masking per ``spec`` is
            applied unless the condition trains on complete data.
        spec: Missing pattern.
        model_cfg: Architecture.
        train_cfg: Training hyperparameters; its seed is replaced per run.
        seeds: Run seeds; reports are ordered like this sequence.
        compare_to: Report of a reference run over the same seeds to
            compute a paired t-test p-value against.
        workers: Number of seed runs to execute concurrently.
        logger: Logger to log messages to.
    """
    if not seeds:
        raise ConfigurationError("need at least one seed")
    if compare_to is not None and list(compare_to.seeds) != list(seeds):
        raise StatisticsError(
            "paired test needs runs over the same seeds "
            f"({compare_to.seeds} vs {list(seeds)})"
        )
    jobs = [
        (
            lambda seed=seed: _run_seed(
                condition,
                reference,
                spec,
                model_cfg,
                replace(train_cfg, seed=seed),
                logger,
            )
        )
        for seed in seeds
    ]
    results = top_level_sync(gather_in_threads)(jobs, workers)
    per_seed: dict[str, list[float]] = {}
    for result in results:
        for name, value in result.items():
            per_seed.setdefault(name, []).append(value)
    report = MetricReport(
        task=model_cfg.task,
        condition=condition,
        setting=spec.setting.value,
        surviving_rate=spec.surviving_rate,
        victim=spec.victim.value,
        seeds=list(seeds),
        per_seed=per_seed,
    )
    if compare_to is not None:
        report.reference = compare_to.condition.value
        report.p_value = paired_ttest(report.primary, compare_to.primary)
    logger.info(
        "%s: %s = %.4f ± %.4f over %d seeds",
        condition.value,
        model_cfg.task.metric,
        report.mean[model_cfg.task.metric],
        report.std[model_cfg.task.metric],
        len(seeds),
    )
    return report


def shift_recovery(
    samples: Sequence[Sample],
    window: int,
    mu: float,
    rotation: Matrix | None = None,
) -> float:
    """
    Fraction of rows whose input-space plan peaks at the known shift.

    Plans are solved with the column constraint dropped, so each row picks
    its cheapest slot independently. Only complete samples with a known
    offset count, and only rows whose shifted partner lies inside the
    sequence; shifts beyond the window are misses.

    Args:
        samples: Samples to score.
        window: Band radius ``W``.
        mu: Entropic weight.
        rotation: Victim-to-surviving map applied before the cost (see
            :func:`~mm_align.ot_align.stream_rotation`).

    Raises:
        StatisticsError: If no sample has both streams and a known offset.
    """
    hits = 0
    total = 0
    for sample in samples:
        if sample.x2 is None or sample.offset is None:
            continue
        x2 = sample.x2.values
        if rotation is not None:
            x2 = x2 @ rotation
        plan = sinkhorn(
            build_cost(sample.x1.values, x2, window), mu, column_relaxation=0.0
        )
        rows = np.arange(sample.length)
        rows = rows[(rows + sample.offset >= 0)]
        rows = rows[rows + sample.offset < sample.length]
        peaks = np.argmax(plan.band[rows], axis=-1) - window
        hits += int(np.sum(peaks == sample.offset))
        total += len(rows)
    if total == 0:
        raise StatisticsError("no complete samples with a known shift")
    return hits / total


def fitter_shift_recovery(
    model: MMAlignModel, samples: Sequence[Sample], batch_size: int = 64
) -> float:
    """
    Fraction of rows whose predicted window peaks at the known shift.

    The fitter only sees the surviving stream, so masked samples count
    too. Rows whose shifted partner lies outside the sequence are skipped.

    Raises:
        StatisticsError: If no sample has a known offset.
    """
    window = model.fitter.window
    by_length: dict[int, list[Sample]] = {}
    for sample in samples:
        if sample.offset is not None:
            by_length.setdefault(sample.length, []).append(sample)
    hits = 0
    total = 0
    for length, group in by_length.items():
        for start in range(0, len(group), batch_size):
            chunk = group[start : start + batch_size]
            x1, _, _ = stack(chunk)
            z1, _ = model.enc1.forward(x1)
            probs, _ = model.fitter.forward(z1[:, 1:])
            peaks = np.argmax(probs, axis=-1) - window
            rows = np.arange(length)
            offsets = np.array([s.offset for s in chunk])
            shifted = rows + offsets[:, None]
            inside = (shifted >= 0) & (shifted < length)
            hits += int(np.sum((peaks == offsets[:, None]) & inside))
            total += int(inside.sum())
    if total == 0:
        raise StatisticsError("no samples with a known shift")
    return hits / total


@dataclass
class SweepReport:
    metric: str
    windows: list[int]
    reports: list[MetricReport]
    recovery: list[float] = field(default_factory=list)
    "Per-window :func:`shift_recovery` on the test split (synthetic data)"

    def series(self) -> list[tuple[int, float, float]]:
        return [
            (w, r.mean[self.metric], r.std[self.metric])
            for w, r in zip(self.windows, self.reports)
        ]

    @property
    def best_window(self) -> int:
        values = [mean for _, mean, _ in self.series()]
        higher = self.reports[0].task.higher_is_better
        index = int(np.argmax(values) if higher else np.argmin(values))
        return self.windows[index]

    @property
    def best_recovery_window(self) -> int | None:
        """
        Smallest window with the highest shift recovery, if measured.
        """
        if not self.recovery:
            return None
        return self.windows[int(np.argmax(self.recovery))]

    def to_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {
            "metric": self.metric,
            "best_window": self.best_window,
            "series": [
                {"window": w, "mean": m, "std": s}
                for w, m, s in self.series()
            ],
            "reports": [r.to_dict() for r in self.reports],
        }
        if self.recovery:
            data["best_recovery_window"] = self.best_recovery_window
            data["shift_recovery"] = [
                {"window": w, "fraction": f}
                for w, f in zip(self.windows, self.recovery)
            ]
        return data

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["W", f"{self.metric}_mean", f"{self.metric}_std"])
        for w, m, s in self.series():
            writer.writerow([w, repr(m), repr(s)])
        return out.getvalue()


def window_sweep(
    reference: SplitDataset,
    spec: SplitSpec,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    windows: Sequence[int],
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    workers: int = 1,
    logger: Logger = default_logger,
) -> SweepReport:
    """
    One MM-Align :func:`run_condition` per window radius.

    Raises:
        ConfigurationError: If a window is negative or not smaller than the
            shortest sequence length.
    """
    if not windows:
        raise ConfigurationError("empty window list")
    lengths = [
        s.length
        for part in reference.partitions().values()
        for s in part
    ]
    shortest = min(lengths) if lengths else 0
    for w in windows:
        if w < 0 or w >= shortest:
            raise ConfigurationError(
                f"window {w} must be in [0, {shortest}) for sequences of "
                f"length {shortest}"
            )
    reports = []
    for w in windows:
        logger.info("window sweep: W=%d", w)
        reports.append(
            run_condition(
                Condition.MM_ALIGN,
                reference,
                spec,
                model_cfg,
                replace(train_cfg, window=w),
                seeds,
                workers=workers,
                logger=logger,
            )
        )
    sweep = SweepReport(model_cfg.task.metric, list(windows), reports)
    known = [
        s for s in reference.test if s.x2 is not None and s.offset is not None
    ]
    train_complete = [s for s in reference.train if s.x2 is not None]
    if known and train_complete and model_cfg.d_in1 == model_cfg.d_in2:
        rotation = stream_rotation(
            np.concatenate([s.x1.values for s in train_complete]),
            np.concatenate(
                [s.x2.values for s in train_complete]  # type: ignore
            ),
        )
        sweep.recovery = [
            shift_recovery(known, w, train_cfg.mu, rotation) for w in windows
        ]
        logger.info(
            "window sweep: shift recovery peaks at W=%s",
            sweep.best_recovery_window,
        )
    return sweep
