"""
Synthetic parallel sequences, train/val/test splitting, missing-modality
masking and JSONL ingestion.
"""
import hashlib
import json
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field, replace
from logging import Logger, getLogger
from pathlib import Path
from typing import Any

import numpy as np

from .common import (
    ConfigurationError,
    DataError,
    DimensionError,
    SchemaError,
)
from .encoder import ModalitySequence
from .enums import Modality, Setting, TaskMode
from .numerics import Matrix

default_logger = getLogger(__name__)

default_fractions = (0.7, 0.15, 0.15)


@dataclass
class Sample:
    """
    One labelled sample; ``x2`` is ``None`` when the victim modality is
    missing.
    """

    id: str
    x1: ModalitySequence
    x2: ModalitySequence | None
    y: float
    offset: int | None = None
    "Ground-truth shift of the victim stream (synthetic data only)"

    def __post_init__(self):
        if self.x2 is not None and self.x2.length != self.x1.length:
            raise DimensionError(
                f"sample {self.id}: modality lengths differ "
                f"({self.x1.length} vs {self.x2.length})"
            )

    @property
    def length(self) -> int:
        return self.x1.length

    @property
    def is_masked(self) -> bool:
        return self.x2 is None

    def masked(self) -> "Sample":
        return replace(self, x2=None)

    def swapped(self) -> "Sample":
        if self.x2 is None:
            raise DataError(f"sample {self.id}: can't swap a masked sample")
        return replace(
            self,
            x1=ModalitySequence(Modality.M1, self.x2.values),
            x2=ModalitySequence(Modality.M2, self.x1.values),
            offset=None if self.offset is None else -self.offset,
        )


@dataclass
class SplitSpec:
    """
    How a dataset is partitioned and which victim samples are removed.
    """

    surviving_rate: float
    setting: Setting = Setting.A
    victim: Modality = Modality.M2
    seed: int = 0
    fractions: tuple[float, float, float] = default_fractions

    def __post_init__(self):
        if not 0 < self.surviving_rate <= 1:
            raise ConfigurationError(
                f"surviving rate p must be in (0, 1], "
                f"got {self.surviving_rate}"
            )
        self.fractions = tuple(self.fractions)  # type: ignore[assignment]
        if len(self.fractions) != 3 or min(self.fractions) < 0:
            raise ConfigurationError(
                f"split fractions must be 3 non-negative numbers, "
                f"got {self.fractions}"
            )
        if not np.isclose(sum(self.fractions), 1.0):
            raise ConfigurationError(
                f"split fractions must sum to 1, got {self.fractions}"
            )

    def to_dict(self) -> dict[str, Any]:
        return {
            "surviving_rate": self.surviving_rate,
            "setting": self.setting.value,
            "victim": self.victim.value,
            "seed": self.seed,
            "fractions": list(self.fractions),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SplitSpec":
        return cls(
            surviving_rate=data["surviving_rate"],
            setting=Setting(data["setting"]),
            victim=Modality(data["victim"]),
            seed=data["seed"],
            fractions=tuple(data["fractions"]),
        )


@dataclass
class SplitDataset:
    train: list[Sample]
    val: list[Sample]
    test: list[Sample]
    victim_swapped: bool = False
    "Whether the streams were swapped so that the victim is the second one"
    spec: SplitSpec | None = field(default=None, compare=False)

    def partitions(self) -> dict[str, list[Sample]]:
        return {"train": self.train, "val": self.val, "test": self.test}


# synthetic generation


def _ar1_walk(
    rng: np.random.Generator, length: int, dim: int, smoothness: float
) -> Matrix:
    innovation = np.sqrt(1.0 - smoothness**2)
    walk = np.empty((length, dim))
    walk[0] = rng.standard_normal(dim)
    for t in range(1, length):
        walk[t] = smoothness * walk[t - 1] + innovation * rng.standard_normal(
            dim
        )
    return walk


def _class_of(score: float, num_classes: int, bound: float) -> int:
    position = (score + bound) / (2 * bound) * num_classes
    return int(np.clip(np.floor(position), 0, num_classes - 1))


def synth_generate(
    n: int,
    length: int,
    dim: int,
    shift_range: tuple[int, int] = (0, 3),
    mix_noise: float = 0.1,
    label_noise: float = 0.1,
    seed: int = 0,
    task: TaskMode = TaskMode.REGRESSION,
    num_classes: int = 7,
    identity_mixing: bool = False,
    smoothness: float = 0.5,
    shift_cue: float = 0.5,
    logger: Logger = default_logger,
) -> list[Sample]:
    """
    Generate parallel sequences with known per-sample shifts.

    The surviving stream is a mean-reverting random walk per feature; the
    victim stream at time ``t`` is the mixed walk at ``t - s`` plus noise,
    where ``s`` is drawn per sample from ``shift_range`` (inclusive). The
    walk is offset along the all-ones direction by ``shift_cue`` times
    ``s`` minus the centre of the range, so the shift can be read off the
    surviving stream at every position. The label is a bounded function
    of pooled statistics of both streams.

    Args:
        n: Number of samples.
        length: Sequence length ``l``; must exceed twice the largest
            absolute shift.
        dim: Feature dimension (same for both streams), at least 2.
        shift_range: Inclusive ``(low, high)`` range of shifts.
        mix_noise: Std of the noise added to the victim stream.
        label_noise: Std of the noise added to the latent label score.
        seed: Seed; identical seeds produce identical datasets.
        task: Regression labels, or class indices of equal-width bins of
            the latent score.
        num_classes: Number of classes for classification.
        identity_mixing: Use ``R = I`` instead of a random rotation.
        smoothness: AR(1) coefficient of the walk, in ``[0, 1)``.
        shift_cue: Offset per unit of shift; 0 makes shifts independent of
            the content.
        logger: Logger to log messages to.
    """
    low, high = shift_range
    max_shift = max(abs(low), abs(high))
    if n < 0:
        raise ConfigurationError(f"sample count must be >= 0, got {n}")
    if low > high:
        raise ConfigurationError(f"empty shift range {shift_range}")
    if length <= 2 * max_shift:
        raise ConfigurationError(
            f"length {length} must exceed twice the max shift {max_shift}"
        )
    if dim < 2:
        raise ConfigurationError(f"dim must be >= 2, got {dim}")
    if mix_noise < 0 or label_noise < 0:
        raise ConfigurationError("noise levels must be >= 0")
    if not 0 <= smoothness < 1:
        raise ConfigurationError(
            f"smoothness must be in [0, 1), got {smoothness}"
        )
    shared = np.random.default_rng([seed, 1])
    if identity_mixing:
        mixing = np.eye(dim)
    else:
        q, r = np.linalg.qr(shared.standard_normal((dim, dim)))
        mixing = q * np.sign(np.diag(r))
    w1 = shared.standard_normal(dim)
    w1 /= np.linalg.norm(w1)
    w2 = shared.standard_normal(dim)
    w2 /= np.linalg.norm(w2)
    centre = (low + high) / 2
    cue_direction = np.full(dim, 1.0 / np.sqrt(dim))
    bound = 3.0
    width = len(str(max(n - 1, 0)))
    samples = []
    for index in range(n):
        rng = np.random.default_rng([seed, 0, index])
        shift = int(rng.integers(low, high + 1))
        walk = _ar1_walk(rng, length + 2 * max_shift, dim, smoothness)
        walk += shift_cue * (shift - centre) * cue_direction
        x1 = walk[max_shift : max_shift + length]
        source = walk[max_shift - shift : max_shift - shift + length]
        x2 = source @ mixing.T + mix_noise * rng.standard_normal(
            (length, dim)
        )
        latent = 1.5 * float(x1.mean(axis=0) @ w1) + 1.5 * float(
            np.tanh(x2).mean(axis=0) @ w2
        )
        score = bound * np.tanh(latent) + label_noise * rng.standard_normal()
        y: float = (
            float(score)
            if task is TaskMode.REGRESSION
            else _class_of(float(score), num_classes, bound)
        )
        samples.append(
            Sample(
                f"s{index:0{width}d}",
                ModalitySequence(Modality.M1, x1),
                ModalitySequence(Modality.M2, x2),
                y,
                shift,
            )
        )
    logger.info(
        "generated %d samples (l=%d, d=%d, shifts %s)",
        n,
        length,
        dim,
        shift_range,
    )
    return samples


# splitting and masking


def _hash_uniform(seed: int, purpose: str, sample_id: str) -> float:
    digest = hashlib.blake2b(
        f"{seed}:{purpose}:{sample_id}".encode(), digest_size=8
    ).digest()
    return int.from_bytes(digest, "big") / 2**64


def split_dataset(
    samples: Sequence[Sample],
    fractions: tuple[float, float, float] = default_fractions,
    seed: int = 0,
) -> SplitDataset:
    """
    Disjoint, exhaustive train/val/test partitions.

    Membership is a pure function of ``(seed, sample id)``.
    """
    ids = [s.id for s in samples]
    if len(set(ids)) != len(ids):
        raise DataError("sample ids are not unique")
    ranked = sorted(samples, key=lambda s: _hash_uniform(seed, "split", s.id))
    n = len(ranked)
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    return SplitDataset(
        ranked[:n_train],
        ranked[n_train : n_train + n_val],
        ranked[n_train + n_val :],
    )


def masked_train_count(n: int, surviving_rate: float) -> int:
    return int(round((1.0 - surviving_rate) * n))


def apply_missing(
    dataset: SplitDataset,
    spec: SplitSpec,
    logger: Logger = default_logger,
) -> SplitDataset:
    """
    Remove the victim modality according to ``spec``.

    Exactly ``round((1 - p) n)`` training samples lose the victim stream,
    chosen by a hash of ``(seed, id)``. In setting A every val/test sample
    loses it, in setting B each one independently with probability
    ``1 - p`` (again decided by the hash). Applying the same spec twice is
    the same as applying it once.
    """
    swap = spec.victim is Modality.M1 and not dataset.victim_swapped

    def prepared(samples: list[Sample]) -> list[Sample]:
        if not swap:
            return list(samples)
        return [s.swapped() if s.x2 is not None else s for s in samples]

    train = prepared(dataset.train)
    ranked = sorted(
        range(len(train)),
        key=lambda i: _hash_uniform(spec.seed, "mask", train[i].id),
    )
    masked_ids = {
        train[i].id
        for i in ranked[: masked_train_count(len(train), spec.surviving_rate)]
    }
    train = [s.masked() if s.id in masked_ids else s for s in train]

    def mask_eval(samples: list[Sample]) -> list[Sample]:
        if spec.setting is Setting.A:
            return [s.masked() for s in samples]
        return [
            s.masked()
            if _hash_uniform(spec.seed, "mask", s.id) < 1 - spec.surviving_rate
            else s
            for s in samples
        ]

    result = SplitDataset(
        train,
        mask_eval(prepared(dataset.val)),
        mask_eval(prepared(dataset.test)),
        victim_swapped=dataset.victim_swapped or swap,
        spec=spec,
    )
    logger.info(
        "masked %d/%d train, %d/%d val, %d/%d test samples (p=%g, "
        "setting %s)",
        *(
            x
            for part in (result.train, result.val, result.test)
            for x in (sum(s.is_masked for s in part), len(part))
        ),
        spec.surviving_rate,
        spec.setting.value,
    )
    return result


# JSONL IO


def _parse_sequence(value: Any, key: str, line_number: int) -> Matrix:
    if not isinstance(value, list) or not value:
        raise SchemaError(f"{key!r} must be a non-empty list", line_number)
    if not all(isinstance(row, list) for row in value):
        raise SchemaError(f"{key!r} must be a list of rows", line_number)
    widths = {len(row) for row in value}
    if len(widths) != 1 or 0 in widths:
        raise SchemaError(f"{key!r} has ragged or empty rows", line_number)
    try:
        array = np.array(value, dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise SchemaError(
            f"{key!r} has non-numeric values", line_number
        ) from e
    if not np.isfinite(array).all():
        raise DataError(f"line {line_number}: {key!r} has non-finite values")
    return array


def parse_sample(record: Any, line_number: int) -> Sample:
    if not isinstance(record, dict):
        raise SchemaError("expected a JSON object", line_number)
    missing = {"id", "m1", "y"} - set(record)
    if missing:
        raise SchemaError(f"missing keys {sorted(missing)}", line_number)
    x1 = _parse_sequence(record["m1"], "m1", line_number)
    x2 = record.get("m2")
    if x2 is not None:
        x2 = _parse_sequence(x2, "m2", line_number)
        if x2.shape[0] != x1.shape[0]:
            raise SchemaError(
                f"sequence lengths differ: m1 has {x1.shape[0]} rows, "
                f"m2 has {x2.shape[0]}",
                line_number,
            )
    y = record["y"]
    if isinstance(y, bool) or not isinstance(y, (int, float)):
        raise SchemaError(f"'y' must be a number, got {y!r}", line_number)
    if not np.isfinite(y):
        raise DataError(f"line {line_number}: non-finite label")
    offset = record.get("offset")
    return Sample(
        str(record["id"]),
        ModalitySequence(Modality.M1, x1),
        None if x2 is None else ModalitySequence(Modality.M2, x2),
        y,
        None if offset is None else int(offset),
    )


def ingest(path: Path, logger: Logger = default_logger) -> list[Sample]:
    """
    Read samples from a JSONL file.

    Each line is an object ``{"id": str, "m1": [[...], ...],
    "m2": [[...], ...] | null, "y": number}``; an optional ``"offset"``
    carries a known shift. Blank lines are skipped.
    """
    samples = []
    with path.open(encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaError(f"invalid JSON: {e.msg}", line_number) from e
            samples.append(parse_sample(record, line_number))
    logger.info("read %d samples from %s", len(samples), path)
    return samples


def sample_to_record(sample: Sample) -> dict[str, Any]:
    record: dict[str, Any] = {
        "id": sample.id,
        "m1": sample.x1.values.tolist(),
        "m2": None if sample.x2 is None else sample.x2.values.tolist(),
        "y": sample.y,
    }
    if sample.offset is not None:
        record["offset"] = sample.offset
    return record


def write_jsonl(samples: Iterable[Sample], path: Path) -> None:
    with path.open("w", encoding="utf-8") as f:
        for sample in samples:
            f.write(json.dumps(sample_to_record(sample)) + "\n")


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def stack(
    samples: Sequence[Sample],
) -> tuple[Matrix, Matrix | None, np.ndarray]:
    """
    Stack equal-length samples into ``(batch, l, d)`` arrays.

    The victim array is ``None`` unless every sample has one.
    """
    lengths = {s.length for s in samples}
    if len(lengths) != 1:
        raise DimensionError(f"can't stack samples of lengths {lengths}")
    x1 = np.stack([s.x1.values for s in samples])
    x2 = (
        np.stack([s.x2.values for s in samples])  # type: ignore[union-attr]
        if all(s.x2 is not None for s in samples)
        else None
    )
    return x1, x2, np.array([s.y for s in samples])
