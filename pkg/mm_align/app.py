import json
import platform
import time
from collections.abc import Mapping, Sequence
from dataclasses import replace
from logging import Logger, getLogger
from pathlib import Path
from typing import Any

import numpy as np
from yachalk import chalk

from . import __distribution_name__, __version__
from .adl import Fitter, impute_content, reconstruct_band
from .checkpoint import (
    RunManifest,
    checkpoint_digest,
    load_checkpoint,
    run_manifest_filename,
    save_checkpoint,
)
from .common import ConfigurationError, DataError
from .config import ModelConfig, TrainConfig
from .data import (
    Sample,
    SplitDataset,
    SplitSpec,
    apply_missing,
    file_digest,
    ingest,
    split_dataset,
    synth_generate,
    write_jsonl,
)
from .enums import Condition, Setting, TaskMode
from .evaluation import (
    MetricReport,
    evaluate_model,
    run_condition,
    window_sweep,
)
from .ot_align import band_slot_means, build_cost, sinkhorn
from .training import build_model, fit, validation_metric

default_logger = getLogger(__name__)

partition_names = ("train", "val", "test")
sidecar_filename = "split.json"
reference_dirname = "reference"
checkpoint_dirname = "checkpoint"
training_log_filename = "training_log.jsonl"


def _write_json(path: Path, data: Any) -> None:
    path.write_text(
        json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _print_rows(title: str, rows: Sequence[tuple[str, Any]]) -> list[str]:
    print(chalk.bold(title))
    width = max((len(name) for name, _ in rows), default=0)
    lines = [f"  {name:<{width}}  {value}" for name, value in rows]
    for line in lines:
        print(line)
    return [title] + lines


class DataDir:
    """
    A directory written by :meth:`App.generate` (or laid out the same way).
    """

    def __init__(self, path: Path, logger: Logger = default_logger):
        self.path = path
        self.logger = logger
        sidecar_path = path / sidecar_filename
        try:
            self.sidecar = json.loads(sidecar_path.read_text("utf-8"))
        except FileNotFoundError as e:
            raise DataError(f"no {sidecar_filename} in {path}") from e
        self.spec = SplitSpec.from_dict(self.sidecar["split"])
        self.task = TaskMode(self.sidecar.get("task", "regression"))
        self.num_classes = int(self.sidecar.get("num_classes", 7))

    def _read(self, directory: Path) -> SplitDataset:
        parts = {
            name: ingest(directory / f"{name}.jsonl", logger=self.logger)
            for name in partition_names
        }
        return SplitDataset(
            parts["train"],
            parts["val"],
            parts["test"],
            victim_swapped=True,
            spec=self.spec,
        )

    def masked(self) -> SplitDataset:
        return self._read(self.path)

    def reference(self) -> SplitDataset:
        directory = self.path / reference_dirname
        if not directory.is_dir():
            raise DataError(
                f"no unmasked {reference_dirname}/ splits in {self.path}"
            )
        return self._read(directory)

    def dataset_for(self, condition: Condition) -> SplitDataset:
        return self.masked() if condition.masks_training else self.reference()

    def input_files(self) -> list[Path]:
        return [self.path / sidecar_filename] + [
            self.path / f"{name}.jsonl" for name in partition_names
        ]

    def digests(self) -> dict[str, str]:
        return {p.name: file_digest(p) for p in self.input_files()}

    def dims(self) -> tuple[int, int]:
        return int(self.sidecar["d_in1"]), int(self.sidecar["d_in2"])


class App:
    def __init__(self, logger: Logger = default_logger):
        self.logger = logger

    def _run_manifest(
        self,
        command: str,
        config: Mapping[str, Any],
        seed: int | None,
        inputs: Mapping[str, str] | None = None,
        outputs: Mapping[str, str] | None = None,
    ) -> RunManifest:
        return RunManifest(
            command,
            dict(config),
            f"{__distribution_name__} {__version__}",
            seed,
            dict(inputs or {}),
            dict(outputs or {}),
        )

    def generate(
        self,
        out_dir: Path,
        n: int,
        length: int,
        dim: int,
        spec: SplitSpec,
        shift_range: tuple[int, int] = (0, 3),
        mix_noise: float = 0.1,
        label_noise: float = 0.1,
        task: TaskMode = TaskMode.REGRESSION,
        num_classes: int = 7,
        identity_mixing: bool = False,
        shift_cue: float = 0.5,
    ) -> None:
        config = {
            "n": n,
            "length": length,
            "dim": dim,
            "shift_range": list(shift_range),
            "mix_noise": mix_noise,
            "label_noise": label_noise,
            "task": task.value,
            "num_classes": num_classes,
            "identity_mixing": identity_mixing,
            "shift_cue": shift_cue,
            "split": spec.to_dict(),
        }
        outputs = {
            name: str(out_dir / f"{name}.jsonl") for name in partition_names
        }
        out_dir.mkdir(parents=True, exist_ok=True)
        self._run_manifest(
            "generate", config, spec.seed, outputs=outputs
        ).write(out_dir / run_manifest_filename)
        samples = synth_generate(
            n,
            length,
            dim,
            shift_range,
            mix_noise,
            label_noise,
            spec.seed,
            task,
            num_classes,
            identity_mixing,
            shift_cue=shift_cue,
            logger=self.logger,
        )
        split = split_dataset(samples, spec.fractions, spec.seed)
        masked = apply_missing(split, spec, logger=self.logger)
        # same stream orientation as the masked files, nothing removed
        reference = apply_missing(
            split,
            replace(spec, surviving_rate=1.0, setting=Setting.B),
            logger=self.logger,
        )
        reference_dir = out_dir / reference_dirname
        reference_dir.mkdir(exist_ok=True)
        for name in partition_names:
            write_jsonl(masked.partitions()[name], out_dir / f"{name}.jsonl")
            write_jsonl(
                reference.partitions()[name], reference_dir / f"{name}.jsonl"
            )
        counts = {
            name: {
                "samples": len(part),
                "masked": sum(s.is_masked for s in part),
            }
            for name, part in masked.partitions().items()
        }
        _write_json(
            out_dir / sidecar_filename,
            {
                "split": spec.to_dict(),
                "task": task.value,
                "num_classes": num_classes,
                "length": length,
                "d_in1": dim,
                "d_in2": dim,
                "counts": counts,
            },
        )
        _print_rows(
            f"Generated {n} samples in {out_dir}",
            [
                (name, f"{c['samples']} samples, {c['masked']} masked")
                for name, c in counts.items()
            ],
        )

    def _configs(
        self,
        data: DataDir,
        model_options: Mapping[str, Any],
        train_options: Mapping[str, Any],
    ) -> tuple[ModelConfig, TrainConfig]:
        d_in1, d_in2 = data.dims()
        model_cfg = ModelConfig(
            d_in1=d_in1,
            d_in2=d_in2,
            task=data.task,
            num_classes=data.num_classes,
            **model_options,
        )
        train_cfg = TrainConfig(
            surviving_rate=data.spec.surviving_rate,
            setting=data.spec.setting,
            **train_options,
        )
        return model_cfg, train_cfg

    def train(
        self,
        data_dir: Path,
        out_dir: Path,
        model_options: Mapping[str, Any],
        train_options: Mapping[str, Any],
        condition: Condition = Condition.MM_ALIGN,
    ) -> None:
        data = DataDir(data_dir, self.logger)
        model_cfg, train_cfg = self._configs(
            data, model_options, train_options
        )
        dataset = data.dataset_for(condition)
        checkpoint_dir = out_dir / checkpoint_dirname
        log_path = out_dir / training_log_filename
        out_dir.mkdir(parents=True, exist_ok=True)
        self._run_manifest(
            "train",
            {
                "model": model_cfg.to_dict(),
                "train": train_cfg.to_dict(),
                "condition": condition.value,
                "data_dir": str(data_dir),
            },
            train_cfg.seed,
            inputs=data.digests(),
            outputs={
                "checkpoint": str(checkpoint_dir),
                "log": str(log_path),
            },
        ).write(out_dir / run_manifest_filename)
        model = build_model(model_cfg, train_cfg)
        result = fit(model, dataset, train_cfg, condition, logger=self.logger)
        with log_path.open("w", encoding="utf-8") as f:
            for report in result.log:
                f.write(json.dumps(report.to_dict()) + "\n")
        save_checkpoint(
            model,
            train_cfg,
            checkpoint_dir,
            extra={
                "condition": condition.value,
                "best_metric": result.best_metric,
                "best_epoch": result.best_epoch,
            },
            logger=self.logger,
        )
        _print_rows(
            "Training finished",
            [
                ("epochs", len(result.log)),
                ("best epoch", result.best_epoch),
                (f"val {model_cfg.task.metric}", result.best_metric),
                ("checkpoint", checkpoint_dir),
                ("digest", checkpoint_digest(checkpoint_dir)),
            ],
        )

    def _print_report(self, title: str, report: MetricReport) -> list[str]:
        return _print_rows(title, report.table_rows())

    def evaluate(
        self,
        run_dir: Path,
        data_dir: Path,
        out_dir: Path,
        baselines: Sequence[Condition] = (),
        seeds: Sequence[int] = (),
        workers: int = 1,
    ) -> None:
        if baselines and not seeds:
            raise ConfigurationError("baseline runs need --seeds")
        manifest = RunManifest.read(run_dir / run_manifest_filename)
        data = DataDir(data_dir, self.logger)
        actual = data.digests()
        for name, digest in manifest.inputs.items():
            if actual.get(name) != digest:
                raise DataError(
                    f"input {name} in {data_dir} doesn't match the digest "
                    f"recorded for the training run"
                )
        model, train_cfg, extra = load_checkpoint(
            run_dir / checkpoint_dirname, logger=self.logger
        )
        condition = Condition(extra.get("condition", "mm-align"))
        dataset = data.dataset_for(condition)
        metric = model.task.metric
        val_metric = validation_metric(model, dataset.val, condition)
        report = MetricReport(
            task=model.task,
            condition=condition,
            setting=data.spec.setting.value,
            surviving_rate=data.spec.surviving_rate,
            victim=data.spec.victim.value,
            seeds=[train_cfg.seed],
            per_seed={
                k: [v]
                for k, v in evaluate_model(
                    model, dataset.test, condition
                ).items()
            },
            extra={
                f"val_{metric}": val_metric,
                f"recorded_val_{metric}": extra.get("best_metric"),
            },
        )
        out_dir.mkdir(parents=True, exist_ok=True)
        text = self._print_report(f"Test metrics ({condition.value})", report)
        text += _print_rows(
            "Validation",
            [
                (f"{metric} (recomputed)", val_metric),
                (f"{metric} (recorded)", extra.get("best_metric")),
            ],
        )
        reports: dict[str, Any] = {"checkpoint": report.to_dict()}
        if seeds:
            reference = data.reference()
            model_cfg = model.config
            ours = run_condition(
                Condition.MM_ALIGN,
                reference,
                data.spec,
                model_cfg,
                train_cfg,
                seeds,
                workers=workers,
                logger=self.logger,
            )
            reports[Condition.MM_ALIGN.value] = ours.to_dict()
            text += self._print_report(
                f"{Condition.MM_ALIGN.value} over seeds {list(seeds)}", ours
            )
            for baseline in baselines:
                if baseline is Condition.MM_ALIGN:
                    continue
                other = run_condition(
                    baseline,
                    reference,
                    data.spec,
                    model_cfg,
                    train_cfg,
                    seeds,
                    compare_to=ours,
                    workers=workers,
                    logger=self.logger,
                )
                reports[baseline.value] = other.to_dict()
                text += self._print_report(
                    f"{baseline.value} ({baseline.full_name})",
                    other,
                )
        _write_json(out_dir / "report.json", reports)
        (out_dir / "report.txt").write_text(
            "\n".join(text) + "\n", encoding="utf-8"
        )

    def sweep_window(
        self,
        data_dir: Path,
        out_dir: Path,
        windows: Sequence[int],
        seeds: Sequence[int],
        model_options: Mapping[str, Any],
        train_options: Mapping[str, Any],
        workers: int = 1,
    ) -> None:
        data = DataDir(data_dir, self.logger)
        model_cfg, train_cfg = self._configs(
            data, model_options, train_options
        )
        out_dir.mkdir(parents=True, exist_ok=True)
        self._run_manifest(
            "sweep-window",
            {
                "model": model_cfg.to_dict(),
                "train": train_cfg.to_dict(),
                "windows": list(windows),
                "seeds": list(seeds),
            },
            train_cfg.seed,
            inputs=data.digests(),
        ).write(out_dir / run_manifest_filename)
        sweep = window_sweep(
            data.reference(),
            data.spec,
            model_cfg,
            train_cfg,
            windows,
            seeds,
            workers=workers,
            logger=self.logger,
        )
        _write_json(out_dir / "sweep.json", sweep.to_dict())
        (out_dir / "sweep.csv").write_text(sweep.to_csv(), encoding="utf-8")
        text = _print_rows(
            f"Window sweep ({sweep.metric}, best W={sweep.best_window})",
            [
                (f"W={w}", f"{mean:.4f} ± {std:.4f}")
                for w, mean, std in sweep.series()
            ],
        )
        (out_dir / "sweep.txt").write_text(
            "\n".join(text) + "\n", encoding="utf-8"
        )

    def solve_align(
        self,
        data_path: Path,
        out_dir: Path,
        window: int,
        mu: float,
        ids: Sequence[str] = (),
        limit: int | None = None,
        min_length: int = 1,
        tol: float = 1e-6,
        max_iter: int = 500,
        log_domain_retry: bool = False,
    ) -> None:
        """
        Dump Sinkhorn plans between the raw feature streams of samples and
        the per-slot heat data.

        The dump holds, per sample, a ``# <id>`` line, an ``l W`` header and
        ``l`` rows of ``2W + 1`` band entries; entries outside the band are
        not part of the format.
        """
        samples: list[Sample] = ingest(data_path, logger=self.logger)
        if ids:
            wanted = set(ids)
            samples = [s for s in samples if s.id in wanted]
            missing_ids = wanted - {s.id for s in samples}
            if missing_ids:
                raise DataError(f"unknown sample ids {sorted(missing_ids)}")
        complete = [s for s in samples if s.x2 is not None]
        if len(complete) < len(samples):
            self.logger.warning(
                "skipping %d samples without the victim modality",
                len(samples) - len(complete),
            )
        if limit is not None:
            complete = complete[:limit]
        out_dir.mkdir(parents=True, exist_ok=True)
        bands = []
        with (out_dir / "alignments.txt").open("w", encoding="utf-8") as f:
            for sample in complete:
                assert sample.x2 is not None
                plan = sinkhorn(
                    build_cost(sample.x1.values, sample.x2.values, window),
                    mu,
                    tol,
                    max_iter,
                    log_domain_retry,
                    logger=self.logger,
                )
                bands.append(plan.band)
                f.write(f"# {sample.id}\n{plan.length} {window}\n")
                for row in plan.band:
                    f.write(" ".join(repr(float(x)) for x in row) + "\n")
        heat = band_slot_means(bands, window, min_length)
        with (out_dir / "heat.csv").open("w", encoding="utf-8") as f:
            f.write("slot,offset,mean_abs\n")
            for slot, value in enumerate(heat):
                f.write(f"{slot},{slot - window},{value!r}\n")
        peak = int(np.argmax(heat)) if heat.any() else window
        _print_rows(
            f"Alignments for {len(complete)} samples in {out_dir}",
            [("peak slot", peak), ("peak offset", peak - window)],
        )

    def bench(
        self,
        lengths: Sequence[int] = (32, 64, 128),
        dim: int = 32,
        reps: int = 20,
        window: int = 8,
        batch: int = 32,
        seed: int = 0,
        out: Path | None = None,
    ) -> dict[str, Any]:
        """
        Time the alignment dynamics learner's decode path (fitter, plan
        reconstruction, imputation) across sequence lengths.
        """
        if reps < 1:
            raise ConfigurationError(f"repetitions must be >= 1, got {reps}")
        if not lengths or min(lengths) < 1 or dim < 1 or batch < 1:
            raise ConfigurationError("lengths, dim and batch must be >= 1")
        rng = np.random.default_rng(seed)
        fitter = Fitter(rng, dim, window)
        medians = {}
        for length in lengths:
            z = rng.standard_normal((batch, length, dim))
            timings = []
            for _ in range(reps):
                started = time.perf_counter()
                probs, _ = fitter.forward(z)
                impute_content(reconstruct_band(probs), z)
                timings.append(time.perf_counter() - started)
            medians[length] = float(np.median(timings))
        ratios = {
            f"{a}->{b}": medians[b] / medians[a]
            for a, b in zip(lengths, lengths[1:])
        }
        report = {
            "dim": dim,
            "window": window,
            "batch": batch,
            "repetitions": reps,
            "median_seconds": {str(k): v for k, v in medians.items()},
            "ratios": ratios,
            "machine": {
                "platform": platform.platform(),
                "processor": platform.processor() or platform.machine(),
                "python": platform.python_version(),
                "numpy": np.__version__,
            },
        }
        _print_rows(
            f"ADL decode timing (d={dim}, W={window}, {reps} repetitions)",
            [(f"l={k}", f"{v * 1e3:.3f} ms") for k, v in medians.items()]
            + [(f"ratio {k}", f"{v:.2f}") for k, v in ratios.items()]
            + [(k, v) for k, v in report["machine"].items()],
        )
        if out is not None:
            out.parent.mkdir(parents=True, exist_ok=True)
            _write_json(out, report)
        return report
