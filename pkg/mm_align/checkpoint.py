"""
Checkpoints and run manifests.

A checkpoint is a directory holding ``manifest.json`` (format version,
shape table, configurations, seed) and one raw little-endian f64 file per
parameter group, ``<group>.bin``, with the group's parameters concatenated
in shape-table order.
"""
import hashlib
import json
from dataclasses import dataclass, field
from logging import Logger, getLogger
from pathlib import Path
from typing import Any

import numpy as np

from .common import DataError
from .config import ModelConfig, TrainConfig
from .model import MMAlignModel, ModelParams, param_groups
from .training import build_model

default_logger = getLogger(__name__)

format_version = 1
manifest_filename = "manifest.json"
run_manifest_filename = "run_manifest.json"


def _block_path(directory: Path, group: str) -> Path:
    return directory / f"{group}.bin"


def save_checkpoint(
    model: MMAlignModel,
    train_cfg: TrainConfig,
    directory: Path,
    extra: dict[str, Any] | None = None,
    logger: Logger = default_logger,
) -> None:
    """
    Args:
        model: Model whose parameters to save.
        train_cfg: Training configuration (window and seed are needed to
            rebuild the model).
        directory: Checkpoint directory; created if missing.
        extra: Additional JSON-serializable metadata for the manifest.
        logger: Logger to log messages to.
    """
    directory.mkdir(parents=True, exist_ok=True)
    groups = ModelParams.of(model).groups()
    shapes = []
    for group, params in groups.items():
        with _block_path(directory, group).open("wb") as f:
            for name, value in params.items():
                f.write(np.ascontiguousarray(value, dtype="<f8").tobytes())
                shapes.append(
                    {"name": name, "group": group, "shape": list(value.shape)}
                )
    manifest = {
        "format_version": format_version,
        "model_config": model.config.to_dict(),
        "train_config": train_cfg.to_dict(),
        "seed": train_cfg.seed,
        "shapes": shapes,
        "extra": extra or {},
    }
    (directory / manifest_filename).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    logger.info("saved checkpoint to %s", directory)


def read_manifest(directory: Path) -> dict[str, Any]:
    path = directory / manifest_filename
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise DataError(f"no checkpoint manifest at {path}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"malformed checkpoint manifest {path}: {e}") from e
    version = manifest.get("format_version")
    if version != format_version:
        raise DataError(
            f"unsupported checkpoint format version {version!r} "
            f"(expected {format_version})"
        )
    return manifest


def load_params_into(model: MMAlignModel, directory: Path) -> None:
    """
    Overwrite ``model``'s parameters in place with a checkpoint's.
    """
    manifest = read_manifest(directory)
    params = model.params
    expected = {
        entry["name"]: (entry["group"], tuple(entry["shape"]))
        for entry in manifest["shapes"]
    }
    if set(expected) != set(params):
        raise DataError(
            "checkpoint parameters don't match the model: "
            f"{sorted(set(expected) ^ set(params))}"
        )
    for group in param_groups:
        path = _block_path(directory, group)
        try:
            raw = np.frombuffer(path.read_bytes(), dtype="<f8")
        except FileNotFoundError as e:
            raise DataError(f"missing checkpoint block {path}") from e
        offset = 0
        for entry in manifest["shapes"]:
            if entry["group"] != group:
                continue
            target = params[entry["name"]]
            if target.shape != tuple(entry["shape"]):
                raise DataError(
                    f"shape of {entry['name']} is {target.shape} in the "
                    f"model but {tuple(entry['shape'])} in the checkpoint"
                )
            size = target.size
            if offset + size > raw.size:
                raise DataError(f"checkpoint block {path} is truncated")
            target[...] = raw[offset : offset + size].reshape(target.shape)
            offset += size
        if offset != raw.size:
            raise DataError(f"checkpoint block {path} has trailing data")


def load_checkpoint(
    directory: Path, logger: Logger = default_logger
) -> tuple[MMAlignModel, TrainConfig, dict[str, Any]]:
    """
    Rebuild the model stored in a checkpoint.

    Returns:
        The model, its training configuration and the manifest's extra
        metadata.
    """
    manifest = read_manifest(directory)
    model_cfg = ModelConfig.from_dict(manifest["model_config"])
    train_cfg = TrainConfig.from_dict(manifest["train_config"])
    model = build_model(model_cfg, train_cfg)
    load_params_into(model, directory)
    logger.info("loaded checkpoint from %s", directory)
    return model, train_cfg, manifest.get("extra", {})


def checkpoint_digest(directory: Path) -> str:
    "SHA-256 over the manifest and all parameter blocks"
    h = hashlib.sha256()
    for name in [manifest_filename] + [f"{g}.bin" for g in param_groups]:
        h.update(name.encode())
        h.update((directory / name).read_bytes())
    return h.hexdigest()


@dataclass
class RunManifest:
    """
    Record of one CLI run, written before any work starts.
    """

    command: str
    config: dict[str, Any]
    version: str
    seed: int | None
    inputs: dict[str, str] = field(default_factory=dict)
    "Input path to SHA-256 digest"
    outputs: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "command": self.command,
            "config": self.config,
            "version": self.version,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunManifest":
        return cls(
            data["command"],
            data["config"],
            data["version"],
            data.get("seed"),
            dict(data.get("inputs", {})),
            dict(data.get("outputs", {})),
        )

    def write(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )

    @classmethod
    def read(cls, path: Path) -> "RunManifest":
        try:
            return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))
        except (FileNotFoundError, json.JSONDecodeError, KeyError) as e:
            raise DataError(f"can't read run manifest {path}: {e}") from e
