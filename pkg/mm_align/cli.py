import logging
import os
from collections.abc import Iterator
from contextlib import contextmanager
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from sys import stderr
from textwrap import dedent
from typing import Any, Optional, Type, TypeVar

import typer

from . import __distribution_name__, __version__
from .app import App
from .common import (
    ConfigurationError,
    DataError,
    NumericalError,
    StatisticsError,
    UndefinedMetricError,
)
from .config import load_flat_config
from .data import SplitSpec
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

cli_app = typer.Typer()

seed_envvar = "MMALIGN_SEED"

# config file keys that differ from the parameter they set
config_aliases = {
    "lambda": "lambda_con",
    "p": "surviving_rate",
    "l": "length",
    "d": "dim",
}

E = TypeVar("E", bound=Enum)


@dataclass
class TyperState:
    verbosity: int = logging.WARNING


def _app_from_typer_state(state: TyperState) -> App:
    # logging's global configuration only happens here, everything below
    # gets handed a logger
    logging.basicConfig(level=state.verbosity)
    return App()


@contextmanager
def _exit_codes() -> Iterator[None]:
    try:
        yield
    except (ConfigurationError, StatisticsError) as e:
        print(f"error: {e}", file=stderr)
        raise typer.Exit(2)
    except (DataError, UndefinedMetricError) as e:
        print(f"error: {e}", file=stderr)
        raise typer.Exit(3)
    except NumericalError as e:
        print(f"numerical failure: {e}", file=stderr)
        raise typer.Exit(4)


def _enum(cls: Type[E], value: str, option: str) -> E:
    try:
        return cls(value)
    except ValueError:
        choices = ", ".join(str(m.value) for m in cls)
        raise ConfigurationError(
            f"invalid {option} {value!r} (choose from {choices})"
        )


def _int_list(value: str, option: str) -> list[int]:
    try:
        return [int(x) for x in value.split(",") if x.strip()]
    except ValueError:
        raise ConfigurationError(
            f"{option} must be a comma-separated list of integers, "
            f"got {value!r}"
        )


def _seed(seed: int | None) -> int:
    """
    The --seed flag or config value, else $MMALIGN_SEED, else 0.
    """
    if seed is not None:
        return seed
    raw = os.environ.get(seed_envvar)
    if raw is None or not raw.strip():
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigurationError(f"{seed_envvar} must be an integer: {raw!r}")


# Typer's idiom for implementing --version... don't even ask.
# https://typer.tiangolo.com/tutorial/options/version/
def version_callback(value: bool):
    if value:
        print(f"{__distribution_name__} {__version__}")
        raise typer.Exit()


@cli_app.callback()
def typer_callback(
    ctx: typer.Context,
    config: Optional[Path] = typer.Option(
        None,
        "--config",
        metavar="PATH",
        help="Flat key=value file with option defaults for every command "
        "(explicit flags take precedence).",
    ),
    verbose: int = typer.Option(
        0,
        "--verbose",
        "-v",
        count=True,
        help="Verbose output (repeat to increases verbosity, e.g. -vv, -vvv).",
    ),
    version: bool = typer.Option(
        False,
        "--version",
        "-V",
        callback=version_callback,
        help="Print version information and exit.",
        is_eager=True,
    ),
):
    if config is not None:
        with _exit_codes():
            try:
                values = load_flat_config(config)
            except OSError as e:
                raise ConfigurationError(f"can't read {config}: {e}")
        values = {config_aliases.get(k, k): v for k, v in values.items()}
        # subcommand contexts pick their defaults from here by name
        ctx.default_map = {
            name: dict(values) for name in ctx.command.commands  # type: ignore
        }
    ctx.obj = TyperState(
        verbosity={
            0: logging.WARNING,
            1: logging.INFO,
            2: logging.DEBUG,
            3: logging.NOTSET,
        }.get(verbose, 3),
    )


# XXX same hack as usual: enum_properties' members aren't typed
conditions_for_help = ", ".join(
    f"{c.value} ({c.full_name})" for c in Condition  # type: ignore
)
ablations_for_help = ", ".join(
    f"{a.value} ({a.full_name})" for a in Ablation  # type: ignore
)


# helpers shared by the commands that train models


def _seed_option():
    return typer.Option(
        None, help=f"Random seed (defaults to ${seed_envvar}, then 0)."
    )


def _train_options(
    eta_main: float,
    eta_fit: float,
    batch: int,
    lambda_con: float,
    mu: float,
    tau: float,
    window: int,
    warm_up: int,
    patience: int,
    max_epochs: int,
    fit_loss_mode: str,
    ablation: str,
    renorm: bool,
    clip_norm: float,
    sinkhorn_tol: float,
    sinkhorn_max_iter: int,
    log_domain_retry: bool,
    target_features: str,
    column_relaxation: float | None,
    seed: int | None,
) -> dict[str, Any]:
    return {
        "eta_main": eta_main,
        "eta_fit": eta_fit,
        "batch_size": batch,
        "lambda_con": lambda_con,
        "mu": mu,
        "tau": tau,
        "window": window,
        "warm_up_epochs": warm_up,
        "patience": patience,
        "max_epochs": max_epochs,
        "fit_loss_mode": _enum(FitLossMode, fit_loss_mode, "--fit-loss-mode"),
        "ablation": _enum(Ablation, ablation, "--ablation"),
        "column_renorm": renorm,
        "clip_norm": clip_norm,
        "sinkhorn_tol": sinkhorn_tol,
        "sinkhorn_max_iter": sinkhorn_max_iter,
        "log_domain_retry": log_domain_retry,
        "target_features": _enum(
            TargetFeatures, target_features, "--target-features"
        ),
        "column_relaxation": column_relaxation,
        "seed": _seed(seed),
    }


def _model_options(
    attn_dim: int,
    num_head: int,
    ffn_dim: int,
    encoder_layers: int,
    fusion_layers: int,
    positional: bool,
    residual_style: str,
) -> dict[str, Any]:
    return {
        "d_model": attn_dim,
        "num_heads": num_head,
        "ffn_dim": ffn_dim,
        "encoder_layers": encoder_layers,
        "fusion_layers": fusion_layers,
        "positional": positional,
        "residual_style": _enum(
            ResidualStyle, residual_style, "--residual-style"
        ),
    }


@cli_app.command()
def generate(
    ctx: typer.Context,
    out_dir: Path = typer.Argument(..., help="Directory to write to."),
    n: int = typer.Option(300, help="Number of samples."),
    length: int = typer.Option(32, "--length", "--l", help="Sequence length."),
    dim: int = typer.Option(
        8, "--dim", "--d", help="Feature dimension of both streams."
    ),
    shift_min: int = typer.Option(0, help="Smallest per-sample shift."),
    shift_max: int = typer.Option(3, help="Largest per-sample shift."),
    mix_noise: float = typer.Option(0.1, help="Victim stream noise level."),
    label_noise: float = typer.Option(0.1, help="Label noise level."),
    identity_mixing: bool = typer.Option(
        False, help="Use the identity instead of a random rotation."
    ),
    shift_cue: float = typer.Option(
        0.5, help="Offset per unit of shift added to both streams."
    ),
    task: str = typer.Option(
        "regression", help="regression or classification."
    ),
    num_classes: int = typer.Option(7, help="Classes for classification."),
    surviving_rate: float = typer.Option(
        0.5,
        "--p",
        "--surviving-rate",
        help="Fraction of training samples that keep the victim modality.",
    ),
    setting: str = typer.Option(
        "A",
        help="A: victim missing from all val/test samples; "
        "B: missing at the training rate.",
    ),
    victim: str = typer.Option("m2", help="Which stream goes missing."),
    seed: Optional[int] = _seed_option(),
):
    """
    Generate a synthetic dataset of shifted parallel sequences, split and
    masked.
    """
    app = _app_from_typer_state(ctx.obj)
    with _exit_codes():
        spec = SplitSpec(
            surviving_rate,
            _enum(Setting, setting, "--setting"),
            _enum(Modality, victim, "--victim"),
            _seed(seed),
        )
        app.generate(
            out_dir,
            n,
            length,
            dim,
            spec,
            (shift_min, shift_max),
            mix_noise,
            label_noise,
            _enum(TaskMode, task, "--task"),
            num_classes,
            identity_mixing,
            shift_cue,
        )


@cli_app.command(
    help=dedent(
        f"""
        Train a model on a generated (or equally laid out) data directory.

        Conditions: {conditions_for_help}

        Ablations: {ablations_for_help}
        """
    )
)
def train(
    ctx: typer.Context,
    data_dir: Path = typer.Argument(..., help="Data directory."),
    out: Path = typer.Option(..., help="Run directory to write to."),
    condition: str = typer.Option("mm-align", help="What to train."),
    eta_main: float = typer.Option(1e-3, help="Backbone learning rate."),
    eta_fit: float = typer.Option(5e-4, help="Fitter learning rate."),
    batch: int = typer.Option(32, help="Batch size."),
    lambda_con: float = typer.Option(
        0.1, "--lambda", help="Contrastive loss weight."
    ),
    mu: float = typer.Option(0.1, help="Sinkhorn entropic weight."),
    tau: float = typer.Option(0.1, help="Contrastive temperature."),
    window: int = typer.Option(8, help="Alignment window radius W."),
    warm_up: int = typer.Option(1, help="Warm-up epochs."),
    patience: int = typer.Option(10, help="Early stopping patience."),
    max_epochs: int = typer.Option(30, help="Maximum training epochs."),
    fit_loss_mode: str = typer.Option("mse", help="mse or scaled-root."),
    ablation: str = typer.Option("none", help="Ablation to apply."),
    renorm: bool = typer.Option(
        True, help="Renormalize columns of reconstructed plans."
    ),
    clip_norm: float = typer.Option(
        1.0, help="Global gradient norm clip (0 disables)."
    ),
    sinkhorn_tol: float = typer.Option(1e-6, help="Sinkhorn tolerance."),
    sinkhorn_max_iter: int = typer.Option(500, help="Sinkhorn iterations."),
    log_domain_retry: bool = typer.Option(
        False, help="Retry ill-conditioned Sinkhorn solves in log domain."
    ),
    target_features: str = typer.Option(
        "shared", help="Fitter targets on shared or input features."
    ),
    column_relaxation: Optional[float] = typer.Option(
        None, help="Relax the target column marginal with this KL weight."
    ),
    attn_dim: int = typer.Option(32, help="Model dimension."),
    num_head: int = typer.Option(4, help="Attention heads."),
    ffn_dim: int = typer.Option(64, help="Feed-forward hidden size."),
    encoder_layers: int = typer.Option(1, help="Per-modality layers."),
    fusion_layers: int = typer.Option(2, help="Cross-modal layers."),
    positional: bool = typer.Option(True, help="Positional embeddings."),
    residual_style: str = typer.Option(
        "inner_ln", help="inner_ln, pre_ln or post_ln."
    ),
    seed: Optional[int] = _seed_option(),
):
    app = _app_from_typer_state(ctx.obj)
    with _exit_codes():
        app.train(
            data_dir,
            out,
            _model_options(
                attn_dim,
                num_head,
                ffn_dim,
                encoder_layers,
                fusion_layers,
                positional,
                residual_style,
            ),
            _train_options(
                eta_main,
                eta_fit,
                batch,
                lambda_con,
                mu,
                tau,
                window,
                warm_up,
                patience,
                max_epochs,
                fit_loss_mode,
                ablation,
                renorm,
                clip_norm,
                sinkhorn_tol,
                sinkhorn_max_iter,
                log_domain_retry,
                target_features,
                column_relaxation,
                seed,
            ),
            _enum(Condition, condition, "--condition"),
        )


@cli_app.command("eval")
def evaluate(
    ctx: typer.Context,
    run_dir: Path = typer.Argument(..., help="Run directory of `train`."),
    data_dir: Path = typer.Argument(..., help="Data directory."),
    out: Path = typer.Option(..., help="Directory for the report."),
    seeds: str = typer.Option(
        "",
        help="Comma-separated seeds for multi-seed runs with the "
        "checkpoint's configuration (none: only evaluate the checkpoint).",
    ),
    baselines: str = typer.Option(
        "",
        help="Comma-separated baseline conditions to run over the seeds "
        "and test against MM-Align (lb, ub, zero-impute).",
    ),
    workers: int = typer.Option(1, help="Seed runs to execute at once."),
):
    """
    Evaluate a trained checkpoint on the test split, optionally with
    multi-seed runs and paired t-tests against baselines.
    """
    app = _app_from_typer_state(ctx.obj)
    with _exit_codes():
        app.evaluate(
            run_dir,
            data_dir,
            out,
            [
                _enum(Condition, b.strip(), "--baselines")
                for b in baselines.split(",")
                if b.strip()
            ],
            _int_list(seeds, "--seeds"),
            workers,
        )


@cli_app.command()
def sweep_window(
    ctx: typer.Context,
    data_dir: Path = typer.Argument(..., help="Data directory."),
    out: Path = typer.Option(..., help="Directory for the sweep results."),
    windows: str = typer.Option(
        "0,1,2,4,8", help="Comma-separated window radii."
    ),
    seeds: str = typer.Option("0,1,2,3,4", help="Comma-separated seeds."),
    workers: int = typer.Option(1, help="Seed runs to execute at once."),
    eta_main: float = typer.Option(1e-3, help="Backbone learning rate."),
    eta_fit: float = typer.Option(5e-4, help="Fitter learning rate."),
    batch: int = typer.Option(32, help="Batch size."),
    lambda_con: float = typer.Option(
        0.1, "--lambda", help="Contrastive loss weight."
    ),
    mu: float = typer.Option(0.1, help="Sinkhorn entropic weight."),
    tau: float = typer.Option(0.1, help="Contrastive temperature."),
    warm_up: int = typer.Option(1, help="Warm-up epochs."),
    patience: int = typer.Option(10, help="Early stopping patience."),
    max_epochs: int = typer.Option(30, help="Maximum training epochs."),
    fit_loss_mode: str = typer.Option("mse", help="mse or scaled-root."),
    ablation: str = typer.Option("none", help="Ablation to apply."),
    renorm: bool = typer.Option(
        True, help="Renormalize columns of reconstructed plans."
    ),
    clip_norm: float = typer.Option(
        1.0, help="Global gradient norm clip (0 disables)."
    ),
    sinkhorn_tol: float = typer.Option(1e-6, help="Sinkhorn tolerance."),
    sinkhorn_max_iter: int = typer.Option(500, help="Sinkhorn iterations."),
    log_domain_retry: bool = typer.Option(
        False, help="Retry ill-conditioned Sinkhorn solves in log domain."
    ),
    target_features: str = typer.Option(
        "shared", help="Fitter targets on shared or input features."
    ),
    column_relaxation: Optional[float] = typer.Option(
        None, help="Relax the target column marginal with this KL weight."
    ),
    attn_dim: int = typer.Option(32, help="Model dimension."),
    num_head: int = typer.Option(4, help="Attention heads."),
    ffn_dim: int = typer.Option(64, help="Feed-forward hidden size."),
    encoder_layers: int = typer.Option(1, help="Per-modality layers."),
    fusion_layers: int = typer.Option(2, help="Cross-modal layers."),
    positional: bool = typer.Option(True, help="Positional embeddings."),
    residual_style: str = typer.Option(
        "inner_ln", help="inner_ln, pre_ln or post_ln."
    ),
    seed: Optional[int] = _seed_option(),
):
    """
    Train and test MM-Align over seeds for each window radius.
    """
    app = _app_from_typer_state(ctx.obj)
    with _exit_codes():
        app.sweep_window(
            data_dir,
            out,
            _int_list(windows, "--windows"),
            _int_list(seeds, "--seeds"),
            _model_options(
                attn_dim,
                num_head,
                ffn_dim,
                encoder_layers,
                fusion_layers,
                positional,
                residual_style,
            ),
            _train_options(
                eta_main,
                eta_fit,
                batch,
                lambda_con,
                mu,
                tau,
                0,
                warm_up,
                patience,
                max_epochs,
                fit_loss_mode,
                ablation,
                renorm,
                clip_norm,
                sinkhorn_tol,
                sinkhorn_max_iter,
                log_domain_retry,
                target_features,
                column_relaxation,
                seed,
            ),
            workers,
        )


@cli_app.command()
def solve_align(
    ctx: typer.Context,
    data_path: Path = typer.Argument(..., help="JSONL samples file."),
    out: Path = typer.Option(..., help="Directory for the dumps."),
    window: int = typer.Option(8, help="Alignment window radius W."),
    mu: float = typer.Option(0.1, help="Sinkhorn entropic weight."),
    ids: str = typer.Option("", help="Comma-separated sample ids."),
    limit: Optional[int] = typer.Option(
        None, help="Maximum number of samples."
    ),
    min_length: int = typer.Option(
        1, help="Shortest sequence counted in the heat data."
    ),
    sinkhorn_tol: float = typer.Option(1e-6, help="Sinkhorn tolerance."),
    sinkhorn_max_iter: int = typer.Option(500, help="Sinkhorn iterations."),
    log_domain_retry: bool = typer.Option(
        False, help="Retry ill-conditioned Sinkhorn solves in log domain."
    ),
):
    """
    Solve and dump alignment plans between the two streams of samples.

    alignments.txt holds one block per sample: a "# <id>" line, an "l W"
    line, then l rows of 2W+1 band entries (slot k of row i is the mass
    between positions i and i-W+k).
    """
    app = _app_from_typer_state(ctx.obj)
    with _exit_codes():
        app.solve_align(
            data_path,
            out,
            window,
            mu,
            [i.strip() for i in ids.split(",") if i.strip()],
            limit,
            min_length,
            sinkhorn_tol,
            sinkhorn_max_iter,
            log_domain_retry,
        )


@cli_app.command()
def bench(
    ctx: typer.Context,
    lengths: str = typer.Option(
        "32,64,128", help="Comma-separated sequence lengths."
    ),
    dim: int = typer.Option(32, help="Representation dimension."),
    reps: int = typer.Option(20, help="Repetitions per length."),
    window: int = typer.Option(8, help="Alignment window radius W."),
    batch: int = typer.Option(32, help="Batch size."),
    out: Optional[Path] = typer.Option(
        None, help="JSON file to write the report to."
    ),
    seed: Optional[int] = _seed_option(),
):
    """
    Time the imputation path (fitter, plan reconstruction, imputation).
    """
    app = _app_from_typer_state(ctx.obj)
    with _exit_codes():
        app.bench(
            _int_list(lengths, "--lengths"),
            dim,
            reps,
            window,
            batch,
            _seed(seed),
            out,
        )


def cli_main():
    cli_app()


if __name__ == "__main__":
    cli_main()
