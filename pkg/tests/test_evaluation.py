import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import t as student_t

from mm_align.common import (
    ConfigurationError,
    DimensionError,
    StatisticsError,
)
from mm_align.data import SplitSpec, split_dataset, synth_generate
from mm_align.enums import Ablation, Condition, TargetFeatures, TaskMode
from mm_align.evaluation import (
    MetricReport,
    SweepReport,
    fitter_shift_recovery,
    paired_ttest,
    run_condition,
    shift_recovery,
    window_sweep,
)
from mm_align.ot_align import valid_slot_count
from mm_align.training import Trainer, build_model
from tests.utils_for_tests import tiny_model_config, tiny_train_config


def test_paired_ttest_conventions():
    assert paired_ttest([0.3, 0.5, 0.4], [0.3, 0.5, 0.4]) == 1.0
    assert paired_ttest([1.0, 2.0, 3.0], [0.5, 1.5, 2.5]) == 0.0
    with pytest.raises(StatisticsError):
        paired_ttest([1.0], [2.0])
    with pytest.raises(DimensionError):
        paired_ttest([1.0, 2.0], [1.0, 2.0, 3.0])


def test_paired_ttest_against_hand_computation():
    a = np.array([0.52, 0.61, 0.48, 0.55, 0.60])
    b = np.array([0.50, 0.57, 0.49, 0.50, 0.54])
    diff = a - b
    t = diff.mean() / (diff.std(ddof=1) / math.sqrt(5))
    expected = 2 * student_t.sf(abs(t), df=4)
    assert np.isclose(paired_ttest(a, b), expected, rtol=1e-10)


def _report(condition, values, seeds=(0, 1), metric="mae"):
    return MetricReport(
        task=TaskMode.REGRESSION,
        condition=condition,
        setting="A",
        surviving_rate=0.5,
        victim="m2",
        seeds=list(seeds),
        per_seed={metric: list(values)},
    )


def test_metric_report_summary():
    report = _report(Condition.MM_ALIGN, [1.0, 3.0])
    assert report.mean == {"mae": 2.0}
    assert report.std == {"mae": 1.0}
    assert report.significant is None
    report.p_value = 0.01
    report.reference = "lb"
    assert report.significant
    assert report.to_dict()["p_value"] == 0.01
    assert report.table_rows()[-1] == ("p vs lb", "0.01")


def test_sweep_report_picks_the_best_window():
    reports = [
        _report(Condition.MM_ALIGN, values)
        for values in ([0.9, 1.1], [0.4, 0.6], [0.7, 0.7])
    ]
    sweep = SweepReport("mae", [0, 2, 4], reports)
    assert sweep.best_window == 2
    lines = sweep.to_csv().splitlines()
    assert lines[0] == "W,mae_mean,mae_std"
    assert lines[2].startswith("2,0.5,")
    assert sweep.to_dict()["best_window"] == 2


@pytest.mark.parametrize("window", [0, 1, 3, 7])
def test_valid_slot_count_identity(window):
    length = 7
    expected = sum(
        min(i + window, length) - max(i - window, 1) + 1
        for i in range(1, length + 1)
    )
    assert valid_slot_count(length, window) == expected


@pytest.fixture
def reference():
    samples = synth_generate(30, 6, 3, shift_range=(0, 1), seed=8)
    return split_dataset(samples, (0.6, 0.2, 0.2), seed=8)


def _run(condition, reference, seeds=(0, 1), **kwargs):
    return run_condition(
        condition,
        reference,
        SplitSpec(0.5, seed=8),
        tiny_model_config(),
        tiny_train_config(max_epochs=1),
        seeds,
        **kwargs,
    )


def test_run_condition_smoke(reference):
    report = _run(Condition.MM_ALIGN, reference)
    assert report.seeds == [0, 1]
    assert set(report.per_seed) >= {"mae", "mse"}
    assert all(
        len(values) == 2 and np.isfinite(values).all()
        for values in report.per_seed.values()
    )
    assert report.p_value is None


def test_run_condition_is_deterministic_across_workers(reference):
    serial = _run(Condition.ZERO_IMPUTE, reference)
    threaded = _run(Condition.ZERO_IMPUTE, reference, workers=2)
    assert serial.per_seed == threaded.per_seed


def test_run_condition_compares_against_a_reference(reference):
    lower = _run(Condition.LOWER_BOUND, reference)
    upper = _run(Condition.UPPER_BOUND, reference, compare_to=lower)
    assert upper.reference == "lb"
    assert 0.0 <= upper.p_value <= 1.0
    with pytest.raises(StatisticsError):
        _run(Condition.UPPER_BOUND, reference, (0, 2), compare_to=lower)
    with pytest.raises(ConfigurationError):
        _run(Condition.UPPER_BOUND, reference, ())


def test_window_sweep_rejects_bad_windows(reference):
    for windows in ([], [6], [-1]):
        with pytest.raises(ConfigurationError):
            window_sweep(
                reference,
                SplitSpec(0.5),
                tiny_model_config(),
                tiny_train_config(),
                windows,
            )


def test_singleton_window_sweep_is_run_condition(reference):
    sweep = window_sweep(
        reference,
        SplitSpec(0.5, seed=8),
        tiny_model_config(),
        tiny_train_config(max_epochs=1),
        [1],
        seeds=(0, 1),
    )
    direct = _run(Condition.MM_ALIGN, reference)
    assert sweep.windows == [1]
    assert sweep.reports[0].per_seed == direct.per_seed


@pytest.mark.slow
def test_upper_bound_beats_lower_bound_on_every_seed():
    samples = synth_generate(
        400, 12, 4, shift_range=(0, 2), mix_noise=0.0, label_noise=0.0, seed=0
    )
    reference = split_dataset(samples, seed=0)
    model_cfg = tiny_model_config(
        d_in1=4, d_in2=4, d_model=16, ffn_dim=32, max_len=16
    )
    train_cfg = tiny_train_config(
        window=2, batch_size=16, max_epochs=15, patience=5, eta_main=3e-3
    )
    spec = SplitSpec(0.5)
    seeds = (0, 1, 2, 3, 4)
    lower = run_condition(
        Condition.LOWER_BOUND, reference, spec, model_cfg, train_cfg, seeds
    )
    upper = run_condition(
        Condition.UPPER_BOUND, reference, spec, model_cfg, train_cfg, seeds
    )
    pairs = zip(upper.per_seed["mse"], lower.per_seed["mse"])
    assert all(upper_mse < lower_mse for upper_mse, lower_mse in pairs)


@pytest.mark.slow
def test_mm_align_sits_between_the_bounds():
    samples = synth_generate(2000, 20, 8, shift_range=(0, 3), seed=0)
    reference = split_dataset(samples, seed=0)
    model_cfg = tiny_model_config(
        d_in1=8, d_in2=8, d_model=16, ffn_dim=32, max_len=24
    )
    train_cfg = tiny_train_config(
        window=4, batch_size=32, max_epochs=20, patience=5, eta_main=3e-3
    )
    spec = SplitSpec(0.1)
    seeds = (0, 1, 2, 3, 4)
    runs = {
        condition: run_condition(
            condition, reference, spec, model_cfg, train_cfg, seeds
        )
        for condition in Condition
    }
    lower, upper, ours = (
        runs[c].mean["mse"]
        for c in (
            Condition.LOWER_BOUND,
            Condition.UPPER_BOUND,
            Condition.MM_ALIGN,
        )
    )
    assert upper < ours < lower
    assert (lower - ours) >= 0.25 * (lower - upper)
    zero = runs[Condition.ZERO_IMPUTE].per_seed["mse"]
    ours_per_seed = runs[Condition.MM_ALIGN].per_seed["mse"]
    wins = sum(a < b for a, b in zip(ours_per_seed, zero))
    assert wins >= 4


def test_shift_recovery_peaks_at_the_correlation_radius():
    samples = synth_generate(
        200,
        32,
        8,
        shift_range=(0, 6),
        identity_mixing=True,
        shift_cue=0.0,
        seed=0,
    )
    windows = [2, 4, 6, 8, 12, 16]
    recovery = [shift_recovery(samples, w, 0.1) for w in windows]
    reports = [_report(Condition.MM_ALIGN, [1.0, 1.0]) for _ in windows]
    sweep = SweepReport("mae", windows, reports, recovery)
    assert 4 <= sweep.best_recovery_window <= 8
    assert sweep.best_recovery_window != 16
    assert recovery[0] < recovery[1] < recovery[2]
    # a wider band only adds candidates for every row
    assert recovery[5] <= recovery[4] <= recovery[3] <= recovery[2]
    assert sweep.to_dict()["shift_recovery"][2] == {
        "window": 6,
        "fraction": recovery[2],
    }


def test_shift_recovery_needs_known_offsets(tiny_model, tiny_split):
    unknown = [replace(s, offset=None) for s in tiny_split.test]
    with pytest.raises(StatisticsError):
        shift_recovery(unknown, 1, 0.1)
    with pytest.raises(StatisticsError):
        fitter_shift_recovery(tiny_model, unknown)
    assert 0.0 <= fitter_shift_recovery(tiny_model, tiny_split.test) <= 1.0


def _fitter_recovery_after_training(cfg, train, held_out) -> float:
    model = build_model(
        tiny_model_config(d_in1=8, d_in2=8, max_len=17), cfg
    )
    trainer = Trainer(model, cfg)
    trainer.warm_up(train)
    for _ in range(10):
        trainer.train_epoch(train, [])
    return fitter_shift_recovery(model, held_out)


@pytest.mark.slow
def test_ablations_do_not_beat_the_full_model():
    samples = synth_generate(
        320, 16, 8, shift_range=(2, 2), mix_noise=0.0, seed=0
    )
    train, held_out = samples[:256], samples[256:]
    base = dict(
        window=3,
        mu=0.05,
        batch_size=32,
        eta_main=1e-3,
        eta_fit=2e-2,
        target_features=TargetFeatures.INPUT,
        column_relaxation=0.0,
    )
    full, random_fitter, no_con = [], [], []
    for seed in range(5):
        for results, extra in (
            (full, {}),
            (random_fitter, {"ablation": Ablation.RANDOM_FITTER}),
            (no_con, {"lambda_con": 0.0}),
        ):
            cfg = tiny_train_config(seed=seed, **base, **extra)
            results.append(
                _fitter_recovery_after_training(cfg, train, held_out)
            )
    assert sum(r < f for r, f in zip(random_fitter, full)) >= 4
    assert np.mean(no_con) <= np.mean(full) + 0.02
