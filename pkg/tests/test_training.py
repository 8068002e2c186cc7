import numpy as np
import pytest

from mm_align.common import ConfigurationError, DataError, NonFiniteLossError
from mm_align.data import (
    SplitDataset,
    SplitSpec,
    apply_missing,
    stack,
    synth_generate,
)
from mm_align.enums import Ablation, Condition, TargetFeatures
from mm_align.model import ModelParams
from mm_align.training import (
    Trainer,
    build_model,
    fit,
    make_batches,
    predict,
    validation_metric,
)
from tests.utils_for_tests import tiny_model_config, tiny_train_config


@pytest.fixture
def masked_split(tiny_split) -> SplitDataset:
    return apply_missing(tiny_split, SplitSpec(0.5, seed=3))


def _complete(dataset: SplitDataset):
    return [s for s in dataset.train if not s.is_masked]


def _trainer(condition=Condition.MM_ALIGN, **kwargs) -> Trainer:
    cfg = tiny_train_config(**kwargs)
    return Trainer(build_model(tiny_model_config(), cfg), cfg, condition)


def test_make_batches_groups_equal_lengths(tiny_split, rng):
    samples = tiny_split.train + [
        s for s in tiny_split.val if s.length == 6
    ]
    batches = make_batches(samples, 5, rng)
    seen = [s.id for batch in batches for s in batch]
    assert sorted(seen) == sorted(s.id for s in samples)
    assert all(len({s.length for s in batch}) == 1 for batch in batches)
    assert all(1 <= len(batch) <= 5 for batch in batches)


def test_zero_warm_up_epochs_leave_the_model_unchanged(masked_split):
    trainer = _trainer(warm_up_epochs=0)
    before = trainer.params.digest()
    assert trainer.warm_up(_complete(masked_split)) == []
    assert trainer.params.digest() == before


def test_warm_up_needs_complete_samples():
    with pytest.raises(DataError):
        _trainer().warm_up([])


def test_warm_up_never_touches_the_fitter(masked_split):
    trainer = _trainer()
    psi = trainer.params.digest("psi")
    theta_out = trainer.params.digest("theta_out")
    (report,) = trainer.warm_up(_complete(masked_split))
    assert report.phase == "warm-up"
    assert report.fit_steps == 0
    assert trainer.params.digest("psi") == psi
    assert trainer.params.digest("theta_out") != theta_out


def test_fitter_step_leaves_the_backbone_bit_identical(masked_split):
    trainer = _trainer()
    x1, x2, _ = stack(_complete(masked_split)[:4])
    _, cache = trainer.model.forward_complete(x1, x2)
    theta = {k: v.copy() for k, v in trainer.params.theta.items()}
    psi = trainer.params.digest("psi")
    loss = trainer.fitter_step(cache.z1, cache.z2)
    assert loss >= 0
    for name, value in trainer.params.theta.items():
        assert np.array_equal(value, theta[name])
    assert trainer.params.digest("psi") != psi


def test_missing_step_leaves_the_fitter_unchanged(masked_split):
    trainer = _trainer()
    missing = [s for s in masked_split.train if s.is_masked][:4]
    x1, _, y = stack(missing)
    psi = trainer.params.digest("psi")
    trainer.missing_step(x1, y)
    assert trainer.params.digest("psi") == psi


def test_full_surviving_rate_has_no_missing_steps(tiny_split):
    dataset = apply_missing(tiny_split, SplitSpec(1.0, seed=3))
    cfg = tiny_train_config()
    result = fit(build_model(tiny_model_config(), cfg), dataset, cfg)
    train_reports = [r for r in result.log if r.phase == "train"]
    assert train_reports
    assert all(r.missing_steps == 0 for r in train_reports)
    assert all(r.complete_steps > 0 for r in train_reports)


def test_zero_patience_runs_exactly_one_epoch(masked_split):
    cfg = tiny_train_config(patience=0, max_epochs=5)
    result = fit(build_model(tiny_model_config(), cfg), masked_split, cfg)
    assert [r.phase for r in result.log] == ["warm-up", "train"]
    assert result.best_epoch == result.log[-1].epoch


def test_training_is_deterministic(masked_split):
    cfg = tiny_train_config(seed=5)
    runs = [
        fit(build_model(tiny_model_config(), cfg), masked_split, cfg)
        for _ in range(2)
    ]
    first, second = (
        [r.deterministic_fields() for r in run.log] for run in runs
    )
    assert first == second
    assert runs[0].best_metric == runs[1].best_metric


def test_model_ends_with_best_params(masked_split):
    cfg = tiny_train_config(max_epochs=3, patience=3)
    model = build_model(tiny_model_config(), cfg)
    result = fit(model, masked_split, cfg)
    assert result.best_metric == validation_metric(model, masked_split.val)
    for name, value in model.named_params():
        assert np.array_equal(value, result.best_params[name])


def test_zero_lambda_injects_no_contrastive_gradient(masked_split):
    cfg = tiny_train_config(lambda_con=0.0)
    result = fit(build_model(tiny_model_config(), cfg), masked_split, cfg)
    assert all(r.con_grad_norm == 0.0 for r in result.log)
    assert any(r.con_loss > 0 for r in result.log)


def test_no_con_ablation_matches_zero_lambda(masked_split):
    cfg = tiny_train_config(ablation=Ablation.NO_CON)
    result = fit(build_model(tiny_model_config(), cfg), masked_split, cfg)
    assert all(r.con_grad_norm == 0.0 for r in result.log)


def test_random_fitter_ablation_never_trains_the_fitter(masked_split):
    cfg = tiny_train_config(ablation=Ablation.RANDOM_FITTER)
    model = build_model(tiny_model_config(), cfg)
    psi = ModelParams.of(model).digest("psi")
    result = fit(model, masked_split, cfg)
    assert all(r.fit_steps == 0 for r in result.log)
    assert ModelParams.of(model).digest("psi") == psi


def test_split_loop_ablation_still_fits(masked_split):
    trainer = _trainer(ablation=Ablation.SPLIT_LOOP)
    missing = [s for s in masked_split.train if s.is_masked]
    report = trainer.train_epoch(_complete(masked_split), missing)
    assert report.fit_steps == report.complete_steps > 0
    assert report.missing_steps > 0


@pytest.mark.parametrize(
    "condition", [Condition.LOWER_BOUND, Condition.ZERO_IMPUTE]
)
def test_baseline_conditions_never_train_the_fitter(masked_split, condition):
    trainer = _trainer(condition)
    psi = trainer.params.digest("psi")
    result = trainer.fit(masked_split)
    assert all(r.fit_steps == 0 for r in result.log)
    assert trainer.params.digest("psi") == psi
    if condition is Condition.LOWER_BOUND:
        assert all(r.phase == "train" for r in result.log)
        assert all(r.complete_steps == 0 for r in result.log)


def test_non_finite_loss_reports_where_it_happened(masked_split):
    trainer = _trainer()
    x1, x2, y = stack(_complete(masked_split)[:2])
    y = np.full_like(y, np.nan, dtype=np.float64)
    trainer._where = ("complete", 7)
    with pytest.raises(NonFiniteLossError) as exc_info:
        trainer.complete_step(x1, x2, y, fit=False)
    assert exc_info.value.diagnostics["phase"] == "complete"
    assert exc_info.value.diagnostics["batch"] == 7


def test_fit_needs_validation_samples(masked_split):
    cfg = tiny_train_config()
    empty_val = SplitDataset(masked_split.train, [], masked_split.test)
    with pytest.raises(DataError):
        fit(build_model(tiny_model_config(), cfg), empty_val, cfg)


def test_predict_returns_one_value_per_sample(tiny_model, masked_split):
    samples = masked_split.test + _complete(masked_split)[:3]
    for condition in Condition:
        predictions = predict(tiny_model, samples, condition)
        assert predictions.shape == (len(samples),)
        assert np.isfinite(predictions).all()
    assert predict(tiny_model, []).shape == (0,)


def test_warm_up_loss_decreases_for_most_seeds():
    decreased = 0
    for seed in range(5):
        samples = synth_generate(64, 6, 3, shift_range=(0, 1), seed=seed)
        trainer = _trainer(seed=seed, warm_up_epochs=4)
        reports = trainer.warm_up(samples)
        decreased += reports[-1].main_loss < reports[0].main_loss
    assert decreased >= 3


def _input_target_trainer(**kwargs) -> Trainer:
    cfg = tiny_train_config(
        window=3,
        mu=0.05,
        target_features=TargetFeatures.INPUT,
        column_relaxation=0.0,
        **kwargs,
    )
    model_cfg = tiny_model_config(max_len=16)
    return Trainer(build_model(model_cfg, cfg), cfg)


def test_input_space_targets_peak_at_the_shift():
    samples = synth_generate(
        6, 12, 3, shift_range=(2, 2), mix_noise=0.0, identity_mixing=True
    )
    trainer = _input_target_trainer()
    trainer.victim_rotation = np.eye(3)
    x1, x2, _ = stack(samples)
    _, cache = trainer.model.forward_complete(x1, x2)
    plan = trainer.alignment_targets(cache.z1, cache.z2, x1, x2)
    assert np.allclose(plan.band.sum(axis=-1), 1.0)
    # rows whose shifted partner is inside the sequence
    assert np.all(np.argmax(plan.band[:, :10], axis=-1) == 3 + 2)
    with pytest.raises(ConfigurationError):
        trainer.fitter_step(cache.z1, cache.z2)


def test_prepare_targets_fits_an_orthogonal_rotation():
    samples = synth_generate(10, 12, 3, shift_range=(0, 2), seed=4)
    trainer = _input_target_trainer()
    trainer.prepare_targets(samples)
    rotation = trainer.victim_rotation
    assert rotation is not None
    assert np.allclose(rotation @ rotation.T, np.eye(3), atol=1e-10)
    shared = _trainer()
    shared.prepare_targets(samples)
    assert shared.victim_rotation is None


@pytest.mark.slow
def test_fitter_recovers_the_shift_after_training():
    length, window, shift = 16, 3, 2
    samples = synth_generate(
        256, length, 8, shift_range=(shift, shift), mix_noise=0.0, seed=0
    )
    cfg = tiny_train_config(
        window=window,
        mu=0.05,
        batch_size=32,
        eta_main=1e-3,
        eta_fit=2e-2,
        target_features=TargetFeatures.INPUT,
        column_relaxation=0.0,
    )
    model = build_model(tiny_model_config(d_in1=8, d_in2=8, max_len=17), cfg)
    trainer = Trainer(model, cfg)
    trainer.warm_up(samples)
    reports = [trainer.train_epoch(samples, []) for _ in range(10)]
    assert reports[-1].fit_loss <= 0.5 * reports[0].fit_loss

    x1, x2, _ = stack(samples)
    _, cache = model.forward_complete(x1, x2)
    interior = slice(window, length - window)
    targets = trainer.alignment_targets(cache.z1, cache.z2, x1, x2)
    target_peaks = np.argmax(targets.band[:, interior], axis=-1)
    assert np.mean(target_peaks == window + shift) >= 0.95
    probs, _ = model.fitter.forward(cache.z1[:, 1:])
    peaks = np.argmax(probs[:, interior], axis=-1)
    assert np.mean(peaks == window + shift) >= 0.9
