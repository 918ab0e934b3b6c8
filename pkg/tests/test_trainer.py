from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from aglp._config import ModelConfig, TrainerConfig, apply_preset
from aglp._data import sample_batch
from aglp._errors import ConfigurationError, ContractError, TrainingAborted
from aglp._gradcheck import gradient_error, numerical_parameter_gradient
from aglp._prototypes import compute_prototypes
from aglp._tensor import Tape, backward, parameter
from aglp._trainer import (
    TERMS,
    Sgd,
    evaluate,
    init_state,
    learning_rate,
    objective,
    refresh_pseudo_centers,
    report_from_predictions,
    run,
    train_step,
    weighted_total,
)


def test_learning_rate_schedule():
    config = TrainerConfig(learning_rate=0.1, lr_gamma=0.01, lr_power=0.5)
    assert learning_rate(config, 0) == 0.1
    assert learning_rate(config, 300) == pytest.approx(0.1 / 2.0)


def test_sgd_momentum_and_weight_decay():
    weight = parameter([[1.0]])
    optimizer = Sgd(momentum=0.5, weight_decay=0.1)
    with Tape():
        loss = weight * weight
    grads = backward(loss)
    optimizer.step({"w": weight}, grads, 0.1)
    assert weight.values[0, 0] == pytest.approx(1.0 - 0.1 * 2.1)
    optimizer.step({"w": weight}, grads, 0.1)
    # second step reuses the stored gradient, the velocity carries half the first
    expected = 0.79 - 0.1 * (0.5 * 2.1 + 2.0 + 0.1 * 0.79)
    assert weight.values[0, 0] == pytest.approx(expected)


def test_baseline_total_is_source_plus_labeled(small_dataset, tiny_model_config, quick_trainer):
    config = dataclasses.replace(apply_preset(quick_trainer, "st"), beta=0.0)
    state = init_state(config, tiny_model_config, small_dataset)
    batch = sample_batch(small_dataset, 6, 6, 6, state.batch_rng)
    _, report = train_step(state, batch)
    assert report.aac == report.pl == report.consistency == report.centroid == 0.0
    assert report.total == report.source + report.labeled


def test_reports_account_for_every_term(small_dataset, tiny_model_config, quick_trainer):
    config = dataclasses.replace(quick_trainer, beta=0.5)
    result = run(config, small_dataset, tiny_model_config)
    assert len(result.reports) == config.steps
    for report in result.reports:
        parts = (
            report.source
            + report.labeled
            + report.aac
            + report.pl
            + report.consistency
            + 0.5 * report.centroid
        )
        assert abs(report.total - parts) <= 1e-12
        assert report.unlabeled == pytest.approx(report.aac + report.pl + report.consistency)


def test_identical_seeds_give_identical_reports(small_dataset, tiny_model_config, quick_trainer):
    first = run(quick_trainer, small_dataset, tiny_model_config)
    second = run(quick_trainer, small_dataset, tiny_model_config)
    assert first.reports == second.reports
    assert first.evaluations == second.evaluations


def test_total_gradient_matches_finite_differences(small_dataset, tiny_model_config):
    # alpha = 0 keeps the adapted labels independent of the weights
    config = TrainerConfig(
        steps=10, warmup=0, alpha=0.0, tau=0.05, topk=3, update_interval=5, seed=1
    )
    state = init_state(config, tiny_model_config, small_dataset)
    refresh_pseudo_centers(state, small_dataset)
    state.step = 3
    seed_batch = sample_batch(small_dataset, 6, 6, 6, np.random.default_rng(4))
    _, _, centroids = objective(state, seed_batch)
    batch = sample_batch(small_dataset, 2, 2, 2, np.random.default_rng(5))
    state.centroids = centroids.detached()

    with Tape():
        total, terms, _ = objective(state, batch)
    assert all(terms[name].item() != 0.0 for name in ("aac", "pl", "consistency", "centroid"))
    analytic = backward(total)
    parameters = state.model.trainable_parameters()
    numeric = numerical_parameter_gradient(lambda: objective(state, batch)[0].item(), parameters)
    for name, tensor in parameters.items():
        assert gradient_error(analytic[tensor], numeric[name]) < 1e-4, name


def test_adaptation_starts_at_the_last_step(small_dataset, tiny_model_config, quick_trainer):
    config = dataclasses.replace(quick_trainer, steps=6, warmup=5, eval_every=100)
    seen = []
    run(
        config,
        small_dataset,
        tiny_model_config,
        callback=lambda state, report, _: seen.append(
            (report.step, report.learning_rate, state.pseudo_centers is not None)
        ),
    )
    assert [has_centers for _, _, has_centers in seen] == [False] * 5 + [True]
    assert seen[4][1] < config.learning_rate
    assert seen[5][1] == config.learning_rate


def test_without_structure_alignment_graph_weights_stay_put(
    small_dataset, tiny_model_config, quick_trainer
):
    config = dataclasses.replace(quick_trainer, steps=100, use_saa=False, eval_every=100)
    state = init_state(config, tiny_model_config, small_dataset)
    before = state.model.snapshot()
    result = run(config, small_dataset, tiny_model_config, state=state)
    after = result.state.model.snapshot()
    for name, values in before.items():
        if name.startswith(("dsa.", "gcn.")):
            np.testing.assert_array_equal(after[name], values)
    assert not np.array_equal(after["classifier.weight"], before["classifier.weight"])


def test_without_centroid_alignment_the_term_is_zero(
    small_dataset, tiny_model_config, quick_trainer
):
    config = dataclasses.replace(quick_trainer, use_ca=False)
    result = run(config, small_dataset, tiny_model_config)
    assert all(report.centroid == 0.0 for report in result.reports)
    assert result.state.centroids.source == {}


def test_non_finite_loss_names_the_term(small_dataset, tiny_model_config, quick_trainer):
    state = init_state(quick_trainer, tiny_model_config, small_dataset)
    state.model.classifier.dense.bias.values[...] = np.nan
    batch = sample_batch(small_dataset, 6, 6, 6, state.batch_rng)
    with pytest.raises(TrainingAborted) as error:
        train_step(state, batch)
    assert error.value.step == 0
    assert error.value.term == TERMS[0]


def test_configuration_checked_before_training(small_dataset, tiny_model_config, quick_trainer):
    with pytest.raises(ConfigurationError):
        run(dataclasses.replace(quick_trainer, warmup=30), small_dataset, tiny_model_config)
    with pytest.raises(ConfigurationError):
        run(dataclasses.replace(quick_trainer, batch_labeled=13), small_dataset, tiny_model_config)


def test_labeled_center_source(small_dataset, tiny_model_config, quick_trainer):
    config = dataclasses.replace(quick_trainer, center_source="labeled")
    state = init_state(config, tiny_model_config, small_dataset)
    centers = refresh_pseudo_centers(state, small_dataset)
    features, _ = state.model.embed(small_dataset.labeled_x)
    expected = compute_prototypes(features, small_dataset.labeled_y, 4)
    np.testing.assert_allclose(centers.centers, expected.centers, atol=1e-12)


def test_weighted_total_scales_only_the_centroid_term():
    terms = dict(source=1.0, labeled=2.0, aac=3.0, pl=4.0, consistency=5.0, centroid=6.0)
    assert weighted_total(terms, 0.5) == 18.0


def test_perfect_predictions():
    labels = np.array([0, 1, 2, 2, 1])
    report = report_from_predictions(labels, labels, 3)
    assert report.accuracy == 1.0
    np.testing.assert_array_equal(report.confusion, np.diag([1, 2, 2]))


def test_constant_predictor_on_balanced_classes():
    labels = np.repeat(np.arange(4), 5)
    report = report_from_predictions(np.zeros(20, dtype=int), labels, 4)
    assert report.accuracy == 0.25
    np.testing.assert_array_equal(report.confusion.sum(axis=1), [5, 5, 5, 5])
    assert report.per_class.tolist() == [1.0, 0.0, 0.0, 0.0]


def test_absent_class_has_no_accuracy():
    report = report_from_predictions(np.array([0, 1]), np.array([0, 1]), 3)
    assert np.isnan(report.per_class[2])


def test_empty_evaluation_set(small_dataset, tiny_model_config, quick_trainer):
    state = init_state(quick_trainer, tiny_model_config, small_dataset)
    with pytest.raises(ContractError):
        evaluate(state.model, np.zeros((0, 2)), np.zeros(0, dtype=int))


def test_evaluation_ignores_dropout(small_dataset, quick_trainer):
    state = init_state(quick_trainer, ModelConfig(dropout=0.5), small_dataset)
    first = evaluate(state.model, small_dataset.test_x, small_dataset.test_y)
    second = evaluate(state.model, small_dataset.test_x, small_dataset.test_y)
    np.testing.assert_array_equal(first.confusion, second.confusion)
    assert first.confusion.sum() == len(small_dataset.test_y)


def test_centroid_term_is_averaged_over_dimension_and_classes(small_dataset, tiny_model_config):
    batch = sample_batch(small_dataset, 20, 12, 20, np.random.default_rng(2))
    terms = {}
    for normalize in (True, False):
        config = TrainerConfig(steps=10, warmup=5, topk=3, centroid_normalize=normalize, seed=1)
        state = init_state(config, tiny_model_config, small_dataset)
        _, step_terms, centroids = objective(state, batch)
        terms[normalize] = step_terms["centroid"].item()
    common = centroids.common_classes()
    assert common
    assert centroids.dim == state.model.fused_dim
    assert terms[False] > 0.0
    assert terms[True] == pytest.approx(terms[False] / (centroids.dim * len(common)))


def test_default_sizes_keep_features_alive(small_dataset, quick_trainer):
    config = dataclasses.replace(quick_trainer, steps=40, eval_every=40, checkpoint_every=40)
    result = run(config, small_dataset, ModelConfig(dropout=0.0))
    assert all(np.isfinite(report.total) for report in result.reports)
    assert result.reports[-1].centroid < 10.0
    features = result.state.model.extract(small_dataset.test_x).values
    assert np.ptp(features, axis=0).max() > 0.0


def test_topk_beyond_the_feature_width(small_dataset, tiny_model_config, quick_trainer):
    config = dataclasses.replace(quick_trainer, topk=tiny_model_config.feature_dim + 1)
    with pytest.raises(ConfigurationError, match="topk"):
        run(config, small_dataset, tiny_model_config)
