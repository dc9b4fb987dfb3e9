"""Tests for model assembly, the forward map, loss, metrics, and training."""

import warnings

import numpy as np
import pytest

from flowcast.attention import AlphaCapture
from flowcast.data import prepare_dataset, ring_edge_lines, synthetic_series
from flowcast.errors import ContractError, NumericError
from flowcast.model import (
    ModelConfig,
    build_model,
    evaluate,
    forward,
    forward_arrays,
    ha_baseline,
    load_params,
    masked_mae_loss,
    metrics_from_arrays,
    predict_windows,
    train,
)
from flowcast.stgraph import load_spatial_graph
from flowcast.tensor import Param, backward, matmul

from oracles import metrics_oracle


def _config(**overrides):
    base = dict(
        n_nodes=4,
        t_in=4,
        t_out=2,
        channels=1,
        dim=8,
        spe_modes=2,
        gamma=24,
        n_blocks=1,
        n_heads=2,
        n_subsets=2,
        seed=7,
        learning_rate=0.01,
        batch_size=4,
        epochs=2,
    )
    base.update(overrides)
    return ModelConfig(**base)


def _build(**overrides):
    graph = load_spatial_graph(ring_edge_lines(4), symmetrize=True)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return build_model(_config(**overrides), graph)


def _dataset(n_steps=60, **kwargs):
    series = synthetic_series(4, n_steps, interval_min=60, seed=3, noise=1.0)
    return prepare_dataset(series, t_in=4, t_out=2, **kwargs)


# ---------------------------------------------------------------------------
# configuration and assembly
# ---------------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ContractError, match="divisible"):
        _config(dim=6, n_heads=4).validate()
    with pytest.raises(ContractError, match="spe_modes"):
        _config(spe_modes=4).validate()
    with pytest.raises(ContractError, match="n_subsets"):
        _config(n_subsets=5).validate()
    with pytest.raises(ContractError, match="learning_rate"):
        _config(learning_rate=0.0).validate()
    with pytest.raises(ContractError, match="epochs"):
        _config(epochs=-1).validate()
    with pytest.raises(ContractError, match="clip_norm"):
        _config(clip_norm=-1.0).validate()
    with pytest.raises(ContractError, match="t_out"):
        _config(t_out=0).validate()
    _config().validate()


def test_build_rejects_node_count_mismatch():
    graph = load_spatial_graph(ring_edge_lines(5), symmetrize=True)
    with pytest.raises(ContractError, match="nodes"):
        build_model(_config(), graph)


def test_build_sets_tau_and_partitions():
    model = _build()
    assert model.config.tau == model.p1.tau
    assert model.p1.tau >= 4 // 2
    assert model.p2.tau >= model.p1.tau
    assert model.p1.n_elements == 16
    assert model.unified.n_elements == 16


def test_build_is_deterministic():
    a, b = _build(), _build()
    for pa, pb in zip(a.params(), b.params()):
        assert pa.name == pb.name
        np.testing.assert_array_equal(pa.data, pb.data)
    other = _build(seed=8)
    changed = any(
        pa.shape == po.shape and np.any(pa.data != po.data)
        for pa, po in zip(a.params(), other.params())
    )
    assert changed


def test_param_dict_rejects_duplicates():
    model = _build()
    table = model.param_dict()
    assert "embed.in.w" in table
    assert "adapter.w_time" in table
    model.adapter.b_out.name = "adapter.w_time"
    with pytest.raises(ContractError, match="duplicate"):
        model.param_dict()


def test_build_with_explicit_schemes_checks_size():
    model = _build()
    graph = load_spatial_graph(ring_edge_lines(4), symmetrize=True)
    bad = _config(t_in=5)
    with pytest.raises(ContractError, match="elements"):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            build_model(bad, graph, schemes=(model.p1, model.p2))


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def test_forward_shapes():
    model = _build()
    rng = np.random.default_rng(0)
    values = rng.normal(size=(4, 4, 1))
    day = np.zeros(4, dtype=np.int64)
    step = np.arange(4)
    out = forward_arrays(model, values, day, step)
    assert out.shape == (4, 2, 1)

    batched = forward_arrays(model, np.stack([values] * 3), np.stack([day] * 3), np.stack([step] * 3))
    assert batched.shape == (3, 4, 2, 1)
    for b in range(3):
        assert np.max(np.abs(batched.data[b] - out.data)) < 1e-12


def test_forward_window_sample():
    model = _build()
    ds = _dataset()
    sample = ds.splits["train"][0]
    a = forward(model, sample)
    b = forward_arrays(model, sample.values_norm, sample.day, sample.step)
    np.testing.assert_array_equal(a.data, b.data)


def test_forward_captures_attention():
    model = _build()
    rng = np.random.default_rng(1)
    captures = {(0, 0): AlphaCapture(), (0, 1): AlphaCapture()}
    forward_arrays(
        model, rng.normal(size=(4, 4, 1)), np.zeros(4, dtype=np.int64), np.arange(4), captures
    )
    for cap in captures.values():
        assert set(cap.by_subset) == {0, 1}
        for alphas in cap.by_subset.values():
            assert len(alphas) == 2  # heads
            for alpha in alphas:
                np.testing.assert_allclose(alpha.sum(axis=-1), 1.0, atol=1e-9)


# ---------------------------------------------------------------------------
# loss and metrics
# ---------------------------------------------------------------------------


def test_masked_loss_hand_value():
    pred = Param(np.array([[1.0, 2.0], [3.0, 4.0]]), "pred")
    truth = np.array([[2.0, 0.0], [1.0, 4.0]])
    loss = masked_mae_loss(pred, truth)
    assert loss.item() == pytest.approx((1.0 + 2.0 + 0.0) / 3, abs=1e-12)


def test_masked_loss_explicit_mask():
    pred = Param(np.array([[1.0, 2.0], [3.0, 4.0]]), "pred")
    truth = np.array([[2.0, 0.0], [1.0, 4.0]])
    mask = np.array([[True, True], [False, False]])
    loss = masked_mae_loss(pred, truth, mask)
    assert loss.item() == pytest.approx((1.0 + 2.0) / 2, abs=1e-12)


def test_masked_loss_all_masked_is_zero_with_zero_grads():
    pred = Param(np.array([[1.0, -2.0]]), "pred")
    loss = masked_mae_loss(pred, np.zeros((1, 2)))
    assert loss.item() == 0.0
    backward(loss)
    np.testing.assert_array_equal(pred.grad, np.zeros((1, 2)))


def test_masked_loss_shape_errors():
    pred = Param(np.zeros((2, 2)), "pred")
    with pytest.raises(ContractError):
        masked_mae_loss(pred, np.zeros((2, 3)))
    with pytest.raises(ContractError):
        masked_mae_loss(pred, np.zeros((2, 2)), np.ones((1, 2), dtype=bool))


def test_metrics_match_oracle():
    rng = np.random.default_rng(6)
    for _ in range(10):
        truth = rng.normal(50.0, 10.0, size=(5, 4, 2))
        truth[rng.random(truth.shape) < 0.2] = 0.0
        if not np.any(truth != 0.0):
            continue
        pred = truth + rng.normal(0.0, 3.0, size=truth.shape)
        report = metrics_from_arrays(pred, truth)
        mae, mape, rmse = metrics_oracle(pred, truth)
        assert report.mae == pytest.approx(mae, abs=1e-9)
        assert report.mape_percent == pytest.approx(mape, abs=1e-9)
        assert report.rmse == pytest.approx(rmse, abs=1e-9)
        assert report.mae <= report.rmse + 1e-12
        assert report.evaluated_points == int(np.sum(truth != 0.0))
        assert report.excluded_zeros == truth.size - report.evaluated_points


def test_metrics_zero_exclusion_value():
    pred = np.array([1.0, 5.0, 9.0])
    truth = np.array([2.0, 0.0, 10.0])
    report = metrics_from_arrays(pred, truth)
    assert report.mae == pytest.approx(1.0)
    assert report.mape_percent == pytest.approx((0.5 + 0.1) / 2 * 100)
    assert report.rmse == pytest.approx(1.0)
    assert report.excluded_zeros == 1


def test_metrics_all_zero_truth():
    with pytest.raises(ContractError, match="nonzero"):
        metrics_from_arrays(np.ones(3), np.zeros(3))
    with pytest.raises(ContractError, match="shape"):
        metrics_from_arrays(np.ones(3), np.ones(4))


# ---------------------------------------------------------------------------
# prediction and evaluation
# ---------------------------------------------------------------------------


def test_predict_windows_denormalizes():
    model = _build()
    ds = _dataset()
    samples = ds.splits["val"]
    preds = predict_windows(model, samples, ds.stats)
    assert preds.shape == (len(samples), 4, 2, 1)
    one = forward(model, samples[0]).data
    np.testing.assert_allclose(preds[0], ds.stats.invert(one), atol=1e-12)


def test_predict_windows_chunking_consistent():
    model = _build()
    ds = _dataset()
    samples = ds.splits["train"][:7]
    a = predict_windows(model, samples, ds.stats, batch_size=2)
    b = predict_windows(model, samples, ds.stats, batch_size=32)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_predict_windows_empty():
    model = _build()
    ds = _dataset()
    with pytest.raises(ContractError):
        predict_windows(model, [], ds.stats)


def test_evaluate_horizon_slicing():
    model = _build()
    ds = _dataset()
    samples = ds.splits["val"]
    preds = predict_windows(model, samples, ds.stats)
    truth = np.stack([s.target_raw for s in samples], axis=0)

    full = evaluate(model, samples, ds.stats)
    want = metrics_from_arrays(preds, truth)
    assert full.mae == pytest.approx(want.mae, abs=1e-12)

    step2 = evaluate(model, samples, ds.stats, horizon=2)
    want2 = metrics_from_arrays(preds[:, :, 1, :], truth[:, :, 1, :])
    assert step2.mae == pytest.approx(want2.mae, abs=1e-12)
    assert step2.rmse == pytest.approx(want2.rmse, abs=1e-12)


def test_evaluate_errors():
    model = _build()
    ds = _dataset()
    with pytest.raises(ContractError, match="horizon"):
        evaluate(model, ds.splits["val"], ds.stats, horizon=3)
    with pytest.raises(ContractError, match="horizon"):
        evaluate(model, ds.splits["val"], ds.stats, horizon=0)
    with pytest.raises(ContractError, match="empty"):
        evaluate(model, [], ds.stats)


# ---------------------------------------------------------------------------
# historical average
# ---------------------------------------------------------------------------


def test_ha_hand_example():
    values = np.arange(12, dtype=np.float64)[:, None, None] * np.ones((12, 2, 1))
    out = ha_baseline(values, steps_per_week=4, targets=[4, 6, 9])
    np.testing.assert_allclose(out[0], 0.0)  # prior weeks: step 0
    np.testing.assert_allclose(out[1], 2.0)  # step 2
    np.testing.assert_allclose(out[2], 3.0)  # mean of steps 5 and 1


def test_ha_exact_on_periodic_series():
    period = 6
    pattern = np.array([3.0, 7.0, 1.0, 9.0, 4.0, 8.0])
    steps = 4 * period
    values = np.tile(pattern, 4)[:, None, None] * np.ones((steps, 3, 2))
    targets = list(range(period, steps))
    out = ha_baseline(values, period, targets)
    np.testing.assert_array_equal(out, values[targets])


def test_ha_errors():
    values = np.ones((10, 2, 1))
    with pytest.raises(ContractError, match="prior week"):
        ha_baseline(values, 4, [3])
    with pytest.raises(ContractError, match="outside"):
        ha_baseline(values, 4, [10])
    with pytest.raises(ContractError, match="outside"):
        ha_baseline(values, 4, [-1])


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def test_train_two_epochs_and_trace():
    model = _build()
    ds = _dataset()
    result = train(model, ds)
    assert [row.epoch for row in result.trace] == [1, 2]
    assert result.epochs_completed == 2
    assert model.norm_stats is ds.stats
    for row in result.trace:
        assert np.isfinite(row.train_loss)
        assert np.isfinite(row.val_mae)


def test_train_is_bit_deterministic():
    results = []
    for _ in range(2):
        model = _build()
        result = train(model, _dataset())
        results.append((result, {p.name: p.data.copy() for p in model.params()}))
    (ra, pa), (rb, pb) = results
    assert [r.to_csv() for r in ra.trace] == [r.to_csv() for r in rb.trace]
    for name in pa:
        np.testing.assert_array_equal(pa[name], pb[name])


def test_train_tracks_best_validation():
    model = _build(epochs=4)
    ds = _dataset(60)
    result = train(model, ds)
    maes = [row.val_mae for row in result.trace]
    assert result.best_val_mae == pytest.approx(min(maes))
    assert result.best_epoch == int(np.argmin(maes)) + 1

    load_params(model, result.best_params)
    report = evaluate(model, ds.splits["val"], ds.stats)
    assert report.mae == pytest.approx(result.best_val_mae, abs=1e-12)


def test_train_empty_validation_split():
    model = _build()
    ds = _dataset(ratios=(8.0, 0.0, 2.0))
    assert ds.splits["val"] == []
    result = train(model, ds)
    for row in result.trace:
        assert np.isnan(row.val_mae) and np.isnan(row.val_mape) and np.isnan(row.val_rmse)
    for p in model.params():
        np.testing.assert_array_equal(result.best_params[p.name], p.data)


def test_train_zero_epochs_keeps_initial_params():
    model = _build(epochs=0)
    initial = {p.name: p.data.copy() for p in model.params()}
    result = train(model, _dataset())
    assert result.trace == []
    assert result.epochs_completed == 0
    for p in model.params():
        np.testing.assert_array_equal(p.data, initial[p.name])


def test_train_requires_windows():
    model = _build()
    ds = _dataset()
    ds.splits["train"] = []
    with pytest.raises(ContractError, match="train split"):
        train(model, ds)


def test_train_raises_on_non_finite_loss():
    model = _build()
    model.embedding.w_in.data[:] = np.nan
    with pytest.raises(NumericError, match="non-finite"):
        train(model, _dataset())


def test_train_resume_continues_epoch_numbers():
    model = _build(epochs=4)
    ds = _dataset()
    model.config.epochs = 2
    first = train(model, ds)
    assert [row.epoch for row in first.trace] == [1, 2]
    model.config.epochs = 4
    second = train(model, ds, start_epoch=2)
    assert [row.epoch for row in second.trace] == [3, 4]


def test_train_decreases_loss_on_easy_series():
    model = _build(epochs=6, learning_rate=0.005)
    ds = _dataset(80)
    result = train(model, ds)
    losses = [row.train_loss for row in result.trace]
    assert losses[-1] < losses[0]


# ---------------------------------------------------------------------------
# parameter loading
# ---------------------------------------------------------------------------


def test_load_params_round_trip():
    a, b = _build(), _build(seed=9)
    table = {p.name: p.data.copy() for p in a.params()}
    load_params(b, table)
    for pa, pb in zip(a.params(), b.params()):
        np.testing.assert_array_equal(pa.data, pb.data)


def test_load_params_errors():
    model = _build()
    with pytest.raises(ContractError, match="unknown"):
        load_params(model, {"nope": np.zeros(3)})
    with pytest.raises(ContractError, match="shape"):
        load_params(model, {"adapter.b_out": np.zeros(5)})
