"""Held-out scoring, prediction, experiments, and the cost audit."""

import math

import numpy as np
import pytest

from ctnce.event_streams import Dataset, EventStream
from ctnce.evaluation import (
    ConsistencyConfig,
    ConsistencyResult,
    CostReport,
    VarianceConfig,
    VarianceResult,
    consistency_experiment,
    cost_report,
    heldout_loglik,
    k2_testbed_model,
    linked_param_error,
    predict_next,
    variance_experiment,
    write_consistency_report,
    write_variance_report,
)
from ctnce.intensity_models import CoarseNoiseModel, HawkesExpModel, softplus_inv
from ctnce.objectives import exact_loglik
from ctnce.trainer import CurvePoint, TrainConfig

from helpers import model_from_linked, random_instance


# ---------------------------------------------------------------------------
# held-out scoring


def test_heldout_sums_exact_loglik():
    rng = np.random.default_rng(0)
    model, s1 = random_instance(rng)
    _, s2 = random_instance(rng)
    # force a shared K so both streams fit one dataset
    model2, _ = random_instance(rng)
    streams = [s1, EventStream(s1.T, s1.times * 0.9, np.zeros(len(s1.times), dtype=int))]
    data = Dataset(model.K, streams)
    rep = heldout_loglik(model, data)
    want_total = sum(exact_loglik(model, s) for s in streams)
    assert rep.total == pytest.approx(want_total, rel=1e-12)
    assert rep.per_stream == pytest.approx(want_total / 2, rel=1e-12)
    assert rep.n_events == sum(len(s.times) for s in streams)
    if rep.n_events:
        assert rep.per_event == pytest.approx(want_total / rep.n_events, rel=1e-12)


def test_heldout_order_invariance():
    rng = np.random.default_rng(3)
    model, _ = random_instance(rng)
    streams = [random_instance(np.random.default_rng(i))[1] for i in range(5)]
    streams = [EventStream(s.T, s.times, np.zeros(len(s.times), dtype=int)) for s in streams]
    a = heldout_loglik(model, Dataset(model.K, streams))
    b = heldout_loglik(model, Dataset(model.K, streams[::-1]))
    assert a.total == pytest.approx(b.total, rel=1e-12)


def test_heldout_empty_dataset_is_nan_not_crash():
    model = model_from_linked([0.5], [[0.1]], [[1.0]])
    rep = heldout_loglik(model, Dataset(1, []))
    assert rep.total == 0.0
    assert math.isnan(rep.per_stream) and math.isnan(rep.per_event)


# ---------------------------------------------------------------------------
# next-event prediction


def _poisson_model(rate):
    return HawkesExpModel(
        1,
        np.array([softplus_inv(rate)]),
        np.array([[-40.0]]),
        np.array([[softplus_inv(1.0)]]),
    )


def test_predict_next_poisson_mean_interarrival():
    model = _poisson_model(2.0)
    history = [(1.0, 0)]
    n = 4000
    t_hat, k_hat = predict_next(model, history, horizon_cap=200.0, n_draws=n, rng=7)
    se = 0.5 / math.sqrt(n)
    assert abs(t_hat - 1.5) < 4 * se
    assert k_hat == 0


def test_predict_next_reports_dominant_type():
    model = model_from_linked([0.05, 3.0], [[1e-8] * 2] * 2, [[1.0] * 2] * 2)
    t_hat, k_hat = predict_next(model, [], horizon_cap=50.0, n_draws=200, rng=1)
    assert k_hat == 1
    assert t_hat > 0.0


def test_predict_next_respects_cap():
    model = _poisson_model(0.05)  # mean gap 20 >> cap
    t_hat, _ = predict_next(model, [(2.0, 0)], horizon_cap=2.5, n_draws=300, rng=2)
    assert 2.0 < t_hat <= 2.5


def test_predict_next_deterministic_and_validates():
    model = _poisson_model(1.0)
    a = predict_next(model, [(0.5, 0)], horizon_cap=30.0, n_draws=50, rng=11)
    b = predict_next(model, [(0.5, 0)], horizon_cap=30.0, n_draws=50, rng=11)
    assert a == b
    with pytest.raises(ValueError, match="n_draws"):
        predict_next(model, [], horizon_cap=10.0, n_draws=0, rng=0)
    with pytest.raises(ValueError, match="horizon_cap"):
        predict_next(model, [(5.0, 0)], horizon_cap=5.0, n_draws=10, rng=0)


# ---------------------------------------------------------------------------
# parameter error and the K=2 testbed


def test_linked_param_error_hand_value():
    truth = model_from_linked([1.0], [[1.0]], [[1.0]])
    fitted = model_from_linked([1.0], [[1.0]], [[2.0]])
    # vectors (1,1,1) vs (1,1,2): ||diff|| = 1, ||truth|| = sqrt(3)
    assert linked_param_error(fitted, truth) == pytest.approx(1 / math.sqrt(3), rel=1e-12)
    assert linked_param_error(truth, truth) == 0.0


def test_k2_testbed_is_subcritical():
    model = k2_testbed_model()
    assert model.K == 2
    ratio = model.alpha / model.beta
    col_sums = ratio.sum(axis=0)
    assert col_sums[0] == pytest.approx(0.65, abs=1e-12)
    assert col_sums[1] == pytest.approx(0.2 + 0.5 / 1.5, abs=1e-12)
    assert model.branching_proxy() < 1.0


# ---------------------------------------------------------------------------
# cost audit


def _mle_curve(K=2):
    return [
        CurvePoint(0, 0, 0.0, -50.0, float("nan")),
        CurvePoint(1, 100, 1.0, -45.0, -48.0, window_events=60, window_samples=20,
                   window_model_evals=60 + 20 * K, window_noise_evals=0),
        CurvePoint(2, 200, 2.0, -40.0, -44.0, window_events=60, window_samples=20,
                   window_model_evals=60 + 20 * K, window_noise_evals=0),
    ]


def test_cost_report_mle_identity_pass_and_fail():
    cfg = TrainConfig(objective="mle", rho=1.0)
    rep = cost_report(_mle_curve(), cfg, K=2)
    assert rep.mle_identity_ok is True
    assert rep.nce_bound_ok is None and rep.ji_ratio is None

    bad = _mle_curve()
    bad[2] = CurvePoint(2, 200, 2.0, -40.0, -44.0, window_events=60, window_samples=20,
                        window_model_evals=105, window_noise_evals=0)
    rep = cost_report(bad, cfg, K=2)
    assert rep.mle_identity_ok is False
    assert rep.windows[1]["ok"] is False


def _nce_curve(violate=False):
    # bound per window: (C+1)*proposals + 2*events = 2*50 + 2*30 = 160
    evals = 200 if violate else 120
    return [
        CurvePoint(0, 0, 0.0, -50.0, float("nan")),
        CurvePoint(1, evals, 1.0, -45.0, -1.0, window_events=30, window_samples=45,
                   window_proposals=50, window_model_evals=evals - 30, window_noise_evals=30),
        CurvePoint(2, 2 * evals, 2.0, -41.0, -0.9, window_events=30, window_samples=45,
                   window_proposals=50, window_model_evals=evals - 30, window_noise_evals=30),
    ]


def test_cost_report_nce_bound_and_ji_ratio():
    cfg = TrainConfig(objective="nce", M=5.0)
    rep = cost_report(_nce_curve(), cfg, K=2, C=1)
    assert rep.nce_bound_ok is True
    assert rep.mle_identity_ok is None
    assert rep.ji_ratio == pytest.approx(100 / 60)
    rep = cost_report(_nce_curve(violate=True), cfg, K=2, C=1)
    assert rep.nce_bound_ok is False


def test_cost_report_comparison_line_and_target():
    cfg = TrainConfig(objective="nce", M=5.0, rho=1.0)
    rep = cost_report(_nce_curve(), cfg, K=2, C=1, target_ll=-42.0)
    assert rep.comparison_line == "(M+1)(C+1) = 12 > rho*K = 2"
    assert rep.reached is True
    assert rep.reached_epoch == 2 and rep.reached_evals == 240

    rep = cost_report(_nce_curve(), cfg, C=1, target_ll=-10.0)
    assert rep.comparison_line == "(M+1)(C+1) = 12; rho*K unknown (K not given)"
    assert rep.reached is False and rep.reached_epoch is None and rep.reached_evals is None

    with pytest.raises(ValueError, match="nonempty"):
        cost_report([], cfg)


# ---------------------------------------------------------------------------
# experiments (smoke scale; full scale lives in the acceptance suite)


def test_variance_experiment_smoke():
    truth = _poisson_model(1.0)
    q = CoarseNoiseModel(np.array([0]), np.array([1.0]), np.array([1.0]))
    cfg = VarianceConfig(M_values=(2.0,), replications=3, n_streams=15, horizon=10.0, seed=0)
    res = variance_experiment(truth, q, cfg)
    assert res.mle_estimates.shape == (3,)
    assert np.all(np.isfinite(res.mle_estimates)) and np.all(res.mle_estimates > 0)
    est = res.nce_estimates[2.0]
    assert est.shape == (3,) and np.all(np.isfinite(est)) and np.all(est > 0)
    assert res.mle_variance > 0 and res.nce_variance[2.0] > 0
    assert res.ratio[2.0] == pytest.approx(res.nce_variance[2.0] / res.mle_variance)


def test_variance_experiment_rejects_multitype():
    truth = k2_testbed_model()
    q = CoarseNoiseModel(np.array([0, 1]), np.array([1.0, 1.0]), np.array([0.5, 0.5]))
    with pytest.raises(ValueError, match="K=1"):
        variance_experiment(truth, q, VarianceConfig(replications=1, n_streams=2))


def test_consistency_experiment_smoke():
    cfg = ConsistencyConfig(n_small=4, n_large=12, n_dev=2, horizon=8.0, reps=2,
                            M=3.0, seed=0, batch_size=4, epochs_small=4, epochs_large=2)
    res = consistency_experiment(k2_testbed_model(), cfg)
    assert len(res.errors_small) == len(res.errors_large) == 2
    for e in res.errors_small + res.errors_large:
        assert math.isfinite(e) and e > 0
    assert 0 <= res.wins_large <= 2


# ---------------------------------------------------------------------------
# report files


def _read_all(out_dir):
    import pathlib

    return {p.name: p.read_bytes() for p in pathlib.Path(out_dir).iterdir()}


def test_write_variance_report_deterministic(tmp_path):
    cfg = VarianceConfig(M_values=(1.0, 10.0), replications=3, n_streams=5, horizon=4.0, seed=1)
    res = VarianceResult(
        cfg,
        np.array([0.9, 1.1, 1.0]),
        {1.0: np.array([0.8, 1.2, 1.0]), 10.0: np.array([0.95, 1.05, 1.0])},
        0.01,
        {1.0: 0.04, 10.0: 0.011},
        {1.0: 4.0, 10.0: 1.1},
    )
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    paths = write_variance_report(res, str(out_a))
    write_variance_report(res, str(out_b))
    assert _read_all(out_a) == _read_all(out_b)
    header = open(paths["csv"], encoding="utf-8").readline().strip()
    assert header == "rep,mle_rate,nce_rate_M1,nce_rate_M10"
    import json

    summary = json.load(open(paths["json"], encoding="utf-8"))
    assert summary["ratio"] == {"1": 4.0, "10": 1.1}


def test_write_consistency_report_deterministic(tmp_path):
    cfg = ConsistencyConfig(reps=2)
    res = ConsistencyResult(cfg, [0.3, 0.25], [0.1, 0.3])
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    paths = write_consistency_report(res, str(out_a))
    write_consistency_report(res, str(out_b))
    assert _read_all(out_a) == _read_all(out_b)
    lines = open(paths["csv"], encoding="utf-8").read().splitlines()
    assert lines[0] == "rep,err_small,err_large"
    assert len(lines) == 3
    import json

    summary = json.load(open(paths["json"], encoding="utf-8"))
    assert summary["wins_large"] == 1
