"""Intensity model values, gradients, compensators, noise models, persistence.

Scalar oracle values are frozen from independent arithmetic:
    0.5 + exp(-2)  = 0.6353352832366127
computed as math.exp(-2.0) = 0.1353352832366127 plus 0.5.
"""

import json
import math

import numpy as np
import pytest
from scipy.integrate import quad

from ctnce.event_streams import Dataset, EventStream
from ctnce.intensity_models import (
    CoarseNoiseModel,
    EvalCounter,
    HawkesExpModel,
    NoiseFitConfig,
    compensator,
    compensator_gradient,
    fit_noise_model,
    init_model,
    init_model_for_data,
    intensity,
    intensity_gradient,
    load_model,
    load_noise_model,
    noise_intensity,
    noise_model_fingerprint,
    save_model,
    save_noise_model,
    sigmoid,
    softplus,
    softplus_inv,
)
from ctnce.thinning_sampler import sample_stream

from helpers import central_fd, model_from_linked, random_instance, rel_err


# ---------------------------------------------------------------------------
# links and counters


def test_softplus_inverse_roundtrip():
    ys = np.array([1e-6, 0.1, 0.5, 1.0, 7.0, 40.0, 900.0])
    assert np.allclose(softplus(softplus_inv(ys)), ys, rtol=1e-12, atol=1e-12)
    xs = np.array([-30.0, -2.0, 0.0, 3.0, 800.0])
    assert np.all(softplus(xs) > 0)
    # sigmoid is the softplus derivative
    h = 1e-6
    for x in (-3.0, 0.2, 4.0):
        fd = (softplus(x + h) - softplus(x - h)) / (2 * h)
        assert abs(fd - sigmoid(x)) < 1e-9


def test_eval_counter_merge_and_copy():
    a = EvalCounter()
    a.model_evals += 3
    a.noise_evals += 2
    b = EvalCounter()
    b.model_evals += 10
    a.merge(b.copy())
    assert (a.model_evals, a.noise_evals, a.total) == (13, 2, 15)
    c = a.copy()
    c.model_evals += 1
    assert a.model_evals == 13


# ---------------------------------------------------------------------------
# intensity


def test_intensity_empty_history_is_base_rate():
    model = model_from_linked([0.7, 1.3], np.full((2, 2), 0.4), np.ones((2, 2)))
    for k, mu_k in ((0, 0.7), (1, 1.3)):
        for t in (0.0, 1.0, 57.0):
            assert intensity(model, k, t) == pytest.approx(mu_k, abs=1e-12)


def test_intensity_frozen_scalar_oracle():
    # K=1, mu=0.5, alpha=1.0, beta=2.0, one event at t=0, evaluated at t=1
    model = model_from_linked([0.5], [[1.0]], [[2.0]])
    got = intensity(model, 0, 1.0, [(0.0, 0)])
    assert abs(got - 0.6353352832366127) < 1e-12


def test_intensity_decays_to_base_rate():
    model = model_from_linked([0.8], [[0.9]], [[1.5]])
    t = 2.0 + 50.0 / 1.5
    got = intensity(model, 0, t, [(1.0, 0), (2.0, 0)])
    assert abs(got - 0.8) < 1e-9


def test_intensity_validation_and_counter():
    model = model_from_linked([0.5], [[0.2]], [[1.0]])
    with pytest.raises(ValueError, match="strictly after"):
        intensity(model, 0, 1.0, [(1.0, 0)])
    with pytest.raises(ValueError, match="outside"):
        intensity(model, 1, 1.0)
    counter = EvalCounter()
    intensity(model, 0, 1.0, None, counter)
    intensity(model, 0, 2.0, [(1.5, 0)], counter)
    assert (counter.model_evals, counter.noise_evals) == (2, 0)


def test_positivity_for_arbitrary_raw():
    rng = np.random.default_rng(0)
    for _ in range(20):
        model = HawkesExpModel(
            2,
            rng.normal(0, 20, size=2),
            rng.normal(0, 20, size=(2, 2)),
            rng.normal(0, 20, size=(2, 2)),
        )
        assert np.all(model.mu > 0)
        assert np.all(model.alpha > 0)
        assert np.all(model.beta > 0)


def test_raw_roundtrip_and_immutability():
    model = model_from_linked([0.5, 0.9], np.full((2, 2), 0.3), np.full((2, 2), 1.2))
    raw = model.get_raw()
    other = model.with_raw(raw + 0.25)
    assert np.allclose(other.get_raw(), raw + 0.25)
    assert np.allclose(model.get_raw(), raw)  # with_raw does not mutate
    with pytest.raises(ValueError):
        model.set_raw(raw[:-1])
    assert model.n_raw == 2 + 4 + 4


def test_branching_proxy():
    alpha = np.array([[0.2, 0.4], [0.1, 0.3]])
    beta = np.array([[1.0, 2.0], [0.5, 1.5]])
    model = model_from_linked([1.0, 1.0], alpha, beta)
    expected = float((alpha / beta).sum(axis=0).max())
    assert model.branching_proxy() == pytest.approx(expected, rel=1e-12)


def test_init_model_determinism_and_scale():
    a = init_model(3, target_rate=2.0, seed=9)
    b = init_model(3, target_rate=2.0, seed=9)
    assert np.array_equal(a.get_raw(), b.get_raw())
    c = init_model(3, target_rate=2.0, seed=10)
    assert not np.array_equal(a.get_raw(), c.get_raw())
    # raw draws are Normal(softplus_inv(target), 0.1^2): linked mu near target/K scale
    assert np.all(a.mu > 0.05)


def test_init_model_for_data_matches_rate():
    streams = [EventStream(10.0, [1.0, 2.0, 3.0], [0, 1, 0]) for _ in range(4)]
    data = Dataset(2, streams)
    model = init_model_for_data(data, seed=0)
    assert model.K == 2
    # 12 events / 40 time units = 0.3 total, split across K=2 types
    assert float(model.mu.sum()) == pytest.approx(0.3, rel=0.8)


# ---------------------------------------------------------------------------
# compensator


def test_compensator_trivial_cases():
    model = model_from_linked([0.5], [[0.3]], [[1.0]])
    assert compensator(model, 0, 2.0, 2.0, [(1.0, 0)]) == 0.0
    empty = model_from_linked([0.5], [[1e-17]], [[1.0]])
    assert compensator(empty, 0, 1.0, 5.0) == pytest.approx(2.0, abs=1e-12)
    with pytest.raises(ValueError, match="t1"):
        compensator(model, 0, 3.0, 2.0)
    with pytest.raises(ValueError, match="history extends past"):
        compensator(model, 0, 1.0, 2.0, [(1.5, 0)])


def test_compensator_matches_quadrature():
    rng = np.random.default_rng(3)
    for _ in range(10):
        model, stream = random_instance(rng)
        if not len(stream):
            continue
        t0 = float(stream.times[-1]) + 0.05
        t1 = t0 + float(rng.uniform(0.5, 3.0))
        hist = (stream.times, stream.types)
        for k in range(model.K):
            val = compensator(model, k, t0, t1, hist)
            ref, err = quad(
                lambda s: intensity(model, k, s, hist), t0, t1, epsabs=1e-12, epsrel=1e-12
            )
            assert abs(val - ref) <= 1e-8 * max(abs(ref), 1e-12)


def test_compensator_additivity():
    model = model_from_linked([0.4, 0.8], np.full((2, 2), 0.5), np.full((2, 2), 1.3))
    hist = [(0.2, 0), (0.9, 1), (1.4, 0)]
    t0, tm, t1 = 1.5, 2.7, 4.9
    for k in range(2):
        whole = compensator(model, k, t0, t1, hist)
        parts = compensator(model, k, t0, tm, hist) + compensator(model, k, tm, t1, hist)
        assert abs(whole - parts) < 1e-12


# ---------------------------------------------------------------------------
# gradients


def test_intensity_gradient_sparsity_empty_history():
    model = model_from_linked([0.5, 1.0], np.full((2, 2), 0.3), np.full((2, 2), 1.0))
    g = intensity_gradient(model, 1, 2.0)
    assert g[1] != 0.0
    g[1] = 0.0
    assert np.all(g == 0.0)  # alpha and beta blocks untouched without history


def test_intensity_gradient_matches_fd():
    rng = np.random.default_rng(11)
    for _ in range(10):
        model, stream = random_instance(rng)
        t = stream.T * 0.99
        hist = (stream.times, stream.types)
        k = int(rng.integers(0, model.K))
        g = intensity_gradient(model, k, t, hist)
        fd = central_fd(lambda r: intensity(model.with_raw(r), k, t, hist), model.get_raw())
        assert rel_err(g, fd) < 1e-6


def test_compensator_gradient_matches_fd():
    rng = np.random.default_rng(12)
    for _ in range(10):
        model, stream = random_instance(rng)
        if not len(stream):
            continue
        t0 = float(stream.times[-1]) + 0.01
        t1 = t0 + 2.0
        hist = (stream.times, stream.types)
        k = int(rng.integers(0, model.K))
        g = compensator_gradient(model, k, t0, t1, hist)
        fd = central_fd(lambda r: compensator(model.with_raw(r), k, t0, t1, hist), model.get_raw())
        assert rel_err(g, fd) < 1e-6


def test_shared_beta_gradients_and_layout():
    rng = np.random.default_rng(13)
    model = model_from_linked([0.5, 0.8], np.full((2, 2), 0.4), 1.3, shared_beta=True)
    assert model.n_raw == 2 + 4 + 1
    hist = ([0.3, 1.1], [0, 1])
    g = intensity_gradient(model, 0, 2.0, hist)
    fd = central_fd(lambda r: intensity(model.with_raw(r), 0, 2.0, hist), model.get_raw())
    assert rel_err(g, fd) < 1e-6
    g2 = compensator_gradient(model, 1, 1.5, 3.0, hist)
    fd2 = central_fd(lambda r: compensator(model.with_raw(r), 1, 1.5, 3.0, hist), model.get_raw())
    assert rel_err(g2, fd2) < 1e-6


# ---------------------------------------------------------------------------
# coarse noise model


def test_coarse_uniform_refinement():
    K, r = 4, 1.6
    q = CoarseNoiseModel(np.zeros(K, dtype=int), np.full(K, 1.0 / K), np.array([r]))
    counter = EvalCounter()
    for k in range(K):
        assert noise_intensity(q, k, 3.0, None, counter) == pytest.approx(r / K, rel=1e-12)
    assert counter.noise_evals == K
    assert counter.model_evals == 0


def test_coarse_marginalization():
    # sum_k lambda^q_k == sum_c lambda^q_c for any t, history
    coarse = model_from_linked([0.5, 0.9], np.full((2, 2), 0.3), np.full((2, 2), 1.1))
    partition = np.array([0, 0, 1, 1])
    refine = np.array([0.3, 0.7, 0.4, 0.6])
    q = CoarseNoiseModel(partition, refine, coarse)
    hist = ([0.5, 1.0, 1.7], [0, 3, 2])
    t = 2.4
    fine_sum = sum(noise_intensity(q, k, t, hist) for k in range(4))
    ct, ck = q.coarsen(*hist)
    coarse_sum = float(sum(intensity(coarse, c, t, (ct, ck)) for c in range(2)))
    assert fine_sum == pytest.approx(coarse_sum, rel=1e-12)


def test_coarse_hawkes_hand_composed_oracle():
    # independent recomputation with plain floats on a 3-event history
    mu = [0.5, 0.9]
    alpha = [[0.3, 0.25], [0.15, 0.35]]
    beta = [[1.1, 0.9], [1.3, 1.0]]
    coarse = model_from_linked(mu, alpha, beta)
    partition = np.array([0, 0, 1, 1])
    refine = np.array([0.3, 0.7, 0.4, 0.6])
    q = CoarseNoiseModel(partition, refine, coarse)
    hist_t, hist_k = [0.5, 1.0, 1.7], [0, 3, 2]  # fine types
    t = 2.4
    for k in range(4):
        c = int(partition[k])
        lam_c = mu[c]
        for ti, ki in zip(hist_t, hist_k):
            ci = int(partition[ki])
            lam_c += alpha[ci][c] * math.exp(-beta[ci][c] * (t - ti))
        want = refine[k] * lam_c
        assert noise_intensity(q, k, t, (hist_t, hist_k)) == pytest.approx(want, rel=1e-12)


def test_coarse_validation():
    with pytest.raises(ValueError, match=r"q\(k\|c=0\) sums to"):
        CoarseNoiseModel(np.array([0, 0]), np.array([0.4, 0.4]), np.array([1.0]))
    with pytest.raises(ValueError):
        CoarseNoiseModel(np.array([0]), np.array([1.0]), np.array([-1.0]))


# ---------------------------------------------------------------------------
# fitting


def test_fit_noise_poisson_closed_form():
    streams = [
        EventStream(3.0, [0.5, 1.0, 2.5], [0, 1, 0]),
        EventStream(7.0, [1.0, 6.0], [1, 1]),
    ]
    q = fit_noise_model(Dataset(2, streams), NoiseFitConfig(family="poisson"))
    assert q.is_poisson
    assert float(q.coarse[0]) == pytest.approx(5.0 / 10.0, rel=1e-15)
    # add-one smoothing: counts per type are (2, 3) in a 2-member cluster
    assert q.refine_probs.tolist() == pytest.approx([3.0 / 7.0, 4.0 / 7.0], rel=1e-15)
    assert float(q.refine_probs.sum()) == pytest.approx(1.0, abs=1e-12)


def test_fit_noise_respects_partition():
    streams = [EventStream(10.0, [1.0, 2.0, 3.0, 4.0], [0, 1, 2, 2])]
    data = Dataset(3, streams, partition=[0, 0, 1], C=2)
    q = fit_noise_model(data, NoiseFitConfig(family="poisson"))
    assert q.C == 2
    for c in range(2):
        members = np.flatnonzero(np.asarray(q.partition) == c)
        assert float(q.refine_probs[members].sum()) == pytest.approx(1.0, abs=1e-12)
    # cluster rates are count/total_time
    assert float(q.coarse[0]) == pytest.approx(0.2, rel=1e-15)
    assert float(q.coarse[1]) == pytest.approx(0.2, rel=1e-15)


def test_fit_noise_empty_dataset_errors():
    with pytest.raises(ValueError, match="empty"):
        fit_noise_model(Dataset(1, []), NoiseFitConfig())


def test_fit_noise_hawkes_recovery():
    # simulation-recovery at 500 streams x ~100 events
    truth = model_from_linked([1.0], [[0.5]], [[1.0]])
    streams = [sample_stream(truth, 50.0, np.random.default_rng([21, i])) for i in range(500)]
    data = Dataset(1, streams)
    q = fit_noise_model(data, NoiseFitConfig(family="hawkes"))
    assert not q.is_poisson
    got = q.coarse.linked_vector()
    want = truth.linked_vector()
    rel = np.abs(got - want) / np.abs(want)
    assert np.all(rel < 0.10), f"linked params {got} vs {want}: rel {rel}"


# ---------------------------------------------------------------------------
# persistence


def test_model_checkpoint_roundtrip(tmp_path):
    model = init_model(2, target_rate=1.5, seed=3)
    p1, p2 = tmp_path / "m1.json", tmp_path / "m2.json"
    save_model(model, p1)
    loaded = load_model(p1)
    assert np.array_equal(loaded.get_raw(), model.get_raw())
    save_model(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    payload = json.loads(p1.read_text())
    assert payload["format_version"] == 1


def test_noise_checkpoint_roundtrip_and_fingerprint(tmp_path):
    q = CoarseNoiseModel(np.array([0, 0, 1]), np.array([0.5, 0.5, 1.0]), np.array([1.0, 2.0]))
    p1, p2 = tmp_path / "q1.json", tmp_path / "q2.json"
    save_noise_model(q, p1)
    loaded = load_noise_model(p1)
    save_noise_model(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert noise_model_fingerprint(loaded) == noise_model_fingerprint(q)
    other = CoarseNoiseModel(np.array([0, 0, 1]), np.array([0.5, 0.5, 1.0]), np.array([1.0, 2.5]))
    assert noise_model_fingerprint(other) != noise_model_fingerprint(q)

    coarse = model_from_linked([0.5, 0.9], np.full((2, 2), 0.3), np.full((2, 2), 1.1))
    qh = CoarseNoiseModel(np.array([0, 0, 1, 1]), np.array([0.3, 0.7, 0.4, 0.6]), coarse)
    ph = tmp_path / "qh.json"
    save_noise_model(qh, ph)
    back = load_noise_model(ph)
    assert not back.is_poisson
    assert np.array_equal(back.coarse.get_raw(), coarse.get_raw())
