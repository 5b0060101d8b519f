"""Training objectives with analytic gradients in the raw parameter layout.

Three per-stream objectives, each returning value, gradient, and an exact
count of intensity evaluations:

- `exact_loglik`: event log-intensities minus the closed-form compensator.
- `mle_objective`: same event term, compensator replaced by a Monte-Carlo
  integral on J uniform times (J a randomized rounding of rho * I), so the
  estimate is unbiased for the exact log-likelihood.
- `nce_objective`: ranking noise-contrast. Real events score
  log(lambda / (lambda + M lambda^q)); noise samples score
  weight * log(lambda^q / (lambda + M lambda^q)) with the stored noise
  intensity. Only the model parameters carry gradient; q is frozen.

Intensities are clamped at LOG_FLOOR before any log (and the matching
denominators before division); every clamp is counted in `clamp_diagnostics`.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .event_streams import EventStream
from .intensity_models import (
    CoarseNoiseModel,
    EvalCounter,
    HawkesExpModel,
    _eval_points,
    _grad_from_aggregates,
    noise_model_fingerprint,
)
from .thinning_sampler import NoiseSample

__all__ = [
    "ObjectiveReport",
    "PackedNoise",
    "NoiseCache",
    "ClampDiagnostics",
    "clamp_diagnostics",
    "LOG_FLOOR",
    "exact_loglik",
    "exact_loglik_gradient",
    "mle_objective",
    "nce_objective",
]

LOG_FLOOR = 1e-300


@dataclass
class ClampDiagnostics:
    """Counts how many intensities hit the log floor since the last reset."""

    clamped: int = 0

    def record(self, n: int) -> None:
        self.clamped += int(n)

    def reset(self) -> None:
        self.clamped = 0


clamp_diagnostics = ClampDiagnostics()


def _clamp(x: np.ndarray) -> np.ndarray:
    n_low = int((x < LOG_FLOOR).sum())
    if n_low:
        clamp_diagnostics.record(n_low)
        return np.maximum(x, LOG_FLOOR)
    return x


@dataclass
class ObjectiveReport:
    """Value, gradient wrt raw params, and the evaluation bill for one stream."""

    value: float
    gradient: np.ndarray
    counter: EvalCounter
    event_count: int
    sample_count: int  # J: MC grid times for MLE, accepted noise samples for NCE


@dataclass(frozen=True)
class PackedNoise:
    """Array form of a noise-sample sequence, for repeated evaluation over
    fixed noise (replication experiments) without per-call list conversion.
    `nce_objective` accepts this anywhere a sequence of NoiseSample fits."""

    times: np.ndarray
    types: np.ndarray
    noise_intensities: np.ndarray
    weights: np.ndarray

    @classmethod
    def from_samples(cls, samples: Sequence[NoiseSample]) -> "PackedNoise":
        return cls(
            np.array([s.time for s in samples], dtype=np.float64),
            np.array([s.type_id for s in samples], dtype=np.int64),
            np.array([s.noise_intensity for s in samples], dtype=np.float64),
            np.array([s.weight for s in samples], dtype=np.float64),
        )

    def __len__(self) -> int:
        return int(self.times.size)


class NoiseCache:
    """Per-stream noise draws, valid only for one (M, q, seed) setting.

    `matches` compares M, the noise model fingerprint, and the seed; any
    mismatch invalidates the whole cache. Entries store the accepted samples
    together with the proposal count that produced them, so cost accounting
    can bill reused epochs at the same J.
    """

    def __init__(self, M: float, q_fingerprint: str, seed: int):
        self.M = float(M)
        self.q_fingerprint = str(q_fingerprint)
        self.seed = int(seed)
        self._store: dict[int, tuple[tuple[NoiseSample, ...], int]] = {}

    @classmethod
    def for_model(cls, M: float, q: CoarseNoiseModel, seed: int) -> "NoiseCache":
        return cls(M, noise_model_fingerprint(q), seed)

    def matches(self, M: float, q_fingerprint: str, seed: int) -> bool:
        return (
            self.M == float(M)
            and self.q_fingerprint == str(q_fingerprint)
            and self.seed == int(seed)
        )

    def get(self, stream_index: int):
        return self._store.get(stream_index)

    def put(self, stream_index: int, samples: Sequence[NoiseSample], n_proposals: int) -> None:
        self._store[stream_index] = (tuple(samples), int(n_proposals))

    def __len__(self) -> int:
        return len(self._store)


def _compensator_value(model: HawkesExpModel, stream: EventStream) -> float:
    link = model._link()
    total = float(link["mu"].sum()) * stream.T
    if len(stream):
        A = link["alpha"][stream.types, :]
        B = link["beta"][stream.types, :]
        D = (stream.T - stream.times)[:, None]
        total += float(((A / B) * (-np.expm1(-B * D))).sum())
    return total


def _compensator_gradient(model: HawkesExpModel, stream: EventStream) -> np.ndarray:
    link = model._link()
    K = model.K
    g_mu = link["sig_mu"] * stream.T
    g_alpha = np.zeros((K, K))
    g_beta_pair = np.zeros((K, K))
    if len(stream):
        A = link["alpha"][stream.types, :]
        B = link["beta"][stream.types, :]
        D = (stream.T - stream.times)[:, None]
        F = -np.expm1(-B * D) / B  # (1 - e^{-B D}) / B
        dF = D * np.exp(-B * D) / B - F / B
        np.add.at(g_alpha, stream.types, F)
        np.add.at(g_beta_pair, stream.types, A * dF)
    g_alpha *= link["sig_alpha"]
    if model.shared_beta:
        g_beta = np.array([g_beta_pair.sum() * float(link["sig_beta"])])
    else:
        g_beta = (g_beta_pair * link["sig_beta"]).ravel()
    return np.concatenate([g_mu, g_alpha.ravel(), g_beta])


def _event_terms(model: HawkesExpModel, stream: EventStream):
    """Model intensity at each event, conditioning handled by the strict-past mask."""
    if not len(stream):
        return np.zeros(0)
    return _eval_points(model, stream.times, stream.types, stream.times, stream.types)


def exact_loglik(model: HawkesExpModel, stream: EventStream) -> float:
    """Closed-form log-likelihood of the stream on [0, T)."""
    lam = _clamp(_event_terms(model, stream))
    return float(np.log(lam).sum()) - _compensator_value(model, stream)


def exact_loglik_gradient(model: HawkesExpModel, stream: EventStream) -> np.ndarray:
    if len(stream):
        lam, e0, e1 = _eval_points(
            model, stream.times, stream.types, stream.times, stream.types, aggregates=True
        )
        lam = _clamp(lam)
        g_events = _grad_from_aggregates(model, stream.types, 1.0 / lam, e0, e1)
    else:
        g_events = np.zeros(model.n_raw)
    return g_events - _compensator_gradient(model, stream)


def mle_objective(
    model: HawkesExpModel,
    stream: EventStream,
    rho: float,
    rng: np.random.Generator,
    counter: Optional[EvalCounter] = None,
) -> ObjectiveReport:
    """Unbiased MC estimate of the log-likelihood and its gradient.

    J = floor(rho * I) + Bernoulli(frac(rho * I)) grid times, uniform on
    [0, T); the integral term is (T / J) * sum_j sum_k lambda_k(t_j). Exactly
    I + J*K model intensity evaluations are billed.
    """
    if rho < 0:
        raise ValueError(f"rho must be non-negative, got {rho}")
    own = EvalCounter()
    I = len(stream)
    x = rho * I
    J = int(math.floor(x))
    if rng.random() < x - J:
        J += 1
    own.model_evals += I + J * model.K

    if J == 0:
        warnings.warn(
            "mle_objective drew J=0 grid times; the integral term is estimated as 0 "
            "and the estimate is biased for this stream (raise rho or the event count)"
        )
        ts_all, ks_all = stream.times, stream.types
    else:
        t_grid = rng.random(J) * stream.T
        ts_all = np.concatenate([stream.times, np.repeat(t_grid, model.K)])
        ks_all = np.concatenate([stream.types, np.tile(np.arange(model.K), J)])

    if ts_all.size == 0:
        if counter is not None:
            counter.merge(own)
        return ObjectiveReport(0.0, np.zeros(model.n_raw), own, I, J)

    lam_all, e0, e1 = _eval_points(
        model, stream.times, stream.types, ts_all, ks_all, aggregates=True
    )
    coeff = np.empty(ts_all.size)
    value = 0.0
    if I:
        lam_ev = _clamp(lam_all[:I])
        value += float(np.log(lam_ev).sum())
        coeff[:I] = 1.0 / lam_ev
    if J:
        scale = stream.T / J
        value -= scale * float(lam_all[I:].sum())
        coeff[I:] = -scale
    grad = _grad_from_aggregates(model, ks_all, coeff, e0, e1)

    if counter is not None:
        counter.merge(own)
    return ObjectiveReport(value, grad, own, I, J)


def _noise_intensities_at_events(
    q: CoarseNoiseModel, stream: EventStream
) -> np.ndarray:
    """lambda^q at each real event, fresh at objective time (strict past)."""
    if not len(stream):
        return np.zeros(0)
    coarse_types = q.partition[stream.types]
    lam_c = q.coarse_intensities_at(stream.times, stream.times, stream.types)
    return q.refine_probs[stream.types] * lam_c[np.arange(len(stream)), coarse_types]


def nce_objective(
    model: HawkesExpModel,
    q: CoarseNoiseModel,
    stream: EventStream,
    noise: Sequence[NoiseSample],
    M: float,
    counter: Optional[EvalCounter] = None,
) -> ObjectiveReport:
    """Ranking noise-contrast objective for one stream under frozen q.

    Real events contribute log(lambda / (lambda + M lambda^q)); each noise
    sample contributes weight * log(lambda^q / (lambda + M lambda^q)) using
    its stored noise intensity. Bills I + J model evaluations (events plus
    noise samples) and I noise evaluations (fresh lambda^q at the events).
    """
    if M <= 0:
        raise ValueError(f"M must be positive, got {M}")
    own = EvalCounter()
    I = len(stream)
    J = len(noise)

    if J:
        if isinstance(noise, PackedNoise):
            ts_n, ks_n = noise.times, noise.types
            lamq_n, w_n = noise.noise_intensities, noise.weights
        else:
            packed = PackedNoise.from_samples(noise)
            ts_n, ks_n = packed.times, packed.types
            lamq_n, w_n = packed.noise_intensities, packed.weights
        if I and np.intersect1d(ts_n, stream.times).size:
            raise ValueError(
                "noise sample time collides with a real event time; the noise was "
                "likely drawn for (or cached from) a different stream"
            )

    if I and J:
        ts_all = np.concatenate([stream.times, ts_n])
        ks_all = np.concatenate([stream.types, ks_n])
    elif I:
        ts_all, ks_all = stream.times, stream.types
    elif J:
        ts_all, ks_all = ts_n, ks_n
    else:
        return ObjectiveReport(0.0, np.zeros(model.n_raw), own, 0, 0)

    lam_all, e0, e1 = _eval_points(
        model, stream.times, stream.types, ts_all, ks_all, aggregates=True
    )
    coeff = np.empty(ts_all.size)
    value = 0.0
    if I:
        lam_i = _clamp(lam_all[:I])
        lamq_i = _noise_intensities_at_events(q, stream)
        own.model_evals += I
        own.noise_evals += I
        denom_i = _clamp(lam_i + M * lamq_i)
        value += float((np.log(lam_i) - np.log(denom_i)).sum())
        coeff[:I] = 1.0 / lam_i - 1.0 / denom_i
    if J:
        lam_n = lam_all[I:]
        own.model_evals += J
        denom_n = _clamp(lam_n + M * lamq_n)
        value += float((w_n * (np.log(_clamp(lamq_n)) - np.log(denom_n))).sum())
        coeff[I:] = -w_n / denom_n
    grad = _grad_from_aggregates(model, ks_all, coeff, e0, e1)

    if counter is not None:
        counter.merge(own)
    return ObjectiveReport(float(value), grad, own, I, J)
