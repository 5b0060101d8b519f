"""Thinning (rejection) sampling for event streams and noise samples.

Excitation-only exponential kernels make every intensity non-increasing
between events, so the total intensity evaluated just after the last history
event is an exact upper bound on the whole remaining interval. That removes
bound tuning from the classic thinning loop: propose waiting times at the
bound rate, accept with probability lambda(t)/bound, tighten the bound as the
state decays.

`draw_noise_samples` is the modified sampler used by NCE training: proposals
arrive at M times the bound rate of the noise process q (the M-fold
superposition trick, valid for non-integer M), conditioning always on the
*observed* stream's history, and low-probability proposals are accepted
stochastically at weight 1 while the rest are accepted fractionally at
weight mu = lambda^q(t)/bound.

All exponential waiting times are inverse-CDF transforms of 64-bit uniforms,
so a seed pins the sample sequence exactly.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .event_streams import EventStream
from .intensity_models import (
    CoarseNoiseModel,
    EvalCounter,
    HawkesExpModel,
    _history_arrays,
    _intensity_right,
)

__all__ = [
    "NoiseSample",
    "UpperBound",
    "sample_stream",
    "draw_noise_samples",
    "upper_bound",
    "EXPLOSION_CAP",
]

EXPLOSION_CAP = 10**6


@dataclass(frozen=True)
class NoiseSample:
    """One accepted noise proposal: (time, type, lambda^q_k(time), weight)."""

    time: float
    type_id: int
    noise_intensity: float
    weight: float


@dataclass(frozen=True)
class UpperBound:
    """A bound on the total intensity, valid over (t_beg, t_end)."""

    value: float
    t_beg: float
    t_end: float


def _as_rng(rng_or_seed) -> np.random.Generator:
    if isinstance(rng_or_seed, np.random.Generator):
        return rng_or_seed
    return np.random.default_rng(rng_or_seed)


def _exp_gap(rng: np.random.Generator, rate: float) -> float:
    # inverse CDF on a 64-bit uniform; log1p keeps u=0 finite
    return -math.log1p(-rng.random()) / rate


def upper_bound(model, t_beg: float, history=None, t_end: float = math.inf) -> UpperBound:
    """Exact total-intensity bound at t_beg+, valid until the next event."""
    hist_t, hist_k = _history_arrays(history)
    if hist_t.size and hist_t[-1] > t_beg:
        raise ValueError("history extends past t_beg")
    if isinstance(model, CoarseNoiseModel):
        value = model.coarse_total_right(t_beg, hist_t, hist_k)
    else:
        value = float(_intensity_right(model, t_beg, hist_t, hist_k).sum())
    return UpperBound(value, t_beg, t_end)


def sample_stream(model, T: float, rng_seed) -> EventStream:
    """Draw one event stream on [0, T) from the model by thinning."""
    if T <= 0:
        raise ValueError(f"horizon must be positive, got {T}")
    rng = _as_rng(rng_seed)
    if isinstance(model, CoarseNoiseModel):
        return _sample_noise_process(model, T, rng)
    return _sample_hawkes(model, T, rng)


def _sample_hawkes(model: HawkesExpModel, T: float, rng: np.random.Generator) -> EventStream:
    if model.branching_proxy() >= 1.0:
        warnings.warn(
            "excitation spectral proxy >= 1: the process may be explosive; "
            "sampling continues under the event cap"
        )
    link = model._link()
    mu, alpha, beta = link["mu"], link["alpha"], link["beta"]
    mu_total = float(mu.sum())
    # state[j, k]: current excitation of target k contributed by past type-j events
    state = np.zeros((model.K, model.K))
    t = 0.0
    times: list[float] = []
    types: list[int] = []
    while True:
        lam_bar = mu_total + float(state.sum())
        t_new = t + _exp_gap(rng, lam_bar)
        if t_new >= T:
            break
        state *= np.exp(-beta * (t_new - t))
        t = t_new
        lam_k = mu + state.sum(axis=0)
        lam_tot = float(lam_k.sum())
        if rng.random() * lam_bar < lam_tot:
            if len(times) >= EXPLOSION_CAP:
                raise RuntimeError(f"explosion cap: more than {EXPLOSION_CAP} events before t={t}")
            u = rng.random() * lam_tot
            k = int(min(np.searchsorted(np.cumsum(lam_k), u, side="right"), model.K - 1))
            times.append(t)
            types.append(k)
            state[k, :] += alpha[k, :]
    return EventStream(T, times, types)


def _sample_noise_process(q: CoarseNoiseModel, T: float, rng: np.random.Generator) -> EventStream:
    """Generative draw from q itself: coarse events by thinning, then refine."""
    if q.is_poisson:
        rates = np.asarray(q.coarse)
        total = float(rates.sum())
        cum = np.cumsum(rates)
        t = 0.0
        ctimes: list[float] = []
        ctypes: list[int] = []
        while True:
            t = t + _exp_gap(rng, total)
            if t >= T:
                break
            if len(ctimes) >= EXPLOSION_CAP:
                raise RuntimeError(f"explosion cap: more than {EXPLOSION_CAP} events before t={t}")
            c = int(min(np.searchsorted(cum, rng.random() * total, side="right"), q.C - 1))
            ctimes.append(t)
            ctypes.append(c)
        coarse_stream = EventStream(T, ctimes, ctypes)
    else:
        coarse_stream = _sample_hawkes(q.coarse, T, rng)
    fine_types = np.empty(len(coarse_stream), dtype=np.int64)
    for i, c in enumerate(coarse_stream.types):
        members = q._members[c]
        cum = q._member_cum[c]
        fine_types[i] = members[min(int(np.searchsorted(cum, rng.random(), side="right")), members.size - 1)]
    return EventStream(T, coarse_stream.times, fine_types)


def draw_noise_samples(
    q: CoarseNoiseModel,
    t_beg: float,
    t_end: float,
    observed_history,
    M: float,
    rng,
    counter: Optional[EvalCounter] = None,
    fractional_threshold: float = 0.05,
) -> list[NoiseSample]:
    """Noise samples on (t_beg, t_end), conditioned on the observed history.

    Proposals arrive at rate M * bound; a proposal at t is kept with weight
    mu = lambda^q(t)/bound if mu >= fractional_threshold, otherwise it is kept
    with probability mu at weight 1. Each proposal costs C noise-intensity
    evaluations (the coarse intensities that both the acceptance test and the
    refinement draw reuse).
    """
    if not t_beg < t_end:
        raise ValueError(f"invalid interval: t_beg={t_beg} must be < t_end={t_end}")
    if M < 0:
        raise ValueError(f"M must be non-negative, got {M}")
    hist_t, hist_k = _history_arrays(observed_history)
    inside = (hist_t > t_beg) & (hist_t < t_end)
    if inside.any():
        raise ValueError(
            "observed history has an event strictly inside (t_beg, t_end); "
            "draw noise per inter-event segment"
        )
    keep = hist_t <= t_beg
    hist_t, hist_k = hist_t[keep], hist_k[keep]
    rng = _as_rng(rng)

    if M == 0:
        return []
    lam_bar = q.coarse_total_right(t_beg, hist_t, hist_k)
    if lam_bar <= 0.0:
        return []
    rate = M * lam_bar
    L = t_end - t_beg

    # sequential Exp(rate) gaps, drawn in blocks; the block size is a fixed
    # function of (rate, L) so a seed pins the whole sequence
    expected = rate * L
    block = max(4, int(expected + 8.0 * math.sqrt(expected) + 8.0))
    cum = t_beg + np.cumsum(-np.log1p(-rng.random(block)) / rate)
    while cum[-1] < t_end:
        more = -np.log1p(-rng.random(block)) / rate
        cum = np.concatenate([cum, cum[-1] + np.cumsum(more)])
    ts = cum[(cum < t_end) & (cum > t_beg)]
    P = int(ts.size)
    if counter is not None:
        counter.noise_evals += q.C * P
    if P == 0:
        return []

    lam_c = q.coarse_intensities_at(ts, hist_t, hist_k)  # (P, C)
    tot = lam_c.sum(axis=1)
    mu_p = np.minimum(tot / lam_bar, 1.0)

    weights = mu_p.copy()
    accept = np.ones(P, dtype=bool)
    stochastic = mu_p < fractional_threshold
    n_sto = int(stochastic.sum())
    if n_sto:
        u = rng.random(n_sto)
        won = u < mu_p[stochastic]
        accept[stochastic] = won
        w = weights[stochastic]
        w[won] = 1.0
        weights[stochastic] = w

    idx = np.nonzero(accept)[0]
    if idx.size == 0:
        return []

    # coarse type c proportional to lambda^q_c(t), then refine k ~ q(.|c)
    lam_acc = lam_c[idx]
    cum_rows = np.cumsum(lam_acc, axis=1)
    u_c = rng.random(idx.size) * tot[idx]
    c_idx = (u_c[:, None] >= cum_rows).sum(axis=1)
    c_idx = np.minimum(c_idx, q.C - 1)
    u_k = rng.random(idx.size)
    k_idx = np.empty(idx.size, dtype=np.int64)
    for c in np.unique(c_idx):
        sel = c_idx == c
        members = q._members[c]
        pos = np.searchsorted(q._member_cum[c], u_k[sel], side="right")
        k_idx[sel] = members[np.minimum(pos, members.size - 1)]

    lamq_k = q.refine_probs[k_idx] * lam_acc[np.arange(idx.size), c_idx]
    out = [
        NoiseSample(float(ts[i]), int(k), float(lq), float(w))
        for i, k, lq, w in zip(idx, k_idx, lamq_k, weights[idx])
    ]
    return out
