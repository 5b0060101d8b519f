"""Stochastic-gradient training loop for the NCE and MLE objectives.

One epoch = one seeded shuffle of the training streams, grouped into
minibatches whose gradients are SUMMED (streams with more events carry more
weight) and applied with bias-corrected Adam in the ascent direction.

Noise handling is controlled by `redraw`: "always" regenerates every stream's
noise samples each epoch from the stream's own RNG; "never" draws once at
first touch and caches (cache keyed by M, the noise-model fingerprint, and
the seed). Per-stream RNGs are seeded with seed XOR stream_index so stream
order and worker count cannot change what any stream draws.

Learning curves record, at every `eval_every` epochs, the cumulative
intensity-evaluation count, cumulative wall-clock training seconds (dev
evaluation excluded), the dev exact log-likelihood per stream, and the
epoch's training objective. CSV columns: epoch,evals,seconds,dev_ll_per_stream,train_obj.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .event_streams import Dataset, EventStream
from .intensity_models import (
    CoarseNoiseModel,
    EvalCounter,
    HawkesExpModel,
    noise_model_fingerprint,
    save_model,
)
from .objectives import NoiseCache, exact_loglik, mle_objective, nce_objective
from .thinning_sampler import NoiseSample, draw_noise_samples

__all__ = [
    "TrainConfig",
    "CurvePoint",
    "AdamState",
    "adam_step",
    "train",
    "write_curve",
    "CURVE_COLUMNS",
]

CURVE_COLUMNS = ("epoch", "evals", "seconds", "dev_ll_per_stream", "train_obj")


@dataclass
class TrainConfig:
    objective: str = "nce"
    M: float = 5.0
    rho: float = 1.0
    batch_size: int = 32
    redraw: str = "always"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    max_epochs: int = 100
    eval_every: int = 1
    seed: int = 0
    fractional_threshold: float = 0.05
    patience: int = 10
    workers: int = 1

    def __post_init__(self) -> None:
        if self.objective not in ("nce", "mle"):
            raise ValueError(f"objective must be 'nce' or 'mle', got {self.objective!r}")
        if self.redraw not in ("always", "never"):
            raise ValueError(f"redraw must be 'always' or 'never', got {self.redraw!r}")
        if self.objective == "nce" and self.M <= 0:
            raise ValueError(f"M must be positive for NCE, got {self.M}")
        if self.objective == "mle" and self.rho <= 0:
            raise ValueError(f"rho must be positive for MLE, got {self.rho}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 0:
            raise ValueError(f"max_epochs must be >= 0, got {self.max_epochs}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")
        if not 0.0 <= self.fractional_threshold <= 1.0:
            raise ValueError(
                f"fractional_threshold must be in [0, 1], got {self.fractional_threshold}"
            )


@dataclass
class CurvePoint:
    """One learning-curve row plus cost diagnostics for the window since the
    previous point (window_* fields are not part of the CSV contract)."""

    epoch: int
    evals: int
    seconds: float
    dev_ll_per_stream: float
    train_obj: float
    window_events: int = 0
    window_samples: int = 0  # accepted noise samples (NCE) or MC grid times (MLE)
    window_proposals: int = 0  # noise proposals billed to this window
    window_model_evals: int = 0
    window_noise_evals: int = 0


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    t: int = 0


def adam_step(params: np.ndarray, gradient: np.ndarray, state: AdamState):
    """One bias-corrected Adam step in the ASCENT direction."""
    g = np.asarray(gradient, dtype=float)
    if state.m is None:
        state.m = np.zeros_like(g)
        state.v = np.zeros_like(g)
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    new_params = params + state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return new_params, state


def _fmt(x: float) -> str:
    return repr(float(x))


def write_curve(points: Sequence[CurvePoint], path: str) -> None:
    lines = [",".join(CURVE_COLUMNS)]
    for p in points:
        lines.append(
            f"{p.epoch},{p.evals},{_fmt(p.seconds)},{_fmt(p.dev_ll_per_stream)},{_fmt(p.train_obj)}"
        )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def draw_stream_noise(
    q: CoarseNoiseModel,
    stream: EventStream,
    M: float,
    rng: np.random.Generator,
    counter: EvalCounter,
    fractional_threshold: float = 0.05,
):
    """Draw noise on every inter-event segment of the stream.

    Returns (samples, n_proposals). Zero-length segments (tied external
    timestamps) are skipped. A Poisson q takes a whole-horizon fast path:
    its bound is the same constant on every segment and every proposal has
    acceptance ratio exactly 1, so the per-segment draws are jointly one
    homogeneous process on [0, T) with weight-1 samples - same law, one call.
    """
    if q.is_poisson and M > 0:
        return _draw_stream_noise_poisson(q, stream, M, rng, counter)
    before = counter.noise_evals
    samples = []
    times, types = stream.times, stream.types
    edges = [0.0] + [float(t) for t in times] + [stream.T]
    for i in range(len(edges) - 1):
        t0, t1 = edges[i], edges[i + 1]
        if t1 <= t0:
            continue
        prefix = (times[:i], types[:i])
        samples.extend(
            draw_noise_samples(q, t0, t1, prefix, M, rng, counter, fractional_threshold)
        )
    n_proposals = (counter.noise_evals - before) // q.C
    return samples, n_proposals


def _draw_stream_noise_poisson(
    q: CoarseNoiseModel,
    stream: EventStream,
    M: float,
    rng: np.random.Generator,
    counter: EvalCounter,
):
    rates = np.asarray(q.coarse, dtype=np.float64)
    lam_bar = float(rates.sum())
    if lam_bar <= 0.0:
        return [], 0
    rate = M * lam_bar
    expected = rate * stream.T
    block = max(4, int(expected + 8.0 * np.sqrt(expected) + 8.0))
    cum = np.cumsum(-np.log1p(-rng.random(block)) / rate)
    while cum[-1] < stream.T:
        more = -np.log1p(-rng.random(block)) / rate
        cum = np.concatenate([cum, cum[-1] + np.cumsum(more)])
    ts = cum[(cum < stream.T) & (cum > 0.0)]
    if len(stream):
        ts = ts[~np.isin(ts, stream.times)]  # exact collisions are cache poison
    P = int(ts.size)
    counter.noise_evals += q.C * P
    if P == 0:
        return [], 0
    cum_r = np.cumsum(rates)
    u_c = rng.random(P) * lam_bar
    c_idx = np.minimum((u_c[:, None] >= cum_r[None, :]).sum(axis=1), q.C - 1)
    u_k = rng.random(P)
    k_idx = np.empty(P, dtype=np.int64)
    for c in np.unique(c_idx):
        sel = c_idx == c
        members = q._members[c]
        pos = np.searchsorted(q._member_cum[c], u_k[sel], side="right")
        k_idx[sel] = members[np.minimum(pos, members.size - 1)]
    lamq = q.refine_probs[k_idx] * rates[c_idx]
    samples = [
        NoiseSample(float(t), int(k), float(lq), 1.0)
        for t, k, lq in zip(ts, k_idx, lamq)
    ]
    return samples, P


def train(
    model: HawkesExpModel,
    q: Optional[CoarseNoiseModel],
    train_data: Dataset,
    dev_data: Dataset,
    config: TrainConfig,
    curve_path: Optional[str] = None,
    checkpoint_dir: Optional[str] = None,
):
    """Train and return (best-dev model, learning-curve points).

    The returned model carries the parameters of the best dev evaluation seen
    (the initial model if nothing improved). Early stop after `patience`
    consecutive evaluations without a new best.
    """
    if config.objective == "nce" and q is None:
        raise ValueError("NCE training requires a fitted noise model q")
    if not train_data.streams or not dev_data.streams:
        raise ValueError("train_data and dev_data must be nonempty")

    model = model.copy()
    n = len(train_data.streams)
    shuffle_rng = np.random.default_rng(config.seed)
    stream_rngs = [np.random.default_rng(config.seed ^ i) for i in range(n)]
    cache = None
    if config.objective == "nce" and config.redraw == "never":
        cache = NoiseCache(config.M, noise_model_fingerprint(q), config.seed)

    adam = AdamState(config.learning_rate, config.beta1, config.beta2, config.epsilon)
    params = model.get_raw()
    total = EvalCounter()
    cum_seconds = 0.0
    win = {"events": 0, "samples": 0, "proposals": 0, "model": 0, "noise": 0}

    def dev_ll() -> float:
        return sum(exact_loglik(model, s) for s in dev_data.streams) / len(dev_data.streams)

    def stream_report(idx: int):
        stream = train_data.streams[idx]
        local = EvalCounter()
        if config.objective == "mle":
            rep = mle_objective(model, stream, config.rho, stream_rngs[idx], local)
            return rep, 0, local
        if cache is not None:
            hit = cache.get(idx)
            if hit is not None:
                samples, props = hit
            else:
                samples, props = draw_stream_noise(
                    q, stream, config.M, stream_rngs[idx], local, config.fractional_threshold
                )
                cache.put(idx, samples, props)
        else:
            samples, props = draw_stream_noise(
                q, stream, config.M, stream_rngs[idx], local, config.fractional_threshold
            )
        rep = nce_objective(model, q, stream, samples, config.M, local)
        return rep, props, local

    def flush(points) -> None:
        if curve_path:
            write_curve(points, curve_path)

    def checkpoint(epoch: int) -> None:
        if checkpoint_dir:
            os.makedirs(checkpoint_dir, exist_ok=True)
            save_model(model, os.path.join(checkpoint_dir, f"model_epoch{epoch:05d}.json"))

    points = [CurvePoint(0, 0, 0.0, dev_ll(), float("nan"))]
    flush(points)
    checkpoint(0)
    best_ll = points[0].dev_ll_per_stream
    best_raw = params.copy()
    evals_since_best = 0

    pool = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
    try:
        for epoch in range(1, config.max_epochs + 1):
            t0 = time.perf_counter()
            perm = shuffle_rng.permutation(n)
            epoch_obj = 0.0
            for bi, start in enumerate(range(0, n, config.batch_size)):
                batch = [int(i) for i in perm[start : start + config.batch_size]]
                if pool is not None:
                    results = list(pool.map(stream_report, batch))
                else:
                    results = [stream_report(i) for i in batch]
                grad = np.zeros(model.n_raw)
                val = 0.0
                for rep, props, local in results:
                    grad += rep.gradient
                    val += rep.value
                    total.merge(local)
                    win["events"] += rep.event_count
                    win["samples"] += rep.sample_count
                    win["proposals"] += props
                    win["model"] += local.model_evals
                    win["noise"] += local.noise_evals
                if not (np.isfinite(val) and np.all(np.isfinite(grad))):
                    raise RuntimeError(
                        f"divergence guard: non-finite training objective at epoch {epoch}, "
                        f"minibatch {bi} (streams {batch}): value={val}, "
                        f"|grad|={np.abs(grad).max() if grad.size else 0.0}"
                    )
                epoch_obj += val
                params, adam = adam_step(params, grad, adam)
                model.set_raw(params)
            cum_seconds += time.perf_counter() - t0

            if epoch % config.eval_every == 0:
                d = dev_ll()
                points.append(
                    CurvePoint(
                        epoch,
                        total.total,
                        cum_seconds,
                        d,
                        epoch_obj,
                        win["events"],
                        win["samples"],
                        win["proposals"],
                        win["model"],
                        win["noise"],
                    )
                )
                win = {k: 0 for k in win}
                flush(points)
                checkpoint(epoch)
                if d > best_ll:
                    best_ll = d
                    best_raw = params.copy()
                    evals_since_best = 0
                else:
                    evals_since_best += 1
                    if evals_since_best >= config.patience:
                        break
    finally:
        if pool is not None:
            pool.shutdown(wait=True)

    model.set_raw(best_raw)
    return model, points
