"""Shared test utilities: finite differences and random small instances."""

from __future__ import annotations

import numpy as np

from ctnce.event_streams import EventStream
from ctnce.intensity_models import HawkesExpModel, softplus_inv


def central_fd(f, raw: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of the raw vector."""
    raw = np.asarray(raw, dtype=float)
    out = np.zeros_like(raw)
    for j in range(raw.size):
        hi, lo = raw.copy(), raw.copy()
        hi[j] += h
        lo[j] -= h
        out[j] = (f(hi) - f(lo)) / (2.0 * h)
    return out


def rel_err(approx: np.ndarray, ref: np.ndarray) -> float:
    ref_norm = float(np.linalg.norm(ref))
    return float(np.linalg.norm(np.asarray(approx) - np.asarray(ref))) / max(ref_norm, 1e-12)


def model_from_linked(mu, alpha, beta, shared_beta: bool = False) -> HawkesExpModel:
    """Build a model whose LINKED parameters equal the given positive values."""
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    K = mu.size
    alpha = np.asarray(alpha, dtype=float).reshape(K, K)
    if shared_beta:
        raw_beta = np.array([softplus_inv(float(np.asarray(beta).ravel()[0]))])
    else:
        raw_beta = softplus_inv(np.asarray(beta, dtype=float).reshape(K, K))
    return HawkesExpModel(K, softplus_inv(mu), softplus_inv(alpha), raw_beta, shared_beta)


def random_instance(rng: np.random.Generator, max_K: int = 3, max_events: int = 10):
    """A random small (model, stream) pair for gradient suites."""
    K = int(rng.integers(1, max_K + 1))
    mu = rng.uniform(0.2, 1.5, size=K)
    alpha = rng.uniform(0.05, 0.6, size=(K, K))
    beta = rng.uniform(0.7, 2.5, size=(K, K))
    model = model_from_linked(mu, alpha, beta)
    T = float(rng.uniform(2.0, 6.0))
    n = int(rng.integers(0, max_events + 1))
    times = np.sort(rng.uniform(0.0, T * 0.95, size=n))
    types = rng.integers(0, K, size=n)
    return model, EventStream(T, times, types)
