"""Event streams and datasets: construction, JSONL serialization, splitting.

A stream is a time-sorted sequence of (time, type) tokens observed on a
window [0, T). A dataset bundles streams with the type-vocabulary size K and
an optional hard partition of the K types into C coarse clusters.

File format (JSONL): line 1 is a header record
    {"K": <int>, "C": <int optional>, "partition": [<coarse_id per type>] optional}
and every following line is one stream
    {"T": <float>, "events": [[<time>, <type_id>], ...]}
with the event arrays sorted by time. Files produced by `save_dataset`
round-trip byte-for-byte through load -> save.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

__all__ = [
    "Event",
    "EventStream",
    "Dataset",
    "load_dataset",
    "save_dataset",
    "split_dataset",
]


@dataclass(frozen=True)
class Event:
    time: float
    type_id: int


class EventStream:
    """Immutable time-sorted event sequence on [0, T).

    Times must be non-decreasing; ties never arise from the samplers in this
    package (continuous-time draws are almost surely distinct) but are
    tolerated here so that external files can be loaded after a warning.
    """

    __slots__ = ("T", "times", "types")

    def __init__(self, T: float, times, types):
        T = float(T)
        times = np.ascontiguousarray(times, dtype=np.float64)
        types = np.ascontiguousarray(types, dtype=np.int64)
        if T <= 0.0:
            raise ValueError(f"horizon must be positive, got T={T}")
        if times.ndim != 1 or types.ndim != 1 or times.shape != types.shape:
            raise ValueError("times and types must be 1-d arrays of equal length")
        if times.size:
            if times[0] < 0.0:
                raise ValueError(f"event time {times[0]} is negative")
            if np.any(np.diff(times) < 0.0):
                i = int(np.argmax(np.diff(times) < 0.0)) + 1
                raise ValueError(f"events not sorted by time at position {i}")
            if times[-1] >= T:
                raise ValueError(
                    f"event time >= horizon: time {times[-1]} with T={T}"
                )
            if np.any(types < 0):
                raise ValueError("negative type_id")
        times.setflags(write=False)
        types.setflags(write=False)
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "types", types)

    def __setattr__(self, name, value):
        raise AttributeError("EventStream is immutable")

    def __len__(self) -> int:
        return int(self.times.size)

    def __iter__(self) -> Iterator[Event]:
        for t, k in zip(self.times, self.types):
            yield Event(float(t), int(k))

    @property
    def events(self) -> list[Event]:
        return list(self)

    def __repr__(self) -> str:
        return f"EventStream(T={self.T}, n={len(self)})"


class Dataset:
    """A collection of streams over a shared vocabulary of K event types."""

    __slots__ = ("K", "streams", "partition", "C")

    def __init__(self, K: int, streams: Sequence[EventStream], partition=None, C=None):
        K = int(K)
        if K <= 0:
            raise ValueError(f"K must be positive, got {K}")
        streams = tuple(streams)
        for i, s in enumerate(streams):
            if len(s) and int(s.types.max()) >= K:
                bad = int(np.argmax(s.types >= K))
                raise ValueError(
                    f"stream {i}: event {bad} has type_id {int(s.types[bad])} >= K={K}"
                )
        if partition is not None:
            partition = np.ascontiguousarray(partition, dtype=np.int64)
            if partition.shape != (K,):
                raise ValueError(
                    f"partition must map all {K} types, got shape {partition.shape}"
                )
            C = int(C) if C is not None else int(partition.max()) + 1
            if partition.min() < 0 or partition.max() >= C:
                raise ValueError(f"partition has coarse_id outside [0, {C})")
            partition.setflags(write=False)
        else:
            C = int(C) if C is not None else None
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "streams", streams)
        object.__setattr__(self, "partition", partition)
        object.__setattr__(self, "C", C)

    def __setattr__(self, name, value):
        raise AttributeError("Dataset is immutable")

    def __len__(self) -> int:
        return len(self.streams)

    def __iter__(self) -> Iterator[EventStream]:
        return iter(self.streams)

    @property
    def n_events(self) -> int:
        return int(sum(len(s) for s in self.streams))

    @property
    def total_time(self) -> float:
        return float(sum(s.T for s in self.streams))

    def __repr__(self) -> str:
        return f"Dataset(K={self.K}, streams={len(self)}, events={self.n_events})"


def _dumps(obj) -> str:
    # Fixed separators so serialization is a pure function of the values.
    return json.dumps(obj, separators=(",", ":"))


def save_dataset(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        header: dict = {"K": dataset.K}
        if dataset.partition is not None:
            header["C"] = dataset.C
            header["partition"] = dataset.partition.tolist()
        fh.write(_dumps(header) + "\n")
        for s in dataset.streams:
            rec = {
                "T": s.T,
                "events": [[t, k] for t, k in zip(s.times.tolist(), s.types.tolist())],
            }
            fh.write(_dumps(rec) + "\n")


def load_dataset(path) -> Dataset:
    """Load a JSONL dataset, validating every stream invariant.

    Duplicate timestamps in an external file are kept in file order after a
    warning; any other invariant violation is an error naming the stream and
    the offending event.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty file, expected a header record")

    def parse(line_no: int, text: str):
        try:
            return json.loads(text)
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}: parse error at line {line_no}: {e}") from e

    header = parse(1, lines[0])
    if not isinstance(header, dict) or "K" not in header:
        raise ValueError(f"{path}: line 1 must be a header record with 'K'")
    K = int(header["K"])
    partition = header.get("partition")
    C = header.get("C")

    streams = []
    for line_no, text in enumerate(lines[1:], start=2):
        if not text.strip():
            continue
        rec = parse(line_no, text)
        idx = len(streams)
        if not isinstance(rec, dict) or "T" not in rec or "events" not in rec:
            raise ValueError(f"{path}: line {line_no}: stream record needs 'T' and 'events'")
        ev = rec["events"]
        times = np.array([e[0] for e in ev], dtype=np.float64)
        types = np.array([e[1] for e in ev], dtype=np.int64)
        if times.size and np.any(np.diff(times) == 0.0):
            j = int(np.argmax(np.diff(times) == 0.0)) + 1
            warnings.warn(
                f"{path}: stream {idx}: duplicate timestamp {times[j]} at event {j}; "
                "keeping file order"
            )
        try:
            streams.append(EventStream(rec["T"], times, types))
        except ValueError as e:
            raise ValueError(f"{path}: stream {idx}: {e}") from e

    return Dataset(K, streams, partition=partition, C=C)


def split_dataset(
    dataset: Dataset, train_frac: float, dev_frac: float, seed: int
) -> tuple[Dataset, Dataset, Dataset]:
    """Deterministic train/dev/test split by stream count.

    Streams are shuffled by `seed`, then cut at floor(n * train_frac) and
    floor(n * dev_frac); the remainder is the test split. The three parts
    cover the input exactly once.
    """
    if train_frac <= 0 or dev_frac <= 0:
        raise ValueError("split fractions must be positive")
    if train_frac + dev_frac > 1.0 + 1e-12:
        raise ValueError("split fractions must sum to at most 1")
    n = len(dataset)
    if n < 3:
        raise ValueError(f"need at least 3 streams to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(n * train_frac)
    n_dev = int(n * dev_frac)
    parts = (perm[:n_train], perm[n_train : n_train + n_dev], perm[n_train + n_dev :])
    make = lambda idxs: Dataset(
        dataset.K,
        [dataset.streams[i] for i in idxs],
        partition=dataset.partition,
        C=dataset.C,
    )
    return make(parts[0]), make(parts[1]), make(parts[2])
