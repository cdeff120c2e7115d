"""Per-ID signal vectors and the sliding / tumbling window batches fed to the
autoencoder."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import IneligibleError
from .signals import SignalLayout, extract_values
from .trace import IdStream

WINDOW = 40


@dataclass(frozen=True, eq=False)
class SignalVectors:
    """One row per frame: k physical signals min-max rescaled and clamped to [0, 1]."""
    values: np.ndarray          # (N, k)
    source_index: np.ndarray    # (N,) index of the frame in its parent trace
    timestamps: np.ndarray      # (N,)
    tampered: np.ndarray        # (N,)

    def __len__(self):
        return len(self.values)

    @property
    def k(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class WindowBatch:
    windows: np.ndarray         # (W, n, k)
    start: np.ndarray           # (W,) position of the first row in the vector sequence
    source_first: np.ndarray    # (W,) parent-trace index of first / last member frame
    source_last: np.ndarray
    t_first: np.ndarray         # (W,) timestamps of first / last member frame
    t_last: np.ndarray
    tampered: np.ndarray        # (W,) any member frame tampered
    n: int = WINDOW

    def __len__(self):
        return len(self.windows)

    @property
    def k(self) -> int:
        return self.windows.shape[2]

    @classmethod
    def concat(cls, batches: Sequence["WindowBatch"]) -> "WindowBatch":
        batches = [b for b in batches if len(b)] or list(batches[:1])
        if not batches:
            raise ValueError("nothing to concatenate")
        cat = lambda name: np.concatenate([getattr(b, name) for b in batches])
        return cls(cat("windows"), cat("start"), cat("source_first"), cat("source_last"),
                   cat("t_first"), cat("t_last"), cat("tampered"), batches[0].n)


def vectorize(stream: IdStream, layout: SignalLayout) -> SignalVectors:
    phys = layout.physical
    if not phys:
        raise IneligibleError(f"id {layout.can_id:#x} has no physical signals")
    cols = []
    for r in phys:
        span = r.max_observed - r.min_observed
        assert span > 0, "constant physical ranges are demoted when bounds are taken"
        raw = extract_values(stream.payload, r.start_bit, r.length).astype(np.float64)
        cols.append(np.clip((raw - r.min_observed) / span, 0.0, 1.0))
    values = np.stack(cols, axis=1) if len(stream) else np.zeros((0, len(phys)))
    return SignalVectors(values, np.asarray(stream.indices), np.asarray(stream.timestamps),
                         np.asarray(stream.tampered))


def _batch(vec: SignalVectors, starts: np.ndarray, n: int) -> WindowBatch:
    k = vec.values.shape[1]
    if len(starts):
        rows = starts[:, None] + np.arange(n)[None, :]
        windows = vec.values[rows]
        tampered = vec.tampered[rows].any(axis=1)
        last = starts + n - 1
    else:
        windows = np.zeros((0, n, k))
        tampered = np.zeros(0, dtype=bool)
        last = starts
    return WindowBatch(windows, starts, vec.source_index[starts], vec.source_index[last],
                       vec.timestamps[starts], vec.timestamps[last], tampered, n)


def sliding_windows(vec: SignalVectors, n: int = WINDOW, stride: int = 1) -> WindowBatch:
    if n < 1 or stride < 1:
        raise ValueError("window length and stride must be >= 1")
    starts = np.arange(0, max(len(vec) - n + 1, 0), stride)
    return _batch(vec, starts, n)


def tumbling_windows(vec: SignalVectors, n: int = WINDOW) -> WindowBatch:
    if n < 1:
        raise ValueError("window length must be >= 1")
    starts = np.arange(len(vec) // n) * n
    return _batch(vec, starts, n)
