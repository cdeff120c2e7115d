"""Window anomaly scores, threshold calibration and detection."""
from __future__ import annotations

import json
import math
from fractions import Fraction
import time
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import ConfigError, ShapeMismatch
from .lstm_ae import ModelBundle, reconstruct
from .preprocess import WindowBatch

PERCENTILE = 99.99


@dataclass(frozen=True)
class ThresholdRecord:
    can_id: int
    threshold: float
    calibration_score_count: int
    percentile: float = PERCENTILE

    def to_dict(self) -> dict:
        return {"can_id": self.can_id, "threshold": self.threshold,
                "calibration_score_count": self.calibration_score_count,
                "percentile": self.percentile}

    @classmethod
    def from_dict(cls, d) -> "ThresholdRecord":
        return cls(int(d["can_id"]), float(d["threshold"]),
                   int(d["calibration_score_count"]), float(d["percentile"]))


@dataclass(frozen=True)
class WindowVerdict:
    can_id: int
    start: int             # window position in the ID's vector sequence
    source_first: int
    source_last: int
    t_first: float
    score: float
    anomalous: bool

    def to_dict(self) -> dict:
        return {"id": f"0x{self.can_id:X}", "start": self.start,
                "source_first": self.source_first, "source_last": self.source_last,
                "t_first": self.t_first, "score": self.score, "anomalous": self.anomalous}

    @classmethod
    def from_dict(cls, d) -> "WindowVerdict":
        return cls(int(d["id"], 16), int(d["start"]), int(d["source_first"]),
                   int(d["source_last"]), float(d["t_first"]), float(d["score"]),
                   bool(d["anomalous"]))


@dataclass(frozen=True)
class TimingBlock:
    seconds: float          # forward pass + scoring only
    packets: int
    seconds_inclusive: float | None = None   # incl. vectorization / I/O, when known


@dataclass
class Detection:
    verdicts: list[WindowVerdict]
    timing: TimingBlock


def anomaly_score(reconstruction, source) -> float:
    """Squared l2 norm of the flattened reconstruction error."""
    r = np.asarray(reconstruction, dtype=np.float64)
    s = np.asarray(source, dtype=np.float64)
    if r.shape != s.shape:
        raise ShapeMismatch(f"{r.shape} vs {s.shape}")
    return float(np.sum((r - s) ** 2))


def window_scores(reconstruction, source) -> np.ndarray:
    """Per-window scores for ``(W, n, k)`` stacks."""
    r = np.asarray(reconstruction, dtype=np.float64)
    s = np.asarray(source, dtype=np.float64)
    if r.shape != s.shape:
        raise ShapeMismatch(f"{r.shape} vs {s.shape}")
    return np.sum((r - s) ** 2, axis=tuple(range(1, r.ndim)))


def nearest_rank(scores, percentile: float = PERCENTILE) -> float:
    """Nearest-rank percentile: sorted ascending, 1-based rank ceil(p/100 * m)."""
    s = np.sort(np.asarray(scores, dtype=np.float64).reshape(-1))
    m = len(s)
    if m == 0:
        raise ConfigError("cannot take a percentile of no scores")
    # exact decimal arithmetic: 0.9999 * 10000 is 9999.000000000002 in floats
    rank = math.ceil(Fraction(repr(float(percentile))) * m / 100)
    return float(s[min(max(rank, 1), m) - 1])


def score_batch(bundle: ModelBundle, windows: np.ndarray, chunk: int = 512) -> np.ndarray:
    out = np.empty(len(windows))
    for s in range(0, len(windows), chunk):
        x = windows[s:s + chunk]
        out[s:s + len(x)] = window_scores(reconstruct(bundle.params, x), x)
    return out


def calibrate_threshold(bundle: ModelBundle, calib: WindowBatch | np.ndarray) -> ThresholdRecord:
    windows = getattr(calib, "windows", calib)
    if isinstance(calib, WindowBatch) and calib.tampered.any():
        raise ConfigError("calibration windows must be untampered")
    if len(windows) == 0:
        raise ConfigError(f"id {bundle.can_id:#x}: empty calibration batch")
    _check_k(bundle, windows)
    scores = score_batch(bundle, windows)
    return ThresholdRecord(bundle.can_id, nearest_rank(scores), len(scores))


def _check_k(bundle, windows):
    if windows.ndim != 3 or windows.shape[2] != bundle.k:
        raise ShapeMismatch(f"id {bundle.can_id:#x}: model k={bundle.k}, "
                            f"windows shape {windows.shape}")


def detect(bundle: ModelBundle, batch: WindowBatch, threshold: float | None = None,
           batch_size: int = 1) -> Detection:
    """Score tumbling test windows; ``score > threshold`` is anomalous.

    Windows are served ``batch_size`` at a time (1 = as they would arrive at
    runtime). The timing block covers the forward pass and scoring only.
    """
    if threshold is None:
        if bundle.threshold is None:
            raise ConfigError(f"id {bundle.can_id:#x}: model has no calibrated threshold")
        threshold = bundle.threshold.threshold
    windows = batch.windows
    if len(windows):
        _check_k(bundle, windows)
    windows = windows.astype(bundle.params["enc_dense.W"].dtype)
    scores = np.empty(len(windows))
    params = bundle.params
    t0 = time.perf_counter()
    for s in range(0, len(windows), batch_size):
        x = windows[s:s + batch_size]
        scores[s:s + len(x)] = window_scores(reconstruct(params, x), x)
    elapsed = time.perf_counter() - t0
    verdicts = [WindowVerdict(bundle.can_id, int(batch.start[i]), int(batch.source_first[i]),
                              int(batch.source_last[i]), float(batch.t_first[i]),
                              float(scores[i]), bool(scores[i] > threshold))
                for i in range(len(windows))]
    return Detection(verdicts, TimingBlock(elapsed, len(windows) * batch.n))


def write_verdicts(verdicts: Iterable[WindowVerdict], fh) -> None:
    fh.write(json.dumps({"format": "candito-verdicts", "version": 1}) + "\n")
    for v in verdicts:
        fh.write(json.dumps(v.to_dict()) + "\n")


def read_verdicts(fh) -> list[WindowVerdict]:
    lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines or json.loads(lines[0]).get("format") != "candito-verdicts":
        raise ConfigError("not a verdict file")
    return [WindowVerdict.from_dict(json.loads(ln)) for ln in lines[1:]]
