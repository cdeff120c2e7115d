"""Window ground truth, confusion accounting and the detection metrics
(DR, FPR, F1, MCC, TTP)."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .detector import TimingBlock, WindowVerdict
from .errors import AlignmentError, ConfigError
from .preprocess import WindowBatch

CSV_COLUMNS = ("id", "DR", "FPR", "F1", "MCC", "TTP", "tp", "fp", "tn", "fn")


def label_windows(batch: WindowBatch, removed_timestamps: Sequence[float] = ()) -> np.ndarray:
    """Ground truth per window: positive iff any member frame is tampered.

    Dropped frames leave no frame to carry a flag; a removed timestamp marks
    the window that spans it, i.e. falls in (previous window's last frame,
    this window's last frame] for back-to-back windows, or in
    [first frame, last frame] otherwise.
    """
    labels = np.asarray(batch.tampered, dtype=bool).copy()
    if len(removed_timestamps) and len(batch):
        gone = np.sort(np.asarray(removed_timestamps, dtype=np.float64))
        lo = np.asarray(batch.t_first, dtype=np.float64).copy()
        open_lo = np.zeros(len(batch), dtype=bool)
        follows = np.r_[False, batch.start[1:] == batch.start[:-1] + batch.n]
        lo[follows] = batch.t_last[:-1][follows[1:]]
        open_lo[follows] = True
        first = np.where(open_lo, np.searchsorted(gone, lo, side="right"),
                         np.searchsorted(gone, lo, side="left"))
        last = np.searchsorted(gone, batch.t_last, side="right")
        labels |= last > first
    return labels


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)


def confusion(predicted, actual) -> ConfusionCounts:
    """2x2 counts for aligned boolean window vectors."""
    if len(predicted) and isinstance(predicted[0], WindowVerdict):
        predicted = [v.anomalous for v in predicted]
    p = np.asarray(predicted, dtype=bool).reshape(-1)
    a = np.asarray(actual, dtype=bool).reshape(-1)
    if len(p) != len(a):
        raise AlignmentError(f"{len(p)} verdicts vs {len(a)} labels")
    return ConfusionCounts(int(np.sum(p & a)), int(np.sum(p & ~a)),
                           int(np.sum(~p & ~a)), int(np.sum(~p & a)))


@dataclass(frozen=True)
class Metrics:
    dr: float
    fpr: float
    f1: float
    mcc: float
    undefined: tuple[str, ...] = ()


def metrics(c: ConfusionCounts) -> Metrics:
    """Zero denominators give 0 and are listed in ``undefined``."""
    if c.total == 0:
        raise ConfigError("no windows to score")
    undefined = []

    def ratio(name, num, den):
        if den == 0:
            undefined.append(name)
            return 0.0
        return num / den

    dr = ratio("dr", c.tp, c.tp + c.fn)
    fpr = ratio("fpr", c.fp, c.fp + c.tn)
    f1 = ratio("f1", 2 * c.tp, 2 * c.tp + c.fp + c.fn)
    den = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    mcc = ratio("mcc", c.tp * c.tn - c.fp * c.fn, math.sqrt(den))
    return Metrics(dr, fpr, f1, mcc, tuple(undefined))


def measure_ttp(blocks: Iterable[TimingBlock], inclusive: bool = False) -> float:
    """Seconds per packet, pooled over blocks (total time / total packets)."""
    blocks = list(blocks)
    if not blocks:
        raise ConfigError("no timing blocks")
    packets = sum(b.packets for b in blocks)
    if packets == 0:
        raise ConfigError("timing blocks cover zero packets")
    if inclusive:
        if any(b.seconds_inclusive is None for b in blocks):
            raise ConfigError("inclusive timing not recorded for every block")
        return sum(b.seconds_inclusive for b in blocks) / packets
    return sum(b.seconds for b in blocks) / packets


def align(verdicts: Sequence[WindowVerdict], batch: WindowBatch) -> np.ndarray:
    """Predicted flags for ``batch``, checking verdicts line up window for window."""
    if len(verdicts) != len(batch):
        raise AlignmentError(f"{len(verdicts)} verdicts vs {len(batch)} windows")
    starts = np.fromiter((v.start for v in verdicts), dtype=np.int64, count=len(verdicts))
    if not np.array_equal(starts, batch.start):
        bad = int(np.argmax(starts != batch.start))
        raise AlignmentError(f"verdict {bad} starts at {starts[bad]}, "
                             f"window starts at {batch.start[bad]}")
    return np.fromiter((v.anomalous for v in verdicts), dtype=bool, count=len(verdicts))


@dataclass
class EvalReport:
    per_id: dict[int, ConfusionCounts]
    ttp: float | None = None
    ttp_inclusive: float | None = None
    dataset: str = ""
    model_digests: dict[int, str] = field(default_factory=dict)

    @property
    def aggregate(self) -> ConfusionCounts:
        total = ConfusionCounts()
        for c in self.per_id.values():
            total = total + c
        return total

    @property
    def metrics(self) -> Metrics:
        return metrics(self.aggregate)

    def to_dict(self) -> dict:
        def row(c):
            m = metrics(c)
            return asdict(c) | {"dr": m.dr, "fpr": m.fpr, "f1": m.f1, "mcc": m.mcc,
                                "undefined": list(m.undefined)}
        return {"format": "candito-report", "version": 1, "dataset": self.dataset,
                "ttp_seconds": self.ttp, "ttp_inclusive_seconds": self.ttp_inclusive,
                "ttp_scope": "forward pass and scoring only",
                "model_digests": {f"0x{k:X}": v for k, v in self.model_digests.items()},
                "per_id": {f"0x{k:X}": row(c) for k, c in sorted(self.per_id.items())},
                "aggregate": row(self.aggregate)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        rows = [(f"0x{k:X}", c) for k, c in sorted(self.per_id.items())]
        for label, c in rows + [("all", self.aggregate)]:
            m = metrics(c)
            w.writerow([label, m.dr, m.fpr, m.f1, m.mcc, "" if self.ttp is None else self.ttp,
                        c.tp, c.fp, c.tn, c.fn])
        return buf.getvalue()


def evaluate(verdicts: Mapping[int, Sequence[WindowVerdict]], batches: Mapping[int, WindowBatch],
             removed: Mapping[int, Sequence[float]] | None = None,
             timing: Iterable[TimingBlock] = (), dataset: str = "",
             model_digests: Mapping[int, str] | None = None) -> EvalReport:
    """Per-ID confusion counts from verdicts and the labeled windows they scored."""
    removed = removed or {}
    if set(verdicts) != set(batches):
        raise AlignmentError(f"verdict ids {sorted(verdicts)} != window ids {sorted(batches)}")
    per_id = {}
    for cid, batch in batches.items():
        pred = align(verdicts[cid], batch)
        per_id[cid] = confusion(pred, label_windows(batch, removed.get(cid, ())))
    timing = list(timing)
    ttp = measure_ttp(timing) if timing else None
    incl = (measure_ttp(timing, inclusive=True)
            if timing and all(b.seconds_inclusive is not None for b in timing) else None)
    return EvalReport(per_id, ttp, incl, dataset, dict(model_digests or {}))
