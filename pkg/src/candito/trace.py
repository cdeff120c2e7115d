"""CAN trace data model and the labeled CSV format.

A :class:`Trace` is stored column-wise (numpy arrays) so that per-ID
statistics and vectorization stay cheap on 100k+ frame captures. Payloads are
kept as an ``(N, 8)`` uint8 matrix, zero-padded past each frame's DLC.

CSV layout (header required)::

    timestamp,id,dlc,payload,isTampered
    0.000123,0x1D0,8,11 22 33 44 55 66 77 88,0

``isTampered`` is optional on input and always written on output.
"""
from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass
from typing import Iterable, Iterator, TextIO

import numpy as np

from .errors import InsufficientDataError, TraceOrderError, TraceParseError

MAX_DLC = 8
MAX_ID = 1 << 29
HEADER = ("timestamp", "id", "dlc", "payload", "isTampered")

_HEX_RE = re.compile(r"^[0-9A-Fa-f]*$")


@dataclass(frozen=True)
class CanFrame:
    timestamp: float
    can_id: int
    dlc: int
    payload: bytes
    tampered: bool = False

    def __post_init__(self):
        if not 0 <= self.dlc <= MAX_DLC:
            raise ValueError(f"dlc {self.dlc} outside 0..8")
        if len(self.payload) != self.dlc:
            raise ValueError(f"payload length {len(self.payload)} != dlc {self.dlc}")
        if not 0 <= self.can_id < MAX_ID:
            raise ValueError(f"can_id {self.can_id:#x} outside 29-bit range")
        if not (self.timestamp >= 0 and np.isfinite(self.timestamp)):
            raise ValueError(f"bad timestamp {self.timestamp!r}")


def _frozen(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


class Trace:
    """Immutable, time-ordered sequence of CAN frames."""

    def __init__(self, timestamps, ids, dlc, payload, tampered=None,
                 source_label: str = "", *, validate: bool = True):
        timestamps = np.asarray(timestamps, dtype=np.float64).reshape(-1)
        n = len(timestamps)
        ids = np.asarray(ids, dtype=np.int64).reshape(n)
        dlc = np.asarray(dlc, dtype=np.int8).reshape(n)
        payload = np.asarray(payload, dtype=np.uint8).reshape(n, MAX_DLC)
        if tampered is None:
            tampered = np.zeros(n, dtype=bool)
        tampered = np.asarray(tampered, dtype=bool).reshape(n)
        if validate:
            _check_columns(timestamps, ids, dlc, payload)
        self.timestamps = _frozen(timestamps)
        self.ids = _frozen(ids)
        self.dlc = _frozen(dlc)
        self.payload = _frozen(payload)
        self.tampered = _frozen(tampered)
        self.source_label = source_label

    @classmethod
    def empty(cls, source_label=""):
        return cls(np.zeros(0), np.zeros(0), np.zeros(0),
                   np.zeros((0, MAX_DLC)), source_label=source_label)

    @classmethod
    def from_frames(cls, frames: Iterable[CanFrame], source_label=""):
        frames = list(frames)
        payload = np.zeros((len(frames), MAX_DLC), dtype=np.uint8)
        for i, f in enumerate(frames):
            payload[i, :f.dlc] = np.frombuffer(f.payload, dtype=np.uint8)
        return cls([f.timestamp for f in frames], [f.can_id for f in frames],
                   [f.dlc for f in frames], payload,
                   [f.tampered for f in frames], source_label)

    def __len__(self):
        return len(self.timestamps)

    def __getitem__(self, i) -> CanFrame:
        d = int(self.dlc[i])
        return CanFrame(float(self.timestamps[i]), int(self.ids[i]), d,
                        self.payload[i, :d].tobytes(), bool(self.tampered[i]))

    def __iter__(self) -> Iterator[CanFrame]:
        return (self[i] for i in range(len(self)))

    @property
    def frames(self) -> list[CanFrame]:
        return list(self)

    def __eq__(self, other):
        # frame content only; source_label is provenance, not data
        if not isinstance(other, Trace):
            return NotImplemented
        return (len(self) == len(other)
                and np.array_equal(self.timestamps, other.timestamps)
                and np.array_equal(self.ids, other.ids)
                and np.array_equal(self.dlc, other.dlc)
                and np.array_equal(self.payload, other.payload)
                and np.array_equal(self.tampered, other.tampered))

    def __repr__(self):
        return f"Trace({len(self)} frames, label={self.source_label!r})"

    @property
    def span(self) -> tuple[float, float]:
        if not len(self):
            return (0.0, 0.0)
        return float(self.timestamps[0]), float(self.timestamps[-1])

    def unique_ids(self) -> list[int]:
        return [int(i) for i in np.unique(self.ids)]

    def take(self, index, source_label=None) -> "Trace":
        """Sub-trace of the given (sorted) row indices or boolean mask."""
        return Trace(self.timestamps[index], self.ids[index], self.dlc[index],
                     self.payload[index], self.tampered[index],
                     self.source_label if source_label is None else source_label,
                     validate=False)

    def between(self, t0: float, t1: float) -> "Trace":
        """Frames with ``t0 <= timestamp < t1``."""
        lo, hi = np.searchsorted(self.timestamps, [t0, t1], side="left")
        return self.take(slice(lo, hi))


def _check_columns(ts, ids, dlc, payload):
    if len(ts) and not (np.all(np.isfinite(ts)) and ts.min() >= 0):
        raise ValueError("timestamps must be finite and non-negative")
    bad = np.flatnonzero(np.diff(ts) < 0)
    if len(bad):
        raise TraceOrderError("timestamps decrease", line=int(bad[0]) + 3)
    if len(ids) and (ids.min() < 0 or ids.max() >= MAX_ID):
        raise ValueError("can_id outside 29-bit range")
    if len(dlc) and (dlc.min() < 0 or dlc.max() > MAX_DLC):
        raise ValueError("dlc outside 0..8")
    pad = np.arange(MAX_DLC)[None, :] >= dlc[:, None]
    if np.any(payload[pad]):
        raise ValueError("payload bytes beyond dlc must be zero")


# --------------------------------------------------------------------------
# CSV format

def _parse_payload(text: str, line: int) -> bytes:
    digits = text.replace(" ", "").replace(":", "")
    if len(digits) % 2 or not _HEX_RE.match(digits):
        raise TraceParseError(f"non-hex payload {text!r}", line)
    return bytes.fromhex(digits)


def parse_trace(stream: TextIO | str, source_label: str = "") -> Trace:
    """Read the CSV trace format. Rows stay in file order; a decreasing
    timestamp is an error, never silently sorted."""
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    reader = csv.reader(stream)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise TraceParseError("missing header", 1) from None
    if header not in (list(HEADER), list(HEADER[:4])):
        raise TraceParseError(f"unexpected header {header}", 1)
    ncol = len(header)

    ts, ids, dlcs, rows, labels = [], [], [], [], []
    prev = -np.inf
    for line, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != ncol:
            raise TraceParseError(f"expected {ncol} columns, got {len(row)}", line)
        try:
            t = float(row[0])
            cid = int(row[1].strip(), 16)
            d = int(row[2])
        except ValueError as exc:
            raise TraceParseError(str(exc), line) from None
        if not (np.isfinite(t) and t >= 0):
            raise TraceParseError(f"bad timestamp {row[0]!r}", line)
        if not 0 <= cid < MAX_ID:
            raise TraceParseError(f"id {row[1]!r} outside 29-bit range", line)
        if not 0 <= d <= MAX_DLC:
            raise TraceParseError(f"dlc {d} outside 0..8", line)
        data = _parse_payload(row[3].strip(), line)
        if len(data) != d:
            raise TraceParseError(f"dlc {d} but {len(data)} payload bytes", line)
        flag = False
        if ncol == 5:
            lab = row[4].strip()
            if lab not in ("0", "1"):
                raise TraceParseError(f"isTampered must be 0/1, got {lab!r}", line)
            flag = lab == "1"
        if t < prev:
            raise TraceOrderError(f"timestamp {t!r} after {prev!r}", line)
        prev = t
        ts.append(t)
        ids.append(cid)
        dlcs.append(d)
        rows.append(data.ljust(MAX_DLC, b"\0"))
        labels.append(flag)

    payload = np.frombuffer(b"".join(rows), dtype=np.uint8).reshape(-1, MAX_DLC)
    return Trace(ts, ids, dlcs, payload, labels, source_label, validate=False)


def write_trace(trace: Trace, stream: TextIO | None = None) -> str | None:
    """Write the canonical CSV form. Returns the text when no stream is given."""
    out = io.StringIO() if stream is None else stream
    out.write(",".join(HEADER) + "\n")
    hexrows = [" ".join(f"{b:02X}" for b in row[:d])
               for row, d in zip(trace.payload.tolist(), trace.dlc.tolist())]
    for t, cid, d, p, lab in zip(trace.timestamps.tolist(), trace.ids.tolist(),
                                 trace.dlc.tolist(), hexrows, trace.tampered.tolist()):
        out.write(f"{t!r},0x{cid:X},{d},{p},{int(lab)}\n")
    return out.getvalue() if stream is None else None


def read_trace_file(path, source_label=None) -> Trace:
    with open(path, newline="") as fh:
        return parse_trace(fh, str(path) if source_label is None else source_label)


def write_trace_file(trace: Trace, path) -> None:
    with open(path, "w", newline="") as fh:
        write_trace(trace, fh)


# --------------------------------------------------------------------------
# per-ID streams

@dataclass(frozen=True, eq=False)
class IdStream:
    """Frames of a single CAN ID; ``indices`` are positions in the parent trace."""
    can_id: int
    indices: np.ndarray
    timestamps: np.ndarray
    dlc: np.ndarray
    payload: np.ndarray
    tampered: np.ndarray

    def __len__(self):
        return len(self.indices)

    def __getitem__(self, i) -> CanFrame:
        d = int(self.dlc[i])
        return CanFrame(float(self.timestamps[i]), self.can_id, d,
                        self.payload[i, :d].tobytes(), bool(self.tampered[i]))

    @classmethod
    def of(cls, trace: Trace, can_id: int) -> "IdStream":
        idx = np.flatnonzero(trace.ids == can_id)
        return cls(int(can_id), _frozen(idx), trace.timestamps[idx],
                   trace.dlc[idx], trace.payload[idx], trace.tampered[idx])


def split_by_id(trace: Trace) -> dict[int, IdStream]:
    order = np.argsort(trace.ids, kind="stable")
    sorted_ids = trace.ids[order]
    cuts = np.flatnonzero(np.diff(sorted_ids)) + 1
    streams = {}
    for idx in np.split(order, cuts):
        if not len(idx):
            continue
        cid = int(trace.ids[idx[0]])
        streams[cid] = IdStream(cid, _frozen(idx), trace.timestamps[idx],
                                trace.dlc[idx], trace.payload[idx],
                                trace.tampered[idx])
    return streams


def mean_interarrival(stream: IdStream) -> float:
    n = len(stream)
    if n < 2:
        raise InsufficientDataError(
            f"id {stream.can_id:#x}: need >= 2 frames for interarrival, got {n}")
    return float(stream.timestamps[-1] - stream.timestamps[0]) / (n - 1)
