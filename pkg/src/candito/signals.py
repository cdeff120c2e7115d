"""Payload structure reverse engineering from bit-flip statistics.

Bits are numbered MSB-first across the payload: bit 0 is the most significant
bit of byte 0, bit 8*dlc-1 the least significant bit of the last byte. A
multi-byte big-endian field therefore occupies a contiguous range such as
0-15, and within a field the least significant bit has the highest index.

The classifier reimplements the idea behind READ with explicit, tunable
thresholds (:class:`ClassifierParams`):

1. bits whose flip rate is ``<= constant_rate`` are constant;
2. inside each non-constant run, the tail run touching the end of the payload
   whose rates all sit in ``[crc_low, crc_high]`` and spans at least
   ``crc_min_len`` bits is a CRC;
3. a counter is anchored at a bit flipping on almost every frame
   (``>= counter_min_lsb_rate``) and extends toward the MSB while each rate is
   about half of its less significant neighbour (within ``counter_ratio_tol``);
4. everything left is physical, split wherever the flip rate rises clearly
   toward the MSB (``rate[i] > split_ratio * rate[i+1]``).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import (InsufficientDataError, SignalBoundsError, StructuralError,
                     ConfigError)
from .trace import CanFrame, IdStream, Trace, split_by_id

CONSTANT = "constant"
COUNTER = "counter"
CRC = "crc"
PHYSICAL = "physical"
KINDS = (CONSTANT, COUNTER, CRC, PHYSICAL)

SIGNALMAP_FORMAT = "candito-signalmap"
SIGNALMAP_VERSION = 1


@dataclass(frozen=True)
class BitRange:
    start_bit: int
    length: int
    kind: str = PHYSICAL
    min_observed: int = 0
    max_observed: int = 0

    def __post_init__(self):
        if self.start_bit < 0 or self.length < 1:
            raise ValueError(f"invalid bit range ({self.start_bit}, {self.length})")
        if self.kind not in KINDS:
            raise ValueError(f"unknown kind {self.kind!r}")
        if self.min_observed > self.max_observed:
            raise ValueError("min_observed > max_observed")

    @property
    def end_bit(self) -> int:
        return self.start_bit + self.length


@dataclass(frozen=True)
class SignalLayout:
    """Classified bit ranges of one CAN ID (one SignalMap entry)."""
    can_id: int
    dlc: int
    ranges: tuple[BitRange, ...]

    def __post_init__(self):
        pos = 0
        for r in self.ranges:
            if r.start_bit != pos:
                raise ValueError(f"id {self.can_id:#x}: ranges not contiguous at bit {pos}")
            pos = r.end_bit
        if pos != 8 * self.dlc:
            raise ValueError(f"id {self.can_id:#x}: ranges cover {pos} of {8 * self.dlc} bits")

    @property
    def physical(self) -> list[BitRange]:
        return [r for r in self.ranges if r.kind == PHYSICAL]

    def to_record(self) -> dict:
        return {"id": f"0x{self.can_id:X}", "dlc": self.dlc,
                "ranges": [{"start": r.start_bit, "len": r.length, "kind": r.kind,
                            "min": r.min_observed, "max": r.max_observed}
                           for r in self.ranges]}

    @classmethod
    def from_record(cls, rec: dict) -> "SignalLayout":
        return cls(int(rec["id"], 16), int(rec["dlc"]),
                   tuple(BitRange(int(r["start"]), int(r["len"]), r["kind"],
                                  int(r["min"]), int(r["max"])) for r in rec["ranges"]))

    def digest(self) -> str:
        blob = json.dumps(self.to_record(), separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class SignalMap:
    layouts: dict[int, SignalLayout] = field(default_factory=dict)

    def __getitem__(self, can_id) -> SignalLayout:
        return self.layouts[can_id]

    def __contains__(self, can_id):
        return can_id in self.layouts

    def __iter__(self):
        return iter(sorted(self.layouts))

    def __len__(self):
        return len(self.layouts)

    def dumps(self) -> str:
        lines = [json.dumps({"format": SIGNALMAP_FORMAT, "version": SIGNALMAP_VERSION})]
        lines += [json.dumps(self.layouts[cid].to_record()) for cid in self]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "SignalMap":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ConfigError("empty signal map")
        head = json.loads(lines[0])
        if head.get("format") != SIGNALMAP_FORMAT or head.get("version") != SIGNALMAP_VERSION:
            raise ConfigError(f"unsupported signal map header {head}")
        layouts = [SignalLayout.from_record(json.loads(ln)) for ln in lines[1:]]
        return cls({l.can_id: l for l in layouts})

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "SignalMap":
        with open(path) as fh:
            return cls.loads(fh.read())


@dataclass(frozen=True)
class ClassifierParams:
    constant_rate: float = 0.0
    counter_min_lsb_rate: float = 0.9
    counter_ratio_tol: float = 0.2
    counter_min_len: int = 2
    crc_low: float = 0.4
    crc_high: float = 0.6
    crc_min_len: int = 8
    # physical split where a bit flips this many times more often than the next
    split_ratio: float = 3.0


# --------------------------------------------------------------------------
# bit access

def payload_words(payload: np.ndarray) -> np.ndarray:
    """(N, 8) uint8 payload rows -> big-endian uint64 per row."""
    payload = np.ascontiguousarray(payload, dtype=np.uint8).reshape(-1, 8)
    return payload.view(">u8").reshape(-1).astype(np.uint64)


def extract_values(payload: np.ndarray, start_bit: int, length: int) -> np.ndarray:
    """Unsigned MSB-first field values for every row of an (N, 8) payload matrix."""
    if start_bit < 0 or length < 1 or start_bit + length > 64:
        raise SignalBoundsError(f"range ({start_bit}, {length}) outside 64-bit payload")
    words = payload_words(payload)
    shift = np.uint64(64 - start_bit - length)
    mask = np.uint64((1 << length) - 1)
    return (words >> shift) & mask


def extract_signal(frame: CanFrame, rng: BitRange) -> int:
    if rng.end_bit > 8 * frame.dlc:
        raise SignalBoundsError(
            f"range {rng.start_bit}+{rng.length} exceeds {8 * frame.dlc}-bit payload")
    word = int.from_bytes(frame.payload, "big") if frame.dlc else 0
    shift = 8 * frame.dlc - rng.end_bit
    return (word >> shift) & ((1 << rng.length) - 1)


def _streams(streams) -> list[IdStream]:
    if isinstance(streams, IdStream):
        return [streams]
    return list(streams)


def _common_dlc(streams: Sequence[IdStream]) -> int:
    dlcs = set()
    for s in streams:
        dlcs.update(np.unique(s.dlc).tolist())
    if len(dlcs) > 1:
        cid = streams[0].can_id
        raise StructuralError(f"id {cid:#x}: mixed dlc values {sorted(dlcs)}")
    return int(dlcs.pop()) if dlcs else 0


def bit_flip_rates(streams: IdStream | Iterable[IdStream]) -> np.ndarray:
    """Per-bit fraction of consecutive frame pairs that differ in that bit.

    Several streams (e.g. one per training file) are pooled without counting
    the seam between files.
    """
    streams = _streams(streams)
    dlc = _common_dlc(streams)
    pairs = sum(max(len(s) - 1, 0) for s in streams)
    if pairs < 1:
        cid = streams[0].can_id if streams else -1
        raise InsufficientDataError(f"id {cid:#x}: need >= 2 frames for flip rates")
    flips = np.zeros(8 * dlc, dtype=np.int64)
    for s in streams:
        if len(s) < 2:
            continue
        bits = np.unpackbits(s.payload[:, :dlc], axis=1)
        flips += np.count_nonzero(bits[1:] != bits[:-1], axis=0)
    return flips / pairs


# --------------------------------------------------------------------------
# classification

def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Maximal [start, end) runs of True."""
    out, start = [], None
    for i, m in enumerate(mask.tolist()):
        if m and start is None:
            start = i
        elif not m and start is not None:
            out.append((start, i))
            start = None
    if start is not None:
        out.append((start, len(mask)))
    return out


def _counter_at(rates, lo, lsb, p: ClassifierParams) -> int:
    """MSB index of a counter whose LSB is ``lsb``, searching no further than ``lo``."""
    lo_ratio = 0.5 * (1 - p.counter_ratio_tol)
    hi_ratio = 0.5 * (1 + p.counter_ratio_tol)
    i = lsb
    while i - 1 >= lo and rates[i] > 0 and lo_ratio <= rates[i - 1] / rates[i] <= hi_ratio:
        i -= 1
    return i


def classify_rates(rates: np.ndarray, can_id: int = 0,
                   params: ClassifierParams = ClassifierParams()) -> SignalLayout:
    rates = np.asarray(rates, dtype=float)
    width = len(rates)
    kind = np.full(width, CONSTANT, dtype=object)
    cut = np.zeros(width + 1, dtype=bool)    # cut[i]: a range starts at bit i
    cut[0] = True

    for lo, hi in _runs(rates > params.constant_rate):
        cut[lo] = cut[hi] = True
        if hi == width:
            j = hi
            while j > lo and params.crc_low <= rates[j - 1] <= params.crc_high:
                j -= 1
            if hi - j >= params.crc_min_len:
                kind[j:hi] = CRC
                cut[j] = True
                hi = j
        # counters, scanned from the LSB end
        i = hi - 1
        while i >= lo:
            if rates[i] >= params.counter_min_lsb_rate:
                msb = _counter_at(rates, lo, i, params)
                if i - msb + 1 >= params.counter_min_len:
                    kind[msb:i + 1] = COUNTER
                    cut[msb] = cut[i + 1] = True
                    i = msb - 1
                    continue
            i -= 1
        for a, b in _runs(kind[lo:hi] == CONSTANT):
            a, b = a + lo, b + lo
            kind[a:b] = PHYSICAL
            cut[a] = cut[b] = True
            for j in range(a, b - 1):
                if rates[j] > params.split_ratio * rates[j + 1]:
                    cut[j + 1] = True

    starts = np.flatnonzero(cut[:width]).tolist() + [width]
    ranges = tuple(BitRange(a, b - a, kind[a]) for a, b in zip(starts, starts[1:]))
    return SignalLayout(can_id, width // 8, ranges)


def classify_ranges(streams: IdStream | Iterable[IdStream],
                    params: ClassifierParams = ClassifierParams()) -> SignalLayout:
    streams = _streams(streams)
    return classify_rates(bit_flip_rates(streams), streams[0].can_id, params)


def signal_bounds(streams: IdStream | Iterable[IdStream], layout: SignalLayout) -> SignalLayout:
    """Fill min/max observed values for every range; physical ranges that
    never change are demoted to constant."""
    streams = _streams(streams)
    payload = np.concatenate([s.payload for s in streams]) if streams else np.zeros((0, 8), np.uint8)
    if not len(payload):
        raise InsufficientDataError(f"id {layout.can_id:#x}: no frames for bounds")
    out = []
    for r in layout.ranges:
        v = extract_values(payload, r.start_bit, r.length)
        lo, hi = int(v.min()), int(v.max())
        kind = CONSTANT if r.kind == PHYSICAL and lo == hi else r.kind
        out.append(replace(r, kind=kind, min_observed=lo, max_observed=hi))
    return SignalLayout(layout.can_id, layout.dlc, tuple(out))


def analyze_trace(traces: Trace | Iterable[Trace],
                  params: ClassifierParams = ClassifierParams(),
                  min_frames: int = 2) -> tuple[SignalMap, dict[int, str]]:
    """Classify every ID of one or more (untampered) traces.

    Returns the map and a ``{can_id: reason}`` dict of skipped IDs.
    """
    if isinstance(traces, Trace):
        traces = [traces]
    per_id: dict[int, list[IdStream]] = {}
    for t in traces:
        for cid, s in split_by_id(t).items():
            per_id.setdefault(cid, []).append(s)
    layouts, skipped = {}, {}
    for cid in sorted(per_id):
        streams = per_id[cid]
        if sum(len(s) for s in streams) < max(min_frames, 2):
            skipped[cid] = "too few frames"
            continue
        try:
            layout = classify_ranges(streams, params)
        except (StructuralError, InsufficientDataError) as exc:
            skipped[cid] = str(exc)
            continue
        layouts[cid] = signal_bounds(streams, layout)
    return SignalMap(layouts), skipped
