"""Synthetic CAN traffic with known payload layouts.

Two generators live here:

* :func:`random_layout` / :func:`layout_trace` build single-ID traces from a
  randomly drawn field layout. Their fields are built so the true layout is
  recoverable from flip statistics (see :func:`random_layout` for the rules);
  they are the ground truth for classifier tests.
* :func:`desk_traffic` builds a multi-ID capture with smooth sinusoid,
  drifting and step-function signals plus counters and checksums, used by the
  end-to-end detection experiment.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .signals import BitRange, COUNTER, CONSTANT, CRC, PHYSICAL, SignalLayout
from .trace import Trace


@dataclass(frozen=True)
class FieldSpec:
    kind: str
    length: int
    rate: float = 0.0     # physical: probability of a +-1 step per frame
    value: int = 0        # constant: the fixed value


def truth_layout(fields: list[FieldSpec], can_id: int = 0) -> SignalLayout:
    """Ranges a perfect classifier should report (adjacent constants merged)."""
    ranges, pos = [], 0
    for f in fields:
        if ranges and f.kind == CONSTANT and ranges[-1].kind == CONSTANT:
            last = ranges.pop()
            ranges.append(BitRange(last.start_bit, last.length + f.length, CONSTANT))
        else:
            ranges.append(BitRange(pos, f.length, f.kind))
        pos += f.length
    if pos % 8:
        raise ValueError("fields must fill whole bytes")
    return SignalLayout(can_id, pos // 8, tuple(ranges))


def random_layout(rng: np.random.Generator, dlc: int | None = None,
                  max_phys_len: int = 8) -> list[FieldSpec]:
    """Draw a field layout filling ``dlc`` bytes.

    Rules that keep the layout identifiable from flip rates:

    * physical fields are +-1 triangle sweeps with step rate in [0.15, 0.35],
      so their flip rates halve exactly toward the MSB;
    * a counter is preceded by a constant field (or the payload start);
    * two adjacent physical fields are separated by a clear rate drop: the
      first field's LSB rate is at least 4.5x the second field's MSB rate;
    * a CRC, if present, is 8 random bits at the end of the payload.
    """
    if dlc is None:
        dlc = int(rng.integers(2, 9))
    width = 8 * dlc
    crc = width >= 16 and rng.random() < 0.5
    body = width - (8 if crc else 0)
    while True:
        fields, pos = [], 0
        while pos < body:
            room = body - pos
            prev = fields[-1] if fields else None
            choice = rng.choice([CONSTANT, PHYSICAL, COUNTER], p=[0.35, 0.45, 0.2])
            if choice == COUNTER and (prev is None or prev.kind == CONSTANT) and room >= 2:
                fields.append(FieldSpec(COUNTER, int(rng.integers(2, min(4, room) + 1))))
            elif choice == PHYSICAL:
                length = int(rng.integers(1, min(max_phys_len, room) + 1))
                fields.append(FieldSpec(PHYSICAL, length, float(rng.uniform(0.15, 0.35))))
            elif prev is None or prev.kind != CONSTANT:
                length = int(rng.integers(1, min(8, room) + 1))
                fields.append(FieldSpec(CONSTANT, length, value=int(rng.integers(0, 1 << length))))
            else:
                continue
            pos += fields[-1].length
        if crc:
            fields.append(FieldSpec(CRC, 8))
        if _identifiable(fields):
            return fields


def _identifiable(fields) -> bool:
    for a, b in zip(fields, fields[1:]):
        if a.kind == PHYSICAL and b.kind == PHYSICAL:
            if a.rate < 4.5 * b.rate / 2 ** (b.length - 1):
                return False
    return True


def frames_needed(fields: list[FieldSpec], minimum: int = 500) -> int:
    """Frames for every physical sweep to cover its full range at least once."""
    need = minimum
    for f in fields:
        if f.kind == PHYSICAL:
            need = max(need, int(np.ceil(1.3 * 2 * (1 << f.length) / f.rate)))
    return need


def _triangle(rng, n, length, rate):
    top = (1 << length) - 1
    steps = rng.random(n) < rate
    steps[0] = False
    period = 2 * top
    pos = int(rng.integers(0, period)) + np.cumsum(steps)
    v = pos % period
    return np.where(v <= top, v, period - v).astype(np.uint64)


def render_payloads(fields: list[FieldSpec], n: int, rng: np.random.Generator) -> np.ndarray:
    width = sum(f.length for f in fields)
    words = np.zeros(n, dtype=np.uint64)
    pos = 0
    for f in fields:
        if f.kind == CONSTANT:
            v = np.full(n, f.value, dtype=np.uint64)
        elif f.kind == PHYSICAL:
            v = _triangle(rng, n, f.length, f.rate)
        elif f.kind == COUNTER:
            v = (int(rng.integers(0, 1 << f.length)) + np.arange(n)) % (1 << f.length)
            v = v.astype(np.uint64)
        else:
            v = rng.integers(0, 1 << f.length, size=n, dtype=np.uint64)
        pos += f.length
        words |= v << np.uint64(64 - pos)
    payload = words.astype(">u8").view(np.uint8).reshape(n, 8).copy()
    payload[:, width // 8:] = 0
    return payload


def layout_trace(fields: list[FieldSpec], n: int, rng: np.random.Generator,
                 can_id: int = 0x100, period: float = 0.01) -> Trace:
    payload = render_payloads(fields, n, rng)
    dlc = sum(f.length for f in fields) // 8
    ts = np.arange(n) * period
    return Trace(ts, np.full(n, can_id), np.full(n, dlc), payload,
                 source_label="synthetic-layout")


# --------------------------------------------------------------------------
# desk-scale multi-ID traffic

def _sinusoid(t, lo, hi, period, phase):
    mid, amp = (lo + hi) / 2, (hi - lo) / 2
    return mid + amp * np.sin(2 * np.pi * t / period + phase)


def _drift(rng, n, lo, hi, smooth, gain=2.0):
    # smoothed noise squashed by tanh: stationary, and the soft saturation
    # revisits both bounds often so any long segment spans the full range
    z = gaussian_filter1d(rng.standard_normal(n + 8 * smooth), smooth, mode="wrap")[4 * smooth:4 * smooth + n]
    z = (z - z.mean()) / z.std()
    return (lo + hi) / 2 + (hi - lo) / 2 * np.tanh(gain * z)


def _steps(rng, n, lo, hi, quantum, mean_hold):
    # piecewise-constant levels; each pass visits every grid level once in random order
    grid = np.arange(lo, hi + 1, quantum)
    levels = np.empty(n)
    bag: list = []
    i = 0
    while i < n:
        if not bag:
            bag = list(rng.permutation(grid))
        hold = int(rng.geometric(1 / mean_hold))
        levels[i:i + hold] = bag.pop()
        i += hold
    return levels


def _checksum(words: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer: every output bit depends on every input bit
    z = words >> np.uint64(8)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    z = z ^ (z >> np.uint64(31))
    return z & np.uint64(0xFF)


# per ID: (period seconds, dlc, fields as (kind, start, length, generator args))
DESK_IDS = {
    0x0C5: (0.010, 8, [
        ("sin", 0, 10, dict(lo=100, hi=900, period=600)),
        ("drift", 16, 12, dict(lo=800, hi=3200, smooth=50)),
        ("step", 32, 8, dict(lo=32, hi=224, quantum=16, mean_hold=120)),
        ("counter", 44, 4, {}),
        ("crc", 56, 8, {}),
    ]),
    0x1D0: (0.010, 8, [
        ("sin", 0, 12, dict(lo=500, hi=3500, period=1500)),
        ("sin", 16, 8, dict(lo=40, hi=200, period=350)),
        ("drift", 28, 10, dict(lo=100, hi=900, smooth=50)),
        ("counter", 44, 4, {}),
        ("crc", 56, 8, {}),
    ]),
    0x2A4: (0.010, 6, [
        ("drift", 0, 10, dict(lo=200, hi=800, smooth=50)),
        ("step", 16, 8, dict(lo=16, hi=240, quantum=16, mean_hold=120)),
        ("sin", 28, 8, dict(lo=20, hi=230, period=800)),
        ("counter", 40, 2, {}),
    ]),
}


def desk_traffic(n_frames: int = 100_000, seed: int = 0,
                 jitter: float = 1e-4) -> Trace:
    """Interleaved 3-ID capture with smooth physical signals.

    Frames are split evenly across the IDs; unlisted bits carry fixed
    per-ID constants.
    """
    rng = np.random.default_rng(seed)
    per_id = n_frames // len(DESK_IDS)
    extra = n_frames - per_id * len(DESK_IDS)
    cols = []
    for j, (cid, (period, dlc, fields)) in enumerate(sorted(DESK_IDS.items())):
        n = per_id + (1 if j < extra else 0)
        idx = np.arange(n)
        t = idx * period + j * period / len(DESK_IDS) + rng.uniform(-jitter, jitter, n)
        t = np.maximum.accumulate(np.clip(t, 0, None))
        const = int(rng.integers(0, 1 << 62)) & 0x0F0F_0000_F000_F0F0
        words = np.full(n, const, dtype=np.uint64)
        crc_field = None
        for kind, start, length, kw in fields:
            mask = np.uint64((1 << length) - 1)
            shift = np.uint64(64 - start - length)
            words &= ~(mask << shift)
            if kind == "sin":
                v = _sinusoid(idx, phase=rng.uniform(0, 2 * np.pi), **kw)
            elif kind == "drift":
                v = _drift(rng, n, **kw)
            elif kind == "step":
                v = _steps(rng, n, **kw)
            elif kind == "counter":
                v = (int(rng.integers(0, 1 << length)) + idx) % (1 << length)
            else:
                crc_field = (shift, mask)
                continue
            words |= (np.rint(v).astype(np.uint64) & mask) << shift
        if crc_field is not None:
            shift, mask = crc_field
            words |= (_checksum(words) & mask) << shift
        if dlc < 8:
            words &= ~np.uint64((1 << (64 - 8 * dlc)) - 1)
        payload = words.astype(">u8").view(np.uint8).reshape(n, 8).copy()
        cols.append((t, np.full(n, cid), np.full(n, dlc), payload))

    ts = np.concatenate([c[0] for c in cols])
    order = np.argsort(ts, kind="stable")
    return Trace(ts[order], np.concatenate([c[1] for c in cols])[order],
                 np.concatenate([c[2] for c in cols])[order],
                 np.concatenate([c[3] for c in cols])[order],
                 source_label=f"desk-traffic(seed={seed})")
