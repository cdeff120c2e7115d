"""Attack injection on recorded CAN traces.

Every attack is a pure function ``Trace -> Trace``: frames that the engine adds
or rewrites get ``tampered=True``, everything else is copied bit for bit.
Two delivery modes exist for payload-producing attacks:

``injection``
    new frames are added starting at ``start_time``, spaced by the target's
    mean interarrival time divided by ``rate_multiplier``; originals stay.
``masquerade``
    the next ``count`` frames of the target at/after ``start_time`` get their
    payloads replaced; timestamps and ID are kept.

DoS and drop ignore the mode.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence, Union

import numpy as np

from .errors import (AttackSpecError, IneligibleError, NoTargetError, SignalBoundsError,
                     SignalRangeError, SpanError)
from .signals import BitRange, SignalLayout, SignalMap, extract_values
from .trace import CanFrame, MAX_DLC, IdStream, Trace, mean_interarrival

INJECTION = "injection"
MASQUERADE = "masquerade"

SPEC_FORMAT = "candito-attack"
MANIFEST_FORMAT = "candito-manifest"
FORMAT_VERSION = 1

DOS_FRAME_BITS = 125       # 8-byte classic frame incl. stuffing overhead
DEFAULT_BITRATE = 500_000


def derive_seed(*parts) -> int:
    """Stable 63-bit sub-seed from arbitrary parts (independent of PYTHONHASHSEED)."""
    blob = ":".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "big") >> 1


# --------------------------------------------------------------------------
# attack descriptions

@dataclass(frozen=True)
class Replacement:
    start_bit: int
    length: int
    mode: str                      # payloads | fuzzy | min | max | seamless_change | counter
    values: tuple[int, ...] = ()
    target_value: int | None = None

    MODES = ("payloads", "fuzzy", "min", "max", "seamless_change", "counter")

    def __post_init__(self):
        if self.mode not in self.MODES:
            raise AttackSpecError(f"unknown replacement mode {self.mode!r}")
        top = 1 << self.length
        if self.mode == "seamless_change":
            if self.target_value is None or not 0 <= self.target_value < top:
                raise AttackSpecError(f"seamless target must be in [0, {top})")
        if self.mode == "payloads":
            if not self.values or any(not 0 <= v < top for v in self.values):
                raise AttackSpecError(f"replacement values must be in [0, {top})")

    @property
    def bit_range(self) -> BitRange:
        return BitRange(self.start_bit, self.length)


@dataclass(frozen=True)
class BasicInjection:
    payload: bytes
    count: int
    name = "basic"


@dataclass(frozen=True)
class ProgressiveInjection:
    payloads: tuple[bytes, ...]
    name = "progressive"

    @property
    def count(self):
        return len(self.payloads)


@dataclass(frozen=True)
class Dos:
    duration: float
    bus_fill: float = 1.0
    name = "dos"


@dataclass(frozen=True)
class Drop:
    count: int
    name = "drop"


@dataclass(frozen=True)
class Fuzzy:
    count: int
    bit_ranges: tuple[tuple[int, int], ...] = ()   # (start, length); empty = whole payload
    name = "fuzzy"


@dataclass(frozen=True)
class Replay:
    count: int
    sniff_start: float
    randomize_first: bool = False
    randomize_window: int = 0      # 0 -> count
    replacements: tuple[Replacement, ...] = ()
    name = "replay"


AttackKind = Union[BasicInjection, ProgressiveInjection, Dos, Drop, Fuzzy, Replay]
KIND_TYPES = {k.name: k for k in (BasicInjection, ProgressiveInjection, Dos, Drop, Fuzzy, Replay)}


@dataclass(frozen=True)
class AttackSpec:
    target_id: int
    start_time: float
    kind: AttackKind
    mode: str = MASQUERADE
    rate_multiplier: float = 1.0

    def __post_init__(self):
        if self.mode not in (INJECTION, MASQUERADE):
            raise AttackSpecError(f"unknown mode {self.mode!r}")
        if not self.rate_multiplier > 0:
            raise AttackSpecError("rate_multiplier must be positive")
        k = self.kind
        if hasattr(k, "count") and k.count < 1:
            raise AttackSpecError("count must be >= 1")
        if isinstance(k, Dos) and not (0 < k.bus_fill <= 1 and k.duration > 0):
            raise AttackSpecError("DoS needs duration > 0 and bus_fill in (0, 1]")

    def to_dict(self) -> dict:
        k = self.kind
        kind = {"type": k.name}
        if isinstance(k, BasicInjection):
            kind.update(payload=k.payload.hex(), count=k.count)
        elif isinstance(k, ProgressiveInjection):
            kind.update(payloads=[p.hex() for p in k.payloads])
        elif isinstance(k, Replay):
            kind.update(count=k.count, sniff_start=k.sniff_start,
                        randomize_first=k.randomize_first,
                        randomize_window=k.randomize_window,
                        replacements=[asdict(r) | {"values": list(r.values)}
                                      for r in k.replacements])
        elif isinstance(k, Fuzzy):
            kind.update(count=k.count, bit_ranges=[list(r) for r in k.bit_ranges])
        else:
            kind.update(asdict(k))
        return {"target_id": f"0x{self.target_id:X}", "start_time": self.start_time,
                "mode": self.mode, "rate_multiplier": self.rate_multiplier, "kind": kind}

    @classmethod
    def from_dict(cls, d: dict) -> "AttackSpec":
        try:
            kd = dict(d["kind"])
            typ = kd.pop("type")
            if typ == "basic":
                kind = BasicInjection(bytes.fromhex(kd["payload"]), int(kd["count"]))
            elif typ == "progressive":
                kind = ProgressiveInjection(tuple(bytes.fromhex(p) for p in kd["payloads"]))
            elif typ == "replay":
                reps = tuple(Replacement(int(r["start_bit"]), int(r["length"]), r["mode"],
                                         tuple(r.get("values", ())), r.get("target_value"))
                             for r in kd.get("replacements", ()))
                kind = Replay(int(kd["count"]), float(kd["sniff_start"]),
                              bool(kd.get("randomize_first", False)),
                              int(kd.get("randomize_window", 0)), reps)
            elif typ == "fuzzy":
                kind = Fuzzy(int(kd["count"]),
                             tuple((int(a), int(b)) for a, b in kd.get("bit_ranges", ())))
            elif typ in KIND_TYPES:
                kind = KIND_TYPES[typ](**kd)
            else:
                raise AttackSpecError(f"unknown attack type {typ!r}")
            tid = d["target_id"]
            tid = int(tid, 16) if isinstance(tid, str) else int(tid)
            return cls(tid, float(d["start_time"]), kind, d.get("mode", MASQUERADE),
                       float(d.get("rate_multiplier", 1.0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise AttackSpecError(f"malformed attack spec: {exc}") from None


def dump_specs(specs: Sequence[AttackSpec]) -> str:
    return json.dumps({"format": SPEC_FORMAT, "version": FORMAT_VERSION,
                       "attacks": [s.to_dict() for s in specs]}, indent=2) + "\n"


def load_specs(text: str) -> list[AttackSpec]:
    doc = json.loads(text)
    if doc.get("format") != SPEC_FORMAT or doc.get("version") != FORMAT_VERSION:
        raise AttackSpecError("unsupported attack spec header")
    return [AttackSpec.from_dict(a) for a in doc["attacks"]]


# --------------------------------------------------------------------------
# bit writer

def set_signal(frame: CanFrame, rng: BitRange, value: int) -> CanFrame:
    """Write ``value`` MSB-first into ``rng``; the result is marked tampered."""
    if not 0 <= value < (1 << rng.length):
        raise SignalRangeError(f"value {value} does not fit in {rng.length} bits")
    width = 8 * frame.dlc
    if rng.end_bit > width:
        raise SignalBoundsError(f"range {rng.start_bit}+{rng.length} exceeds {width}-bit payload")
    word = int.from_bytes(frame.payload, "big")
    shift = width - rng.end_bit
    mask = ((1 << rng.length) - 1) << shift
    word = (word & ~mask) | (value << shift)
    return CanFrame(frame.timestamp, frame.can_id, frame.dlc,
                    word.to_bytes(frame.dlc, "big"), True)


def _set_values(payload: np.ndarray, start_bit: int, length: int, values) -> np.ndarray:
    """Vectorized writer over (N, 8) payload rows (MSB-first bit numbering)."""
    words = payload.view(">u8").reshape(-1).astype(np.uint64)
    shift = np.uint64(64 - start_bit - length)
    mask = np.uint64((1 << length) - 1)
    values = np.asarray(values, dtype=np.uint64)
    words = (words & ~(mask << shift)) | ((values & mask) << shift)
    return words.astype(">u8").view(np.uint8).reshape(-1, 8).copy()


# --------------------------------------------------------------------------
# attack application

@dataclass
class AttackResult:
    trace: Trace
    spec: AttackSpec
    touched: list[int] = field(default_factory=list)      # input indices rewritten
    inserted: int = 0
    removed: list[int] = field(default_factory=list)      # input indices deleted
    removed_timestamps: list[float] = field(default_factory=list)

    def record(self) -> dict:
        return {**self.spec.to_dict(), "touched": len(self.touched),
                "inserted": self.inserted, "removed_timestamps": self.removed_timestamps}


def _target(trace: Trace, can_id: int) -> IdStream:
    s = IdStream.of(trace, can_id)
    if not len(s):
        raise NoTargetError(f"target id {can_id:#x} not present in trace")
    return s


def _masquerade_rows(stream: IdStream, start: float, count: int) -> np.ndarray:
    first = int(np.searchsorted(stream.timestamps, start, side="left"))
    if first + count > len(stream):
        raise SpanError(f"id {stream.can_id:#x}: only {len(stream) - first} frames "
                        f"after t={start}, attack needs {count}")
    return np.arange(first, first + count)


def _last_untampered(stream: IdStream, before_row: int) -> int:
    """Row index of the last untampered frame strictly before ``before_row``."""
    for r in range(before_row - 1, -1, -1):
        if not stream.tampered[r]:
            return r
    raise SpanError(f"id {stream.can_id:#x}: no untampered frame before the attack")


def _inject_times(stream: IdStream, start: float, count: int, mult: float) -> np.ndarray:
    step = mean_interarrival(stream) / mult
    return start + step * np.arange(count)


def _genuine_rows_at(stream: IdStream, times: np.ndarray) -> np.ndarray:
    """For each time, the last untampered target row at or before it."""
    clean = np.flatnonzero(~stream.tampered)
    if not len(clean):
        raise SpanError(f"id {stream.can_id:#x}: no untampered frames")
    pos = np.searchsorted(stream.timestamps[clean], times, side="right") - 1
    return clean[np.clip(pos, 0, None)]


def _check_range(stream: IdStream, start_bit: int, length: int):
    width = 8 * int(stream.dlc[0])
    if start_bit < 0 or length < 1 or start_bit + length > width:
        raise AttackSpecError(f"bit range {start_bit}+{length} outside {width}-bit payload")


def _replay_payloads(trace, stream, spec, kind: Replay, rows, rng) -> np.ndarray:
    src0 = int(np.searchsorted(stream.timestamps, kind.sniff_start, side="left"))
    if kind.randomize_first:
        window = kind.randomize_window or kind.count
        src0 += int(rng.integers(0, window + 1))
    if src0 + kind.count > len(stream):
        raise SpanError(f"id {stream.can_id:#x}: sniff window runs past the trace end")
    payload = stream.payload[src0:src0 + kind.count].copy()

    first_row = rows[0] if rows is not None else int(
        np.searchsorted(stream.timestamps, spec.start_time, side="left"))
    n = kind.count
    for rep in kind.replacements:
        _check_range(stream, rep.start_bit, rep.length)
        top = 1 << rep.length
        if rep.mode == "payloads":
            vals = list(rep.values)
            if len(vals) == 1:
                vals = vals * n
            if len(vals) != n:
                raise AttackSpecError(f"payloads replacement has {len(vals)} values for {n} frames")
        elif rep.mode == "fuzzy":
            vals = rng.integers(0, top, size=n, dtype=np.uint64)
        elif rep.mode in ("min", "max"):
            clean = stream.payload[~stream.tampered]
            observed = extract_values(clean, rep.start_bit, rep.length)
            vals = [int(observed.min() if rep.mode == "min" else observed.max())] * n
        else:
            last = _last_untampered(stream, first_row)
            v0 = int(extract_values(stream.payload[last:last + 1], rep.start_bit, rep.length)[0])
            if rep.mode == "seamless_change":
                vals = [seamless_value(v0, rep.target_value, j, n) for j in range(1, n + 1)]
            else:
                vals = [(v0 + j) % top for j in range(1, n + 1)]
        payload = _set_values(payload, rep.start_bit, rep.length, vals)
    return payload


def seamless_value(start: int, target: int, step: int, steps: int) -> int:
    """Linear interpolation in integer space, round half up; step == steps -> target."""
    num = 2 * (start * steps + (target - start) * step) + steps
    return num // (2 * steps)


def _fuzzy_payloads(stream, kind: Fuzzy, base: np.ndarray, rng) -> np.ndarray:
    n = len(base)
    dlc = int(stream.dlc[0])
    if not kind.bit_ranges:
        out = np.zeros((n, MAX_DLC), dtype=np.uint8)
        out[:, :dlc] = rng.integers(0, 256, size=(n, dlc), dtype=np.uint8)
        return out
    out = base.copy()
    for start, length in kind.bit_ranges:
        _check_range(stream, start, length)
        vals = rng.integers(0, 1 << length, size=n, dtype=np.uint64)
        out = _set_values(out, start, length, vals)
    return out


def run_attack(trace: Trace, spec: AttackSpec, smap: SignalMap | None = None,
               seed: int = 0, *, bitrate: float = DEFAULT_BITRATE) -> AttackResult:
    """Apply one attack and report exactly which input frames were touched."""
    rng = np.random.default_rng(derive_seed(seed, "attack", spec.target_id, spec.start_time))
    t0, t1 = trace.span
    if not (t0 <= spec.start_time <= t1):
        raise AttackSpecError(f"start_time {spec.start_time} outside trace span [{t0}, {t1}]")
    kind = spec.kind

    if isinstance(kind, Dos):
        spacing = DOS_FRAME_BITS / (bitrate * kind.bus_fill)
        count = math.ceil(kind.duration / spacing - 1e-9)
        times = spec.start_time + spacing * np.arange(count)
        payload = np.zeros((count, MAX_DLC), dtype=np.uint8)
        return _rebuild(trace, spec, {}, np.zeros(0, dtype=int), times,
                        np.zeros(count, dtype=np.int64), np.full(count, 8), payload)

    stream = _target(trace, spec.target_id)
    dlc = int(stream.dlc[0])
    if np.any(stream.dlc != dlc):
        raise AttackSpecError(f"id {spec.target_id:#x} has mixed dlc")

    if isinstance(kind, Drop):
        rows = _masquerade_rows(stream, spec.start_time, kind.count)
        return _rebuild(trace, spec, {}, stream.indices[rows])

    count = kind.count
    inject = spec.mode == INJECTION
    rows = None if inject else _masquerade_rows(stream, spec.start_time, count)
    times = _inject_times(stream, spec.start_time, count, spec.rate_multiplier) if inject else None

    if isinstance(kind, BasicInjection):
        if len(kind.payload) != dlc:
            raise AttackSpecError(f"payload length {len(kind.payload)} != dlc {dlc}")
        new = np.zeros((count, MAX_DLC), dtype=np.uint8)
        new[:, :dlc] = np.frombuffer(kind.payload, dtype=np.uint8)
    elif isinstance(kind, ProgressiveInjection):
        if any(len(p) != dlc for p in kind.payloads):
            raise AttackSpecError(f"every payload must have {dlc} bytes")
        new = np.zeros((count, MAX_DLC), dtype=np.uint8)
        for j, p in enumerate(kind.payloads):
            new[j, :dlc] = np.frombuffer(p, dtype=np.uint8)
    elif isinstance(kind, Fuzzy):
        base_rows = _genuine_rows_at(stream, times) if inject else rows
        new = _fuzzy_payloads(stream, kind, stream.payload[base_rows], rng)
    elif isinstance(kind, Replay):
        new = _replay_payloads(trace, stream, spec, kind, rows, rng)
    else:
        raise AttackSpecError(f"unsupported attack kind {kind!r}")

    if inject:
        return _rebuild(trace, spec, {}, np.zeros(0, dtype=int), times,
                        np.full(count, spec.target_id), np.full(count, dlc), new)
    replace = dict(zip(stream.indices[rows].tolist(), new))
    return _rebuild(trace, spec, replace, np.zeros(0, dtype=int))


def _rebuild(trace, spec, replace: dict, remove, ins_times=None, ins_ids=None,
             ins_dlc=None, ins_payload=None) -> AttackResult:
    payload = trace.payload.copy()
    tampered = trace.tampered.copy()
    for i, p in replace.items():
        payload[i] = p
        tampered[i] = True
    keep = np.ones(len(trace), dtype=bool)
    keep[remove] = False
    ts, ids, dlc = trace.timestamps[keep], trace.ids[keep], trace.dlc[keep]
    payload, tampered = payload[keep], tampered[keep]
    n_ins = 0 if ins_times is None else len(ins_times)
    if n_ins:
        ts = np.concatenate([ts, ins_times])
        ids = np.concatenate([ids, ins_ids])
        dlc = np.concatenate([dlc, ins_dlc])
        payload = np.concatenate([payload, ins_payload])
        tampered = np.concatenate([tampered, np.ones(n_ins, dtype=bool)])
        order = np.argsort(ts, kind="stable")
        ts, ids, dlc, payload, tampered = (a[order] for a in (ts, ids, dlc, payload, tampered))
    out = Trace(ts, ids, dlc, payload, tampered, trace.source_label)
    remove = np.asarray(remove, dtype=int)
    return AttackResult(out, spec, sorted(replace), n_ins, remove.tolist(),
                        trace.timestamps[remove].tolist())


def apply_attack(trace: Trace, spec: AttackSpec, smap: SignalMap | None = None,
                 seed: int = 0, **kw) -> Trace:
    return run_attack(trace, spec, smap, seed, **kw).trace


# --------------------------------------------------------------------------
# benchmark presets

PRESETS = ("injection", "drop", "masquerade", "fuzzed", "seamless", "full_replay")


@dataclass
class PresetParams:
    interval: float = 10.0          # seconds of trace time between attacks on one ID
    injection_count: int = 50
    injection_rate: float = 20.0
    sequence_count: int = 25
    seamless_min_bits: int = 4


def _eligible(layout: SignalLayout, preset: str, p: PresetParams) -> list[BitRange]:
    phys = layout.physical
    if preset == "seamless":
        phys = [r for r in phys if r.length >= p.seamless_min_bits]
    return phys


def _in_range_value(rng, r: BitRange) -> int:
    return int(rng.integers(r.min_observed, r.max_observed + 1))


def _preset_spec(preset, cid, start, stream, phys, rng, p: PresetParams) -> AttackSpec:
    n = p.sequence_count
    # sniff source: an earlier stretch of the same ID's traffic
    first = int(np.searchsorted(stream.timestamps, start, side="left"))
    need = p.injection_count if preset == "injection" else n
    hi = max(first - 2 * need, 0)
    src = int(rng.integers(0, hi + 1))
    sniff = float(stream.timestamps[src])
    if preset == "drop":
        return AttackSpec(cid, start, Drop(n))
    if preset == "fuzzed":
        return AttackSpec(cid, start, Fuzzy(n, tuple((r.start_bit, r.length) for r in phys)))
    if preset == "full_replay":
        return AttackSpec(cid, start, Replay(n, sniff, randomize_first=True,
                                             randomize_window=need))
    if preset == "seamless":
        r = phys[int(rng.integers(len(phys)))]
        rep = Replacement(r.start_bit, r.length, "seamless_change",
                          target_value=_in_range_value(rng, r))
        return AttackSpec(cid, start, Replay(n, sniff, True, need, (rep,)))
    if preset == "masquerade":
        k = int(rng.integers(1, len(phys) + 1))
        chosen = rng.choice(len(phys), size=k, replace=False)
        reps = tuple(Replacement(phys[i].start_bit, phys[i].length, "payloads",
                                 (_in_range_value(rng, phys[i]),)) for i in sorted(chosen))
        return AttackSpec(cid, start, Replay(n, sniff, True, need, reps))
    if preset == "injection":
        r = phys[int(rng.integers(len(phys)))]
        rep = Replacement(r.start_bit, r.length, "payloads", (_in_range_value(rng, r),))
        return AttackSpec(cid, start, Replay(p.injection_count, sniff, True, need, (rep,)),
                          mode=INJECTION, rate_multiplier=p.injection_rate)
    raise AttackSpecError(f"unknown preset {preset!r}")


def preset_dataset(trace: Trace, preset: str, smap: SignalMap, seed: int = 0,
                   params: PresetParams = PresetParams(),
                   ids: Sequence[int] | None = None) -> tuple[Trace, dict]:
    """Tile one benchmark attack recipe over every eligible ID.

    Attacks on an ID start every ``params.interval`` seconds (the first one
    interval after trace start, staggered per ID); instances that would
    overlap a previous one or run off the trace are skipped.
    """
    if preset not in PRESETS:
        raise AttackSpecError(f"unknown preset {preset!r}; choose from {PRESETS}")
    present = set(trace.unique_ids())
    candidates = [cid for cid in (ids if ids is not None else smap)
                  if cid in present and cid in smap]
    targets = [(cid, _eligible(smap[cid], preset, params)) for cid in candidates]
    targets = [(cid, phys) for cid, phys in targets if phys]
    if not targets:
        raise IneligibleError(f"no eligible ID for preset {preset!r}")

    t0, t1 = trace.span
    out = trace
    instances = []
    for slot, (cid, phys) in enumerate(targets):
        offset = params.interval * (1 + slot / len(targets))
        busy_until = -np.inf
        start = t0 + offset
        j = 0
        while start < t1:
            sub = derive_seed(seed, preset, cid, j)
            rng = np.random.default_rng(sub)
            stream = IdStream.of(out, cid)
            spec = _preset_spec(preset, cid, start, stream, phys, rng, params)
            try:
                if start <= busy_until:
                    raise SpanError("overlaps previous attack")
                res = run_attack(out, spec, smap, sub)
            except (SpanError, AttackSpecError):
                pass
            else:
                out = res.trace
                rec = res.record() | {"seed": sub}
                instances.append(rec)
                busy_until = _attack_end(res, stream, spec)
            j += 1
            start = t0 + offset + j * params.interval
    if not instances:
        raise IneligibleError(f"preset {preset!r} produced no attack instances")
    manifest = {"format": MANIFEST_FORMAT, "version": FORMAT_VERSION, "preset": preset,
                "seed": seed, "interval": params.interval, "instances": instances}
    return out, manifest


def _attack_end(res: AttackResult, stream: IdStream, spec: AttackSpec) -> float:
    if res.removed_timestamps:
        return max(res.removed_timestamps)
    tampered = res.trace.timestamps[res.trace.tampered & (res.trace.ids == spec.target_id)]
    return float(tampered.max()) if len(tampered) else spec.start_time


def dump_manifest(manifest: dict) -> str:
    return json.dumps(manifest, indent=2) + "\n"


def single_manifest(results: Sequence[AttackResult], seed: int) -> dict:
    return {"format": MANIFEST_FORMAT, "version": FORMAT_VERSION, "preset": None,
            "seed": seed, "instances": [r.record() for r in results]}


def removed_gaps(manifest: dict) -> dict[int, list[float]]:
    """Per-ID timestamps of dropped frames, from a manifest."""
    gaps: dict[int, list[float]] = {}
    for inst in manifest.get("instances", ()):
        ts = inst.get("removed_timestamps") or []
        if ts:
            gaps.setdefault(int(inst["target_id"], 16), []).extend(ts)
    return gaps
