import numpy as np
import pytest
from hypothesis import given, strategies as st

from candito.errors import InsufficientDataError, SignalBoundsError, StructuralError
from candito.signals import (BitRange, COUNTER, CONSTANT, CRC, PHYSICAL, ClassifierParams,
                             SignalLayout, SignalMap, analyze_trace, bit_flip_rates,
                             classify_rates, classify_ranges, extract_signal, extract_values,
                             signal_bounds)
from candito.synth import FieldSpec, layout_trace, truth_layout
from candito.trace import CanFrame, IdStream, Trace


def stream_of(values, start_bit, length, dlc=8, cid=0x10):
    """One-field stream: ``values`` written at ``start_bit``, everything else 0."""
    values = np.asarray(values, dtype=np.uint64)
    words = values << np.uint64(64 - start_bit - length)
    payload = words.astype(">u8").view(np.uint8).reshape(-1, 8).copy()
    payload[:, dlc:] = 0
    n = len(values)
    return IdStream.of(Trace(np.arange(n) * 0.01, [cid] * n, [dlc] * n, payload), cid)


def kinds(layout):
    return [(r.start_bit, r.length, r.kind) for r in layout.ranges]


def test_flip_rate_alternating_bit():
    s = stream_of([0, 1, 0, 1], 7, 1, dlc=1)
    r = bit_flip_rates(s)
    assert r[7] == 1.0 and np.all(r[:7] == 0)


def test_flip_rate_counter_halves():
    s = stream_of(np.arange(256), 0, 8, dlc=1)
    r = bit_flip_rates(s)
    expect = [2.0 ** -(7 - i) for i in range(8)]
    assert np.allclose(r, expect, atol=1 / 255)


def test_flip_rate_errors():
    s = stream_of([1], 0, 8, dlc=1)
    with pytest.raises(InsufficientDataError):
        bit_flip_rates(s)
    t = Trace([0, 1], [5, 5], [1, 2], np.zeros((2, 8)))
    with pytest.raises(StructuralError):
        bit_flip_rates(IdStream.of(t, 5))


@given(st.integers(2, 50), st.integers(0, 2**32))
def test_flip_rates_in_unit_interval(n, seed):
    rng = np.random.default_rng(seed)
    s = stream_of(rng.integers(0, 256, n), 0, 8, dlc=1)
    r = bit_flip_rates(s)
    assert r.shape == (8,) and np.all((0 <= r) & (r <= 1))


def test_all_constant_payload():
    s = stream_of(np.full(100, 0xAB), 0, 8, dlc=4)
    assert kinds(classify_ranges(s)) == [(0, 32, CONSTANT)]


def test_four_sixteen_bit_sensors():
    n = 6000
    t = np.arange(n)
    words = np.zeros(n, dtype=np.uint64)
    for j, period in enumerate((900, 1300, 1700, 2300)):
        v = np.rint(32767.5 + 32767.5 * np.sin(2 * np.pi * t / period + j)).astype(np.uint64)
        words |= v << np.uint64(48 - 16 * j)
    payload = words.astype(">u8").view(np.uint8).reshape(-1, 8).copy()
    s = IdStream.of(Trace(t * 0.01, [0x1D0] * n, [8] * n, payload), 0x1D0)
    assert kinds(classify_ranges(s)) == [(0, 16, PHYSICAL), (16, 16, PHYSICAL),
                                         (32, 16, PHYSICAL), (48, 16, PHYSICAL)]


def test_forty_bit_mixed_layout(rng):
    n = 4000
    t = np.arange(n)
    phys = np.rint(32767.5 + 32767.5 * np.sin(2 * np.pi * t / 2000)).astype(np.uint64)
    words = (phys << np.uint64(48)) | (np.uint64(0x2A5) << np.uint64(34))
    words |= (np.uint64(1) + t.astype(np.uint64)) % np.uint64(4) << np.uint64(32)
    words |= rng.integers(0, 256, n).astype(np.uint64) << np.uint64(24)
    payload = words.astype(">u8").view(np.uint8).reshape(-1, 8).copy()
    payload[:, 5:] = 0
    s = IdStream.of(Trace(t * 0.01, [7] * n, [5] * n, payload), 7)
    assert kinds(classify_ranges(s)) == [(0, 16, PHYSICAL), (16, 14, CONSTANT),
                                         (30, 2, COUNTER), (32, 8, CRC)]


def test_generator_layout_recovered(rng):
    fields = [FieldSpec(CONSTANT, 3, value=5), FieldSpec(PHYSICAL, 6, 0.3),
              FieldSpec(PHYSICAL, 3, 0.2), FieldSpec(CONSTANT, 8, value=1),
              FieldSpec(COUNTER, 4), FieldSpec(CRC, 8)]
    tr = layout_trace(fields, 2000, rng)
    got = classify_ranges(IdStream.of(tr, 0x100))
    assert kinds(got) == kinds(truth_layout(fields, 0x100))


@given(st.lists(st.floats(0, 1), min_size=8, max_size=64).filter(lambda r: len(r) % 8 == 0))
def test_classification_is_partition(rates):
    lay = classify_rates(np.array(rates))
    pos = 0
    for r in lay.ranges:
        assert r.start_bit == pos
        pos = r.end_bit
    assert pos == len(rates)


def test_split_only_on_clear_rate_rise():
    rates = np.array([0.01, 0.02, 0.04, 0.08, 0.02, 0.06, 0.12, 0.24])
    assert kinds(classify_rates(rates)) == [(0, 4, PHYSICAL), (4, 4, PHYSICAL)]
    noisy = np.array([0.01, 0.02, 0.04, 0.08, 0.16, 0.5, 0.55, 0.45])
    assert kinds(classify_rates(noisy)) == [(0, 8, PHYSICAL)]
    loose = ClassifierParams(split_ratio=1.0)
    assert len(classify_rates(noisy, params=loose).ranges) == 2


def test_signal_bounds_examples():
    s = stream_of([3, 7, 5], 0, 8, dlc=1)
    lay = SignalLayout(0x10, 1, (BitRange(0, 8, PHYSICAL),))
    (r,) = signal_bounds(s, lay).ranges
    assert (r.min_observed, r.max_observed, r.kind) == (3, 7, PHYSICAL)
    s = stream_of([4, 4, 4], 0, 8, dlc=1)
    (r,) = signal_bounds(s, lay).ranges
    assert r.kind == CONSTANT and r.min_observed == r.max_observed == 4


def test_signal_bounds_scan_oracle(rng):
    vals = rng.integers(0, 4096, 1000)
    s = stream_of(vals, 10, 12)
    lay = SignalLayout(0x10, 8, (BitRange(0, 10, CONSTANT), BitRange(10, 12, PHYSICAL),
                                 BitRange(22, 42, CONSTANT)))
    r = signal_bounds(s, lay).ranges[1]
    assert (r.min_observed, r.max_observed) == (vals.min(), vals.max())


def test_extract_signal_examples():
    f = CanFrame(0, 1, 8, bytes([0xFF] + [0] * 7))
    assert extract_signal(f, BitRange(0, 8)) == 255
    f = CanFrame(0, 1, 8, bytes([0x12, 0x34] + [0] * 6))
    assert extract_signal(f, BitRange(0, 16)) == 0x1234
    with pytest.raises(SignalBoundsError):
        extract_signal(CanFrame(0, 1, 2, b"\x00\x00"), BitRange(8, 9))


@given(st.binary(min_size=1, max_size=8), st.data())
def test_extract_matches_bitstring_oracle(payload, data):
    width = 8 * len(payload)
    start = data.draw(st.integers(0, width - 1))
    length = data.draw(st.integers(1, width - start))
    bits = "".join(f"{b:08b}" for b in payload)
    expect = int(bits[start:start + length], 2)
    assert extract_signal(CanFrame(0, 1, len(payload), payload), BitRange(start, length)) == expect
    padded = np.zeros((1, 8), np.uint8)
    padded[0, :len(payload)] = list(payload)
    assert int(extract_values(padded, start, length)[0]) == expect


def test_signal_map_round_trip(tmp_path):
    lay = SignalLayout(0x1D0, 2, (BitRange(0, 4, CONSTANT, 3, 3), BitRange(4, 12, PHYSICAL, 1, 900)))
    m = SignalMap({0x1D0: lay})
    text = m.dumps()
    assert text.splitlines()[0] == '{"format": "candito-signalmap", "version": 1}'
    assert SignalMap.loads(text) == m
    m.save(tmp_path / "m.jsonl")
    assert SignalMap.load(tmp_path / "m.jsonl").dumps() == text
    assert lay.digest() == SignalMap.loads(text)[0x1D0].digest()


def test_layout_requires_full_coverage():
    with pytest.raises(ValueError):
        SignalLayout(1, 1, (BitRange(0, 4),))


def test_analyze_trace_skips_short_ids(rng):
    fields = [FieldSpec(PHYSICAL, 8, 0.3)]
    tr = layout_trace(fields, 600, rng)
    extra = Trace.from_frames([CanFrame(100.0, 0x300, 1, b"\x01")])
    merged = Trace(np.r_[tr.timestamps, extra.timestamps], np.r_[tr.ids, extra.ids],
                   np.r_[tr.dlc, extra.dlc], np.r_[tr.payload, extra.payload])
    smap, skipped = analyze_trace(merged)
    assert list(smap) == [0x100] and 0x300 in skipped
