import io

import numpy as np
import pytest
from hypothesis import given

from candito.errors import InsufficientDataError, TraceOrderError, TraceParseError
from candito.trace import (CanFrame, IdStream, Trace, mean_interarrival, parse_trace,
                           split_by_id, write_trace)

from conftest import random_trace, traces

HEADER = "timestamp,id,dlc,payload,isTampered\n"


def test_parse_row_fields():
    t = parse_trace(HEADER + "0.000123,0x1D0,8,11 22 33 44 55 66 77 88,0\n")
    assert t[0] == CanFrame(0.000123, 0x1D0, 8, bytes.fromhex("1122334455667788"), False)


def test_parse_empty_payload_tampered():
    t = parse_trace(HEADER + "0.5,0x201,0,,1\n")
    assert t[0] == CanFrame(0.5, 0x201, 0, b"", True)


def test_parse_decreasing_timestamp_reports_line():
    with pytest.raises(TraceOrderError, match="line 3"):
        parse_trace(HEADER + "1.0,0x10,0,,0\n0.9,0x10,0,,0\n")


def test_parse_tolerant_inputs():
    text = "timestamp,id,dlc,payload\n0.1,1d0,2,AABB\n0.1,0x7ff,1,0c\n"
    t = parse_trace(text)
    assert [f.can_id for f in t] == [0x1D0, 0x7FF]
    assert t[0].payload == b"\xaa\xbb" and not t.tampered.any()


@pytest.mark.parametrize("row, line", [
    ("0.1,0x10,2,AA\n", 2),            # dlc mismatch
    ("0.1,0x10,1,ZZ,0\n", 2),          # non-hex payload
    ("0.1,0x10,1\n", 2),               # too few columns
    ("0.1,0x10,9,00 00 00 00 00 00 00 00 00,0\n", 2),
])
def test_parse_malformed_rows(row, line):
    with pytest.raises(TraceParseError, match=f"line {line}"):
        parse_trace(HEADER + row)


def test_parse_requires_header():
    with pytest.raises(TraceParseError, match="line 1"):
        parse_trace("0.1,0x10,0,,0\n")


def test_write_empty_is_header_only():
    assert write_trace(Trace.empty()) == HEADER


def test_write_single_frame_round_trip():
    t = Trace.from_frames([CanFrame(1 / 3, 0x1D0, 3, b"\x01\x02\x03", True)])
    text = write_trace(t)
    assert len(text.splitlines()) == 2
    assert "0x1D0" in text and "01 02 03" in text
    assert parse_trace(text) == t


def test_write_large_random_round_trip(rng):
    t = random_trace(rng, 10_000)
    buf = io.StringIO()
    write_trace(t, buf)
    assert parse_trace(buf.getvalue()) == t


@given(traces())
def test_round_trip_property(t):
    assert parse_trace(write_trace(t)) == t


def test_split_by_id_small():
    t = Trace.from_frames([CanFrame(0, 0xA, 0, b""), CanFrame(1, 0xB, 0, b""),
                           CanFrame(2, 0xA, 0, b"")])
    s = split_by_id(t)
    assert s[0xA].indices.tolist() == [0, 2] and s[0xB].indices.tolist() == [1]


def test_split_single_id_identity(rng):
    t = random_trace(rng, 200, ids=(0x55,))
    (s,) = split_by_id(t).values()
    assert s.indices.tolist() == list(range(200))
    assert np.array_equal(s.payload, t.payload)


@given(traces(max_size=60))
def test_split_is_partition(t):
    streams = split_by_id(t)
    idx = np.sort(np.concatenate([s.indices for s in streams.values()] or [np.zeros(0, int)]))
    assert idx.tolist() == list(range(len(t)))
    for cid, s in streams.items():
        assert np.all(np.diff(s.indices) > 0)
        assert np.all(t.ids[s.indices] == cid)


def test_mean_interarrival_examples(rng):
    mk = lambda ts: IdStream.of(Trace(ts, [1] * len(ts), [0] * len(ts), np.zeros((len(ts), 8))), 1)
    assert mean_interarrival(mk([0, 0.1, 0.2])) == pytest.approx(0.1)
    assert mean_interarrival(mk([0, 1])) == 1.0
    ts = np.arange(500) * 0.002 + rng.uniform(-1e-4, 1e-4, 500) + 1
    assert abs(mean_interarrival(mk(np.sort(ts))) - 0.002) < 1e-4
    with pytest.raises(InsufficientDataError):
        mean_interarrival(mk([0.5]))


def test_trace_is_immutable(rng):
    t = random_trace(rng, 10)
    with pytest.raises(ValueError):
        t.payload[0, 0] = 1


def test_frame_invariants():
    with pytest.raises(ValueError):
        CanFrame(0, 1 << 29, 0, b"")
    with pytest.raises(ValueError):
        CanFrame(0, 1, 2, b"\x00")
