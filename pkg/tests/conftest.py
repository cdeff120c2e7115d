import numpy as np
import pytest
from hypothesis import settings, strategies as st

from candito.trace import CanFrame, Trace

settings.register_profile("default", deadline=None)
settings.load_profile("default")


def random_trace(rng: np.random.Generator, n: int, ids=(0x100, 0x1D0, 0x2A4),
                 tampered: bool = True, fixed_dlc: bool = False) -> Trace:
    """Random valid trace with non-decreasing timestamps (ties included)."""
    ts = np.cumsum(rng.choice([0.0, 1e-4, 3.3e-4, 1e-3], size=n)) + rng.random()
    cid = rng.choice(ids, size=n)
    if fixed_dlc:
        dlc_of = {c: int(rng.integers(1, 9)) for c in ids}
        dlc = np.array([dlc_of[c] for c in cid])
    else:
        dlc = rng.integers(0, 9, size=n)
    payload = rng.integers(0, 256, size=(n, 8), dtype=np.uint8)
    payload[np.arange(8)[None, :] >= dlc[:, None]] = 0
    flags = rng.random(n) < 0.1 if tampered else np.zeros(n, bool)
    return Trace(ts, cid, dlc, payload, flags, "random")


@st.composite
def frames(draw, dlc=None):
    d = draw(st.integers(0, 8)) if dlc is None else dlc
    return CanFrame(draw(st.floats(0, 1e6, allow_nan=False)),
                    draw(st.integers(0, (1 << 29) - 1)), d,
                    draw(st.binary(min_size=d, max_size=d)), draw(st.booleans()))


@st.composite
def traces(draw, max_size=30):
    fs = draw(st.lists(frames(), max_size=max_size))
    fs.sort(key=lambda f: f.timestamp)
    return Trace.from_frames(fs)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def check_attack_invariants(before: Trace, res) -> None:
    """Exact label-soundness and preservation checks for one attack result."""
    from candito.cantack import Dos, Drop, INJECTION

    out, spec = res.trace, res.spec
    assert not before.tampered.any()
    if isinstance(spec.kind, Drop):
        keep = np.ones(len(before), bool)
        keep[res.removed] = False
        assert len(out) == len(before) - spec.kind.count
        assert out == before.take(np.flatnonzero(keep))
        rows = np.flatnonzero(before.ids == spec.target_id)
        pos = np.searchsorted(rows, res.removed)
        assert np.array_equal(rows[pos], res.removed)
        assert np.all(np.diff(pos) == 1), "dropped frames must be consecutive"
        assert not out.tampered.any()
    elif isinstance(spec.kind, Dos) or spec.mode == INJECTION:
        assert len(out) == len(before) + res.inserted
        assert int(out.tampered.sum()) == res.inserted
        assert out.take(np.flatnonzero(~out.tampered)) == before
        assert np.all(np.diff(out.timestamps) >= 0)
    else:
        assert len(out) == len(before)
        assert np.array_equal(out.timestamps, before.timestamps)
        assert np.array_equal(out.ids, before.ids)
        assert np.array_equal(out.dlc, before.dlc)
        assert np.array_equal(np.flatnonzero(out.tampered), res.touched)
        untouched = ~out.tampered
        assert np.array_equal(out.payload[untouched], before.payload[untouched])
        assert len(res.touched) == spec.kind.count
        assert np.all(out.ids[res.touched] == spec.target_id)
