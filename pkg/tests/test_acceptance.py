"""Acceptance criteria, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line (bypassing output capture)
before asserting, so ``pytest tests/test_acceptance.py`` doubles as a report.
Run directly with ``python tests/test_acceptance.py``.
"""
import math
import sys
import time
from fractions import Fraction

import numpy as np
import pytest

from candito.cantack import (INJECTION, MASQUERADE, AttackSpec, BasicInjection, Dos, Drop,
                             Fuzzy, ProgressiveInjection, Replacement, Replay, run_attack,
                             seamless_value, set_signal)
from candito.detector import nearest_rank
from candito.evalbench import confusion, metrics
from candito.experiment import DeskConfig, run_desk_experiment
from candito.lstm_ae import (ModelBundle, backward, dumps_model, forward, init_params,
                             load_model, loss)
from candito.signals import BitRange, analyze_trace, extract_signal, extract_values
from candito.synth import desk_traffic, frames_needed, layout_trace, random_layout, truth_layout
from candito.trace import CanFrame, IdStream, parse_trace, split_by_id, write_trace

from conftest import check_attack_invariants, random_trace


@pytest.fixture
def verdict(capsys):
    def emit(number: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
        assert ok, detail
    return emit


# ---------------------------------------------------------------- 1

def test_criterion_1_gradient_oracle(verdict):
    t0 = time.perf_counter()
    k, n, units, eps = 3, 5, 4, 1e-4
    params = init_params(k, dense_units=8, lstm_units=units, seed=11, dtype="float64")
    rng = np.random.default_rng(11)
    x = rng.random((2, n, k))
    mask = (rng.random((2, n, 8)) >= 0.2) / 0.8

    def objective():
        return loss(forward(params, x, training=True, mask=mask)[0], x)

    _, cache = forward(params, x, training=True, mask=mask)
    grads = backward(params, cache)
    worst_name, worst = "", 0.0
    for name, p in params.items():
        num = np.zeros_like(p)
        for i in np.ndindex(p.shape):
            orig = p[i]
            p[i] = orig + eps
            up = objective()
            p[i] = orig - eps
            down = objective()
            p[i] = orig
            num[i] = (up - down) / (2 * eps)
        rel = np.linalg.norm(num - grads[name]) / max(
            np.linalg.norm(num) + np.linalg.norm(grads[name]), 1e-300)
        if rel > worst:
            worst_name, worst = name, rel
    secs = time.perf_counter() - t0
    verdict(1, worst < 1e-4 and secs < 60,
            f"worst relative gradient error {worst:.2e} ({worst_name}) over "
            f"{len(params)} parameter tensors in {secs:.1f}s")


# ---------------------------------------------------------------- 2

def test_criterion_2_round_trips_and_partitions(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    cases = 1000
    failures = {"trace": 0, "model": 0, "partition": 0, "set/extract": 0}
    for _ in range(cases):
        t = random_trace(rng, int(rng.integers(0, 40)), ids=tuple(rng.integers(0, 1 << 29, 4)))
        if parse_trace(write_trace(t)) != t:
            failures["trace"] += 1

        streams = split_by_id(t)
        idx = np.sort(np.concatenate([s.indices for s in streams.values()] or [[]]))
        ok = np.array_equal(idx, np.arange(len(t)))
        for cid, s in streams.items():
            ok &= bool(np.all(t.ids[s.indices] == cid)) and bool(np.all(np.diff(s.indices) > 0))
        failures["partition"] += not ok

        dlc = int(rng.integers(1, 9))
        frame = CanFrame(0.0, 1, dlc, rng.integers(0, 256, dlc, dtype=np.uint8).tobytes())
        start = int(rng.integers(0, 8 * dlc))
        length = int(rng.integers(1, 8 * dlc - start + 1))
        value = int.from_bytes(rng.bytes(8), "big") % (1 << length)
        r = BitRange(start, length)
        out = set_signal(frame, r, value)
        mask = ((1 << length) - 1) << (8 * dlc - start - length)
        unchanged = (int.from_bytes(out.payload, "big") & ~mask) == \
            (int.from_bytes(frame.payload, "big") & ~mask)
        failures["set/extract"] += not (extract_signal(out, r) == value and unchanged)

    for _ in range(cases):
        k = int(rng.integers(1, 9))
        bundle = ModelBundle(init_params(k, dense_units=int(rng.integers(2, 9)),
                                         lstm_units=int(rng.integers(1, 5)),
                                         seed=int(rng.integers(0, 1 << 31))),
                             can_id=int(rng.integers(0, 1 << 29)))
        back = load_model(dumps_model(bundle))
        same = list(back.params) == list(bundle.params) and all(
            np.array_equal(back.params[p], bundle.params[p]) and
            back.params[p].dtype == bundle.params[p].dtype for p in bundle.params)
        failures["model"] += not (same and back.can_id == bundle.can_id)
    secs = time.perf_counter() - t0
    verdict(2, not any(failures.values()) and secs < 60,
            f"{cases} cases per suite, failures {failures}, {secs:.1f}s")


# ---------------------------------------------------------------- 3

def test_criterion_3_read_oracle(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    layouts, wrong = 50, []
    for i in range(layouts):
        fields = random_layout(rng)
        trace = layout_trace(fields, frames_needed(fields), rng, can_id=0x100)
        smap, _ = analyze_trace(trace)
        got = [(r.start_bit, r.length, r.kind) for r in smap[0x100].ranges]
        want = [(r.start_bit, r.length, r.kind) for r in truth_layout(fields, 0x100).ranges]
        if got != want:
            wrong.append(i)
    secs = time.perf_counter() - t0
    verdict(3, not wrong and secs < 60,
            f"{layouts - len(wrong)}/{layouts} generator layouts recovered exactly "
            f"(mismatched: {wrong or 'none'}), {secs:.1f}s")


# ---------------------------------------------------------------- 4

def test_criterion_4_cantack_invariants(verdict):
    t0 = time.perf_counter()
    trace = desk_traffic(50_000, seed=4)
    smap, _ = analyze_trace(trace)
    cid = 0x1D0
    s = IdStream.of(trace, cid)
    sniff = float(s.timestamps[200])
    reps = (Replacement(0, 12, "seamless_change", target_value=3000),
            Replacement(16, 8, "fuzzy"), Replacement(28, 10, "min"),
            Replacement(44, 4, "counter"))
    kinds = {
        "basic": BasicInjection(bytes(range(8)), 50),
        "progressive": ProgressiveInjection(tuple(bytes([j] * 8) for j in range(25))),
        "fuzzy": Fuzzy(25, ((0, 12), (16, 8))),
        "fuzzy-payload": Fuzzy(25),
        "replay": Replay(25, sniff, True, 25, reps),
    }
    checked, problems = 0, []
    start = 20.0
    for name, kind in kinds.items():
        for mode in (MASQUERADE, INJECTION):
            spec = AttackSpec(cid, start, kind, mode, rate_multiplier=20.0)
            res = run_attack(trace, spec, smap, seed=checked)
            try:
                check_attack_invariants(trace, res)
            except AssertionError as exc:
                problems.append(f"{name}/{mode}: {exc}")
            checked += 1
            if name == "basic" and mode == INJECTION and len(res.trace) != len(trace) + 50:
                problems.append("injection recipe did not add exactly 50 frames")
            if name == "replay":
                out = IdStream.of(res.trace, cid)
                p = out.payload[out.tampered]
                first_row = int(np.searchsorted(s.timestamps, start))
                v_last = lambda b, ln: int(extract_values(
                    s.payload[first_row - 1:first_row], b, ln)[0])
                seam = extract_values(p, 0, 12).astype(int)
                want = [seamless_value(v_last(0, 12), 3000, j, 25) for j in range(1, 26)]
                if list(seam) != want or seam[-1] != 3000:
                    problems.append(f"seamless endpoint ({mode})")
                ctr = extract_values(p, 44, 4).astype(int)
                if list(ctr) != [(v_last(44, 4) + j) % 16 for j in range(1, 26)]:
                    problems.append(f"counter wrap ({mode})")
    for spec in (AttackSpec(cid, start, Drop(25)), AttackSpec(cid, start, Dos(0.05))):
        res = run_attack(trace, spec, smap)
        try:
            check_attack_invariants(trace, res)
        except AssertionError as exc:
            problems.append(f"{spec.kind.name}: {exc}")
        checked += 1
        if isinstance(spec.kind, Drop) and len(res.trace) != len(trace) - 25:
            problems.append("drop did not remove exactly 25 frames")
    secs = time.perf_counter() - t0
    verdict(4, not problems and secs < 120,
            f"{checked} attack/mode combinations on {len(trace)} frames, "
            f"problems: {problems or 'none'}, {secs:.1f}s")


# ---------------------------------------------------------------- 5, 6, 8

@pytest.fixture(scope="module")
def desk_result():
    return run_desk_experiment(DeskConfig(), log=lambda m: None)


@pytest.mark.slow
def test_criterion_5_end_to_end_detection(verdict, desk_result):
    r = desk_result
    fz = r["presets"]["fuzzed"]["aggregate"]
    ok = fz["dr"] >= 0.95 and fz["fpr"] <= 0.03 and r["seconds"] < 15 * 60
    verdict(5, ok, f"fuzzed DR {fz['dr']:.4f} FPR {fz['fpr']:.4f} F1 {fz['f1']:.4f} "
                   f"MCC {fz['mcc']:.4f} over {len(r['models'])} models, "
                   f"total {r['seconds'] / 60:.1f} min")


def nearest_rank_oracle(scores, num=9999, den=10000):
    ordered = sorted(scores)
    rank = max(1, -(-num * len(ordered) // den))
    return ordered[rank - 1]


@pytest.mark.slow
def test_criterion_6_threshold_semantics(verdict, desk_result):
    rng = np.random.default_rng(6)
    mismatches = 0
    for _ in range(10_000):
        m = int(rng.integers(1, 400))
        scores = rng.random(m) if rng.random() < 0.7 else rng.integers(0, 5, m).astype(float)
        mismatches += nearest_rank(scores) != nearest_rank_oracle(scores.tolist())
    clean = desk_result["clean"]
    frac = clean["flagged_fraction"]
    verdict(6, frac <= 0.003 and mismatches == 0,
            f"clean held-out windows flagged {clean['flagged']}/{clean['windows']} = {frac:.4f}; "
            f"nearest-rank mismatches {mismatches}/10000")


@pytest.mark.slow
def test_criterion_8_timing_budget(verdict, desk_result):
    ttp = desk_result["presets"]["fuzzed"]["ttp_seconds"]
    incl = desk_result["presets"]["fuzzed"]["ttp_inclusive_seconds"]
    ks = [m["k"] for m in desk_result["models"].values()]
    verdict(8, ttp < 0.4e-3 and max(ks) <= 8,
            f"TTP {ttp * 1e3:.4f} ms/packet (forward pass and scoring only; "
            f"{incl * 1e3:.4f} ms including windowing), k = {ks}, n = 40")


# ---------------------------------------------------------------- 7

def brute_metrics(p, a):
    tp = sum(1 for x, y in zip(p, a) if x and y)
    fp = sum(1 for x, y in zip(p, a) if x and not y)
    tn = sum(1 for x, y in zip(p, a) if not x and not y)
    fn = sum(1 for x, y in zip(p, a) if not x and y)
    dr = Fraction(tp, tp + fn) if tp + fn else Fraction(0)
    fpr = Fraction(fp, fp + tn) if fp + tn else Fraction(0)
    f1 = Fraction(2 * tp, 2 * tp + fp + fn) if 2 * tp + fp + fn else Fraction(0)
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    mcc = (tp * tn - fp * fn) / math.sqrt(den) if den else 0.0
    return (tp, fp, tn, fn), (float(dr), float(fpr), float(f1), mcc)


def test_criterion_7_metrics_oracle(verdict):
    rng = np.random.default_rng(7)
    worst, count_errors = 0.0, 0
    degenerate = set()
    for i in range(1000):
        m = int(rng.integers(1, 300))
        bias = rng.random()
        p = rng.random(m) < bias
        a = rng.random(m) < (rng.random() if i % 10 else (0.0 if i % 20 else 1.0))
        if i % 50 == 0:
            p = np.zeros(m, bool)
        c = confusion(p, a)
        counts, want = brute_metrics(p.tolist(), a.tolist())
        count_errors += (c.tp, c.fp, c.tn, c.fn) != counts
        got = metrics(c)
        degenerate.update(got.undefined)
        worst = max(worst, *(abs(g - w) for g, w in
                             zip((got.dr, got.fpr, got.f1, got.mcc), want)))
    ok = worst <= 1e-12 and count_errors == 0 and {"dr", "fpr", "mcc"} <= degenerate
    verdict(7, ok, f"1000 vectors, count mismatches {count_errors}, max metric error "
                   f"{worst:.1e}, degenerate cases exercised: {sorted(degenerate)}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-p", "no:cacheprovider"]))
