"""Pipeline phases shared by the command line and the experiment scripts:
per-ID window building, training, calibration, detection and evaluation."""
from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .cantack import derive_seed
from .detector import Detection, TimingBlock, calibrate_threshold, detect
from .errors import ConfigError, IneligibleError
from .evalbench import EvalReport, evaluate
from .lstm_ae import ModelBundle, TrainConfig, train
from .preprocess import WindowBatch, sliding_windows, tumbling_windows, vectorize
from .signals import SignalLayout, SignalMap
from .trace import IdStream, Trace

Log = Callable[[str], None]


def _quiet(_msg: str) -> None:
    pass


def id_windows(traces: Trace | Sequence[Trace], layout: SignalLayout, n: int,
               tumbling: bool = False) -> WindowBatch:
    """Windows of one ID; each trace is windowed separately so no window
    straddles two captures."""
    if isinstance(traces, Trace):
        traces = [traces]
    make = tumbling_windows if tumbling else sliding_windows
    return WindowBatch.concat([make(vectorize(IdStream.of(t, layout.can_id), layout), n)
                               for t in traces])


def _require_clean(trace: Trace, role: str) -> None:
    if trace.tampered.any():
        raise ConfigError(f"{role} trace {trace.source_label!r} contains tampered frames")


def train_seed(seed: int, can_id: int) -> int:
    return derive_seed(seed, "train", can_id) % 2**32


@dataclass(frozen=True)
class _Job:
    can_id: int
    layout: SignalLayout
    train: np.ndarray
    val: np.ndarray
    config: TrainConfig


def _run_job(job: _Job, log: Log = _quiet) -> ModelBundle:
    return train(job.train, job.val, job.config, can_id=job.can_id, layout=job.layout, log=log)


def train_models(train_traces: Sequence[Trace], val_trace: Trace, smap: SignalMap,
                 config: TrainConfig = TrainConfig(), seed: int = 0,
                 min_train_windows: int = 1000, jobs: int = 1,
                 log: Log = _quiet) -> tuple[dict[int, ModelBundle], dict[int, str]]:
    """One model per eligible ID. Returns ``(bundles, skipped)``."""
    for t in train_traces:
        _require_clean(t, "training")
    _require_clean(val_trace, "validation")
    work, skipped = [], {}
    for cid in smap:
        layout = smap[cid]
        try:
            tw = id_windows(train_traces, layout, config.window)
            vw = id_windows(val_trace, layout, config.window)
        except IneligibleError as exc:
            skipped[cid] = str(exc)
            continue
        if len(tw) < min_train_windows:
            skipped[cid] = f"{len(tw)} training windows < {min_train_windows}"
            continue
        if len(vw) == 0:
            skipped[cid] = "no validation windows"
            continue
        work.append(_Job(cid, layout, tw.windows, vw.windows,
                         replace(config, seed=train_seed(seed, cid))))
    for cid, why in skipped.items():
        log(f"id {cid:#x} skipped: {why}")
    bundles = {}
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for job, bundle in zip(work, pool.map(_run_job, work)):
                bundles[job.can_id] = bundle
                log(f"id {job.can_id:#x} trained: best epoch {bundle.report['best_epoch']}")
    else:
        for job in work:
            t0 = time.perf_counter()
            bundles[job.can_id] = _run_job(job, log)
            log(f"id {job.can_id:#x} trained in {time.perf_counter() - t0:.1f}s")
    return bundles, skipped


def calibrate(bundles: Mapping[int, ModelBundle], calib_trace: Trace,
              log: Log = _quiet) -> dict[int, ModelBundle]:
    """Attach a threshold to every bundle, computed on sliding calibration windows."""
    _require_clean(calib_trace, "calibration")
    out = {}
    for cid, bundle in bundles.items():
        batch = id_windows(calib_trace, bundle.layout, bundle.config.window)
        thr = calibrate_threshold(bundle, batch)
        log(f"id {cid:#x} threshold {thr.threshold:.6g} over {thr.calibration_score_count} windows")
        out[cid] = replace(bundle, threshold=thr)
    return out


def detect_trace(bundles: Mapping[int, ModelBundle], trace: Trace,
                 batch_size: int = 1) -> tuple[dict[int, Detection], dict[int, WindowBatch]]:
    """Tumbling-window detection for every modelled ID present in ``trace``."""
    present = set(trace.unique_ids())
    detections, batches = {}, {}
    for cid, bundle in bundles.items():
        if cid not in present:
            continue
        t0 = time.perf_counter()
        batch = id_windows(trace, bundle.layout, bundle.config.window, tumbling=True)
        det = detect(bundle, batch, batch_size=batch_size)
        det.timing = replace(det.timing, seconds_inclusive=time.perf_counter() - t0)
        detections[cid], batches[cid] = det, batch
    return detections, batches


def evaluate_trace(bundles: Mapping[int, ModelBundle], trace: Trace,
                   removed: Mapping[int, Sequence[float]] | None = None,
                   batch_size: int = 1) -> tuple[EvalReport, dict[int, Detection]]:
    detections, batches = detect_trace(bundles, trace, batch_size)
    report = evaluate({cid: d.verdicts for cid, d in detections.items()}, batches,
                      removed=removed, timing=[d.timing for d in detections.values()],
                      dataset=trace.source_label,
                      model_digests={cid: bundles[cid].layout_digest for cid in detections})
    return report, detections


def timing_blocks(detections: Mapping[int, Detection]) -> list[TimingBlock]:
    return [d.timing for d in detections.values()]
