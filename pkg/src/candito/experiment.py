"""Desk-scale end-to-end experiment on synthetic three-ID traffic.

One capture is cut in time into training, validation, calibration and test
segments. Models are trained with the default :class:`TrainConfig`, thresholds
are calibrated on the calibration segment, and detection is scored on the
clean test segment and on attacked copies of it.
"""
from __future__ import annotations

import time
from pathlib import Path
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .cantack import PresetParams, derive_seed, preset_dataset, removed_gaps
from .evalbench import measure_ttp
from .lstm_ae import TrainConfig, save_model
from .pipeline import calibrate, detect_trace, evaluate_trace, train_models
from .signals import analyze_trace
from .synth import desk_traffic
from .trace import Trace


@dataclass(frozen=True)
class DeskConfig:
    n_frames: int = 100_000
    seed: int = 0
    # consecutive fractions of the capture: train, validation, calibration, test
    roles: tuple[float, float, float, float] = (0.22, 0.06, 0.24, 0.48)
    training: TrainConfig = field(default_factory=TrainConfig)
    presets: tuple[str, ...] = ("fuzzed",)
    attack_interval: float = 4.0
    min_train_windows: int = 1000
    jobs: int = 1


def split_roles(trace: Trace, fractions) -> list[Trace]:
    t0, t1 = trace.span
    edges = t0 + (t1 - t0) * np.cumsum((0.0,) + tuple(fractions))
    edges[-1] = np.inf
    idx = np.searchsorted(trace.timestamps, edges, side="left")
    return [trace.take(np.arange(a, b)) for a, b in zip(idx, idx[1:])]


def run_desk_experiment(cfg: DeskConfig = DeskConfig(),
                        log: Callable[[str], None] = print,
                        model_dir: str | Path | None = None) -> dict:
    """Run the whole pipeline; returns a JSON-friendly result dict.
    Calibrated models are written to ``model_dir`` when given."""
    t_start = time.perf_counter()
    capture = desk_traffic(cfg.n_frames, seed=cfg.seed)
    train_t, val_t, calib_t, test_t = split_roles(capture, cfg.roles)
    smap, skipped = analyze_trace([train_t])
    log(f"signal map: {len(smap)} ids, skipped {skipped or 'none'}")

    bundles, not_trained = train_models([train_t], val_t, smap, cfg.training, cfg.seed,
                                        cfg.min_train_windows, cfg.jobs, log)
    bundles = calibrate(bundles, calib_t, log)
    t_trained = time.perf_counter()
    if model_dir is not None:
        Path(model_dir).mkdir(parents=True, exist_ok=True)
        for cid, b in bundles.items():
            save_model(b, Path(model_dir) / f"0x{cid:X}.npz")

    clean, _ = detect_trace(bundles, test_t)
    flagged = sum(v.anomalous for d in clean.values() for v in d.verdicts)
    windows = sum(len(d.verdicts) for d in clean.values())
    result = {
        "config": asdict(cfg),
        "frames": {"train": len(train_t), "validation": len(val_t),
                   "calibration": len(calib_t), "test": len(test_t)},
        "models": {f"0x{c:X}": {"k": b.k, "best_epoch": b.report["best_epoch"],
                                "stop_epoch": b.report["stop_epoch"],
                                "best_val_loss": b.report["best_val_loss"],
                                "threshold": b.threshold.threshold}
                   for c, b in bundles.items()},
        "skipped": {f"0x{c:X}": why for c, why in not_trained.items()},
        "clean": {"windows": windows, "flagged": flagged,
                  "per_id": {f"0x{c:X}": sum(v.anomalous for v in d.verdicts)
                             for c, d in clean.items()},
                  "flagged_fraction": flagged / windows if windows else float("nan"),
                  "ttp_seconds": measure_ttp(d.timing for d in clean.values())},
        "presets": {},
        "train_seconds": t_trained - t_start,
    }
    log(f"clean test: {flagged}/{windows} windows flagged")
    for preset in cfg.presets:
        attacked, manifest = preset_dataset(
            test_t, preset, smap, derive_seed(cfg.seed, "preset", preset),
            PresetParams(interval=cfg.attack_interval))
        report, _ = evaluate_trace(bundles, attacked, removed_gaps(manifest))
        m = report.metrics
        result["presets"][preset] = report.to_dict() | {"instances": len(manifest["instances"])}
        log(f"{preset}: DR {m.dr:.4f} FPR {m.fpr:.4f} F1 {m.f1:.4f} MCC {m.mcc:.4f} "
            f"({len(manifest['instances'])} attacks)")
    result["seconds"] = time.perf_counter() - t_start
    return result
