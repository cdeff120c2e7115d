"""Command line front end: ``candito {analyze,attack,train,threshold,detect,evaluate}``.

Every phase reads and writes declared files only, so phases can be rerun
independently. Failures exit nonzero with a one-line JSON error on stderr.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .cantack import (PRESETS, PresetParams, derive_seed, dump_manifest, load_specs,
                      preset_dataset, removed_gaps, run_attack, single_manifest)
from .detector import read_verdicts, write_verdicts
from .errors import CanditoError, ConfigError
from .evalbench import evaluate, measure_ttp
from .lstm_ae import TrainConfig, load_model, save_model
from .pipeline import calibrate, detect_trace, evaluate_trace, id_windows, train_models
from .signals import ClassifierParams, SignalMap, analyze_trace
from .trace import read_trace_file, write_trace_file

CONFIG_FORMAT = "candito-run"
CONFIG_VERSION = 1


@dataclass
class RunConfig:
    """Declarative run description. Relative dataset paths resolve against the
    config file; relative output paths against ``--out-dir`` (default: the
    config file's directory)."""
    train: list[Path] = field(default_factory=list)
    validation: Path | None = None
    calibration: Path | None = None
    test: Path | None = None
    signal_map: Path = Path("signalmap.jsonl")
    model_dir: Path = Path("models")
    training: TrainConfig = field(default_factory=TrainConfig)
    classifier: ClassifierParams = field(default_factory=ClassifierParams)
    min_train_windows: int = 1000
    min_analyze_frames: int = 2
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict, base: Path = Path("."), out: Path | None = None) -> "RunConfig":
        if d.get("format", CONFIG_FORMAT) != CONFIG_FORMAT:
            raise ConfigError(f"not a run config: format {d.get('format')!r}")
        if d.get("version", CONFIG_VERSION) != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {d.get('version')}")
        known = {"format", "version", "datasets", "signal_map", "model_dir", "training",
                 "classifier", "min_train_windows", "min_analyze_frames", "seed"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        out = out if out is not None else base
        ds = d.get("datasets", {})
        unknown = set(ds) - {"train", "validation", "calibration", "test"}
        if unknown:
            raise ConfigError(f"unknown dataset roles: {sorted(unknown)}")
        src = lambda p: None if p is None else base / p
        train = ds.get("train", [])
        if isinstance(train, str):
            train = [train]
        try:
            training = TrainConfig(**d.get("training", {}))
            classifier = ClassifierParams(**d.get("classifier", {}))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        cfg = cls([base / p for p in train], src(ds.get("validation")),
                  src(ds.get("calibration")), src(ds.get("test")),
                  out / d.get("signal_map", "signalmap.jsonl"),
                  out / d.get("model_dir", "models"), training, classifier,
                  int(d.get("min_train_windows", 1000)), int(d.get("min_analyze_frames", 2)),
                  int(d.get("seed", 0)))
        cfg.check_roles()
        return cfg

    @classmethod
    def load(cls, path, out: Path | None = None) -> "RunConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_dict(d, path.parent, out)

    def check_roles(self) -> None:
        paths = [p.resolve() for p in self.train]
        paths += [p.resolve() for p in (self.validation, self.calibration, self.test) if p]
        if len(paths) != len(set(paths)):
            raise ConfigError("a trace file is assigned to more than one dataset role")

    def need(self, role: str) -> Path | list[Path]:
        value = getattr(self, role)
        if not value:
            raise ConfigError(f"config has no {role} dataset")
        return value


def model_path(model_dir: Path, can_id: int) -> Path:
    return model_dir / f"0x{can_id:X}.npz"


def load_bundles(cfg: RunConfig, smap: SignalMap) -> dict:
    files = sorted(cfg.model_dir.glob("0x*.npz"))
    if not files:
        raise ConfigError(f"no models in {cfg.model_dir}")
    bundles = {}
    for f in files:
        cid = int(f.stem, 16)
        if cid not in smap:
            raise ConfigError(f"model {f.name} has no entry in the signal map")
        bundles[cid] = load_model(f, expected_digest=smap[cid].digest())
    return bundles


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n")


# --------------------------------------------------------------------------
# commands

def cmd_analyze(cfg: RunConfig, args) -> int:
    paths = cfg.need("train")
    traces = [read_trace_file(p) for p in paths]
    if not any(len(t) for t in traces):
        raise ConfigError("training traces contain no frames")
    smap, skipped = analyze_trace(traces, cfg.classifier, cfg.min_analyze_frames)
    cfg.signal_map.parent.mkdir(parents=True, exist_ok=True)
    smap.save(cfg.signal_map)
    print(f"{'id':>8} {'dlc':>3} {'physical':>8} {'counter':>7} {'crc':>3} {'const':>5}")
    for cid in smap:
        lay = smap[cid]
        bits = {k: sum(r.length for r in lay.ranges if r.kind == k)
                for k in ("counter", "crc", "constant")}
        print(f"{cid:#8x} {lay.dlc:>3} {len(lay.physical):>8} {bits['counter']:>7} "
              f"{bits['crc']:>3} {bits['constant']:>5}")
    for cid, why in skipped.items():
        print(f"{cid:#8x} skipped: {why}")
    return 0


def cmd_attack(cfg: RunConfig, args) -> int:
    trace = read_trace_file(args.trace)
    if trace.tampered.any():
        raise ConfigError("attack input must be an untampered trace")
    smap = SignalMap.load(cfg.signal_map) if cfg.signal_map.exists() else None
    if args.preset:
        if smap is None:
            raise ConfigError(f"presets need a signal map ({cfg.signal_map} not found)")
        params = PresetParams(**({"interval": args.interval} if args.interval else {}))
        out, manifest = preset_dataset(trace, args.preset, smap, cfg.seed, params)
    else:
        specs = load_specs(Path(args.spec).read_text())
        results, out = [], trace
        for i, spec in enumerate(specs):
            res = run_attack(out, spec, smap, seed=derive_seed(cfg.seed, "attack", i))
            results.append(res)
            out = res.trace
        manifest = single_manifest(results, cfg.seed)
    dest = Path(args.output)
    dest.parent.mkdir(parents=True, exist_ok=True)
    write_trace_file(out, dest)
    man = Path(args.manifest) if args.manifest else dest.with_suffix(".manifest.json")
    man.write_text(dump_manifest(manifest))
    print(f"wrote {dest} ({int(out.tampered.sum())} tampered frames) and {man}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    smap = SignalMap.load(cfg.signal_map)
    train_traces = [read_trace_file(p) for p in cfg.need("train")]
    val = read_trace_file(cfg.need("validation"))
    bundles, skipped = train_models(train_traces, val, smap, cfg.training, cfg.seed,
                                    cfg.min_train_windows, args.jobs, _log)
    cfg.model_dir.mkdir(parents=True, exist_ok=True)
    for cid, b in bundles.items():
        save_model(b, model_path(cfg.model_dir, cid))
    _write_json(cfg.model_dir / "train_report.json",
                {"trained": {f"0x{c:X}": b.report for c, b in bundles.items()},
                 "skipped": {f"0x{c:X}": why for c, why in skipped.items()}})
    print(f"trained {len(bundles)} model(s), skipped {len(skipped)}")
    return 0


def cmd_threshold(cfg: RunConfig, args) -> int:
    smap = SignalMap.load(cfg.signal_map)
    bundles = calibrate(load_bundles(cfg, smap), read_trace_file(cfg.need("calibration")), _log)
    for cid, b in bundles.items():
        save_model(b, model_path(cfg.model_dir, cid))
    _write_json(cfg.model_dir / "thresholds.json",
                {f"0x{c:X}": b.threshold.to_dict() for c, b in bundles.items()})
    for cid, b in bundles.items():
        print(f"{cid:#x} threshold {b.threshold.threshold:.6g}")
    return 0


def _out(args, cfg, name) -> Path:
    return Path(args.out_dir) / name if args.out_dir else cfg.model_dir.parent / name


def cmd_detect(cfg: RunConfig, args) -> int:
    smap = SignalMap.load(cfg.signal_map)
    bundles = load_bundles(cfg, smap)
    trace = read_trace_file(args.trace or cfg.need("test"))
    detections, _ = detect_trace(bundles, trace)
    dest = Path(args.output) if args.output else _out(args, cfg, "verdicts.jsonl")
    dest.parent.mkdir(parents=True, exist_ok=True)
    with open(dest, "w") as fh:
        write_verdicts((v for d in detections.values() for v in d.verdicts), fh)
    blocks = [d.timing for d in detections.values()]
    ttp = measure_ttp(blocks) if blocks else None
    _write_json(dest.with_suffix(".timing.json"),
                {"ttp_seconds": ttp, "ttp_scope": "forward pass and scoring only",
                 "ttp_inclusive_seconds": measure_ttp(blocks, inclusive=True) if blocks else None,
                 "packets": sum(b.packets for b in blocks)})
    flagged = sum(v.anomalous for d in detections.values() for v in d.verdicts)
    print(f"wrote {dest}: {flagged} anomalous window(s)"
          + (f", TTP {ttp * 1e3:.4f} ms/packet" if ttp else ""))
    return 0


def cmd_evaluate(cfg: RunConfig, args) -> int:
    smap = SignalMap.load(cfg.signal_map)
    bundles = load_bundles(cfg, smap)
    trace = read_trace_file(args.trace)
    removed = {}
    if args.manifest:
        removed = removed_gaps(json.loads(Path(args.manifest).read_text()))
    if args.verdicts:
        with open(args.verdicts) as fh:
            verdicts = read_verdicts(fh)
        per_id: dict[int, list] = {}
        for v in verdicts:
            per_id.setdefault(v.can_id, []).append(v)
        batches = {cid: id_windows(trace, bundles[cid].layout, bundles[cid].config.window,
                                   tumbling=True) for cid in per_id if cid in bundles}
        report = evaluate(per_id, batches, removed, dataset=str(args.trace),
                          model_digests={c: bundles[c].layout_digest for c in batches})
    else:
        report, _ = evaluate_trace(bundles, trace, removed)
    out = Path(args.report) if args.report else _out(args, cfg, "report")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.with_suffix(".json").write_text(report.to_json())
    out.with_suffix(".csv").write_text(report.to_csv())
    m = report.metrics
    print(f"DR {m.dr:.4f}  FPR {m.fpr:.4f}  F1 {m.f1:.4f}  MCC {m.mcc:.4f}"
          + (f"  TTP {report.ttp * 1e3:.4f} ms" if report.ttp else ""))
    return 0


COMMANDS = {"analyze": cmd_analyze, "attack": cmd_attack, "train": cmd_train,
            "threshold": cmd_threshold, "detect": cmd_detect, "evaluate": cmd_evaluate}


GLOBAL_DEFAULTS = {"config": None, "seed": None, "out_dir": None, "jobs": 1}


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand; SUPPRESS keeps
    # the subparser from resetting a value given before it
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="run configuration (JSON)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out-dir", help="base directory for outputs")
    common.add_argument("--jobs", type=int, help="parallel training workers (default 1)")

    p = argparse.ArgumentParser(prog="candito", parents=[common],
                                description="LSTM autoencoder CAN intrusion detection toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("analyze", parents=[common], help="classify payload bits into a signal map")
    a = sub.add_parser("attack", parents=[common], help="write a tampered, labeled trace")
    a.add_argument("trace")
    g = a.add_mutually_exclusive_group(required=True)
    g.add_argument("--spec", help="attack spec JSON")
    g.add_argument("--preset", choices=PRESETS)
    a.add_argument("-o", "--output", required=True)
    a.add_argument("--manifest")
    a.add_argument("--interval", type=float, help="seconds between preset attacks")
    sub.add_parser("train", parents=[common], help="train one model per eligible ID")
    sub.add_parser("threshold", parents=[common], help="calibrate detection thresholds")
    d = sub.add_parser("detect", parents=[common], help="score tumbling windows of a trace")
    d.add_argument("trace", nargs="?")
    d.add_argument("-o", "--output")
    e = sub.add_parser("evaluate", parents=[common], help="metrics against a labeled trace")
    e.add_argument("trace")
    e.add_argument("--verdicts", help="score a verdict file instead of rerunning detection")
    e.add_argument("--manifest", help="attack manifest (drop ground truth)")
    e.add_argument("--report", help="output path stem for report .json/.csv")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name, default in GLOBAL_DEFAULTS.items():
        if not hasattr(args, name):
            setattr(args, name, default)
    try:
        out = Path(args.out_dir) if args.out_dir else None
        cfg = RunConfig.load(args.config, out) if args.config else RunConfig.from_dict({}, Path("."), out)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        return COMMANDS[args.command](cfg, args)
    except CanditoError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}), file=sys.stderr)
        return 2
    except OSError as exc:
        print(json.dumps({"error": "io_error", "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
