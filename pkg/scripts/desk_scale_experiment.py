"""End-to-end desk-scale detection run on synthetic three-ID traffic.

    python scripts/desk_scale_experiment.py --out results/desk.json
    python scripts/desk_scale_experiment.py --presets fuzzed drop masquerade

Prints per-epoch progress to stderr and a summary table to stdout.
"""
import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from candito.cantack import PRESETS
from candito.experiment import DeskConfig, run_desk_experiment


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--frames", type=int, default=DeskConfig.n_frames)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--presets", nargs="+", choices=PRESETS, default=["fuzzed"])
    p.add_argument("--interval", type=float, default=DeskConfig.attack_interval,
                   help="seconds between attacks on one ID")
    p.add_argument("--max-epochs", type=int, help="override the training epoch cap")
    p.add_argument("--jobs", type=int, default=1, help="parallel training workers")
    p.add_argument("--model-dir", type=Path, help="save the calibrated models here")
    p.add_argument("--out", type=Path, help="write the full result as JSON")
    args = p.parse_args(argv)

    cfg = DeskConfig(n_frames=args.frames, seed=args.seed, presets=tuple(args.presets),
                     attack_interval=args.interval, jobs=args.jobs)
    if args.max_epochs:
        cfg = replace(cfg, training=replace(cfg.training, max_epochs=args.max_epochs))
    result = run_desk_experiment(cfg, lambda m: print(m, file=sys.stderr), args.model_dir)

    print(f"\n{'model':>6} {'k':>2} {'epochs':>6} {'val loss':>10} {'threshold':>10}")
    for cid, m in result["models"].items():
        print(f"{cid:>6} {m['k']:>2} {m['stop_epoch']:>6} {m['best_val_loss']:>10.3e} "
              f"{m['threshold']:>10.4g}")
    c = result["clean"]
    print(f"\nclean test: {c['flagged']}/{c['windows']} windows flagged "
          f"({c['flagged_fraction']:.4f})")
    print(f"\n{'preset':>12} {'DR':>7} {'FPR':>7} {'F1':>7} {'MCC':>7} {'TTP ms':>8} {'attacks':>7}")
    for name, rep in result["presets"].items():
        a = rep["aggregate"]
        print(f"{name:>12} {a['dr']:>7.4f} {a['fpr']:>7.4f} {a['f1']:>7.4f} {a['mcc']:>7.4f} "
              f"{rep['ttp_seconds'] * 1e3:>8.4f} {rep['instances']:>7}")
    print(f"\ntotal {result['seconds'] / 60:.1f} min (training {result['train_seconds'] / 60:.1f} min)")
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps(result, indent=2, default=str) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
