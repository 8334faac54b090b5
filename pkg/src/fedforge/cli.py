"""Command-line entry point: ``fedforge {run,sweep,ablate,transfer-eval,gen-data}``."""
from __future__ import annotations

import argparse
import json
import os
import sys

from . import config as cfgmod
from . import experiment as ex


def _load(args):
    cfg = cfgmod.load(args.config)
    base_dir = os.path.dirname(os.path.abspath(args.config)) if os.path.exists(args.config) else "."
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["experiment.seed"] = args.seed
    if getattr(args, "rule", None) is not None:
        changes["aggregator.rule"] = args.rule
    if changes:
        cfg = cfgmod.parse_text(cfgmod.render(cfg.replace(**changes)), base_dir)
    out = args.out or cfg.outputs.dir
    return cfg, base_dir, out


def _u64(text):
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _print(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_run(args):
    cfg, base_dir, out = _load(args)

    def progress(rec):
        if args.verbose:
            print(f"round {rec.round:4d}  mta {rec.mta:.3f}  asr {rec.asr:.3f}"
                  + ("  [attacker]" if rec.malicious_selected else ""), file=sys.stderr)

    summary = ex.run_experiment(cfg, out, base_dir, progress)
    _print({k: summary.get(k) for k in ("rule", "attack", "final_mta", "final_asr",
                                        "post_window_asr", "delta_mta")})
    print(f"results written to {out}")


def cmd_sweep(args):
    cfg, base_dir, out = _load(args)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    result = ex.sweep(cfg, args.axis, values, out, base_dir)
    for label, r in result.items():
        s = r["summary"] or {}
        post = s.get("post_window_asr")
        print(f"{label:<20} {r['status']:<8} post-window asr "
              + ("-" if post is None else f"{post:.3f}"))
    print(f"results written to {out}")


def cmd_ablate(args):
    cfg, base_dir, out = _load(args)
    report = ex.ablate(cfg, args.drop, out, base_dir)
    for name in ("full", "ablated"):
        if name in report:
            s = report[name]
            norms = s.get("path_update_norms") or {}
            print(f"{name:<8} final asr {s['final_asr']:.3f}  final mta {s['final_mta']:.3f}  "
                  f"p95 path-update norm {norms.get('p95', float('nan')):.4f}")
    print(f"results written to {out}")


def cmd_transfer(args):
    report = ex.transfer_eval(args.trigger, args.checkpoint, args.dataset)
    _print(report)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        ex._write_json(os.path.join(args.out, "transfer.json"), report)


def cmd_gen_data(args):
    cfg, _, out = _load(args)
    paths = ex.gen_data(cfg, out)
    _print(paths)


def build_parser():
    p = argparse.ArgumentParser(prog="fedforge", description="Federated backdoor attack/defense simulator.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, rule=True):
        sp.add_argument("--config", required=True, help="config file or preset name (e.g. paper-toy)")
        sp.add_argument("--out", help="output directory (overrides outputs.dir)")
        sp.add_argument("--seed", type=_u64, help="override experiment.seed")
        if rule:
            sp.add_argument("--rule", help="override aggregator.rule")

    sp = sub.add_parser("run", help="run one experiment")
    common(sp)
    sp.add_argument("-v", "--verbose", action="store_true", help="print per-round progress")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="run one experiment per value of an axis")
    common(sp)
    sp.add_argument("--axis", required=True, choices=sorted(ex.SWEEP_AXES))
    sp.add_argument("--values", required=True, help="comma-separated values")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("ablate", help="compare the full method with one part removed")
    common(sp)
    sp.add_argument("--drop", required=True, choices=ex.ABLATIONS)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("transfer-eval", help="ASR of a saved trigger on a saved model")
    sp.add_argument("--trigger", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", help="also write transfer.json here")
    sp.set_defaults(func=cmd_transfer)

    sp = sub.add_parser("gen-data", help="write the synthetic train/test sets to disk")
    common(sp, rule=False)
    sp.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        ex.thread_cap()
        args.func(args)
    except cfgmod.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
