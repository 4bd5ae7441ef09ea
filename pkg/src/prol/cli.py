"""Command-line entry point: ``prol {pretrain,run,grid,ablate,report}``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import ConfigError, ProlError
from .learner import ABLATION_PRESETS


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML file with experiment keys")
    common.add_argument("--seed", type=int, action="append", dest="seeds",
                        help="seed to run (repeatable; replaces the config list)")
    common.add_argument("--tasks", type=int)
    common.add_argument("--chunk-size", type=int, dest="chunk_size")
    common.add_argument("--prompt-length", type=int, dest="prompt_length")
    common.add_argument("--layers", type=lambda s: [int(v) for v in s.split(",") if v.strip()],
                        dest="prompt_layers", help="comma-separated backbone layers that receive prompts")
    common.add_argument("--lr", type=float)
    common.add_argument("--lthres", type=float)
    common.add_argument("--ablation", choices=list(ABLATION_PRESETS))
    common.add_argument("--outdir", help="result directory (default: $PROL_OUTDIR/default)")
    common.add_argument("--pretrain", dest="checkpoint", metavar="CKPT",
                        help="pretrained backbone checkpoint; omitted means pretrain on the base classes")

    p = argparse.ArgumentParser(prog="prol", description="Online class-incremental learning with generated prompts.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="pretrain the backbone on the base classes")
    sub.add_parser("run", parents=[common], help="continual run over every configured seed")
    g = sub.add_parser("grid", parents=[common], help="learning-rate grid search (first seed only)")
    g.add_argument("--grid", type=lambda s: [float(v) for v in s.split(",")], help="comma-separated lrs")
    a = sub.add_parser("ablate", parents=[common], help="run every ablation preset")
    a.add_argument("--only", type=lambda s: s.split(","), help="comma-separated subset of presets")
    r = sub.add_parser("report", help="re-emit tables and plots from an existing result directory")
    r.add_argument("path")
    return p


def _overrides(args) -> dict:
    keys = ("seeds", "tasks", "chunk_size", "prompt_length", "prompt_layers", "lr", "lthres", "ablation",
            "outdir", "checkpoint")
    return {k: getattr(args, k, None) for k in keys}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    from . import experiment as ex

    try:
        if args.command == "report":
            results = ex.load_results(args.path)
            for path in ex.emit_report(results, args.path):
                print(path)
            return 0

        cfg, notes = ex.load_config(args.config, _overrides(args))
        for n in notes:
            if n.startswith("lambda"):
                print(f"note: {n}", file=sys.stderr)
        out = Path(cfg.outdir)

        if args.command == "pretrain":
            from .backbone import save_checkpoint
            data = ex.prepare_data(cfg)
            backbone = ex.obtain_backbone(cfg.replace(checkpoint=""), data, None)
            out.mkdir(parents=True, exist_ok=True)
            path = out / "backbone.ckpt"
            save_checkpoint(backbone, path)
            print(f"wrote {path}")
            return 0

        if args.command == "run":
            res = ex.run_experiment(cfg, notes)
            agg = res.aggregate
            print(json.dumps({k: agg[k] for k in ("FAA", "FAA_std", "CAA", "CAA_std", "FFM", "FFM_std")}))
            return 0 if res.ok else 1

        if args.command == "grid":
            best, rows = ex.grid_search_lr(cfg, args.grid or ex.LR_GRID)
            print("lr,FAA,CAA,FFM")
            for r in rows:
                print(f"{r['lr']:g},{r['FAA']:.2f},{r['CAA']:.2f},{r['FFM']:.2f}")
            print(f"best lr {best:g}")
            return 0

        if args.command == "ablate":
            results = ex.ablate(cfg, args.only or tuple(ABLATION_PRESETS))
            print("component,FAA,FFM")
            for name, res in results.items():
                a = res.aggregate
                print(f"{name},{a['FAA']:.2f},{a['FFM']:.2f}" if res.seeds else f"{name},failed,failed")
            return 0 if all(r.ok for r in results.values()) else 1
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2
    except ProlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
