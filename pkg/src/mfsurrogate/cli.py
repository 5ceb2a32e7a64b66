"""Command-line entry point: ``mfsurrogate <command> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as C
from . import pipeline as P


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="JSON file merged over the preset")
    p.add_argument("--preset", default="desk", choices=sorted(C.PRESETS))
    p.add_argument("--seed", type=int, default=None, help="master seed (default: config 'seed')")
    p.add_argument("--jobs", type=int, default=None, help=f"worker processes (default: ${C.JOBS_ENV} or 1)")
    p.add_argument("--out", required=out_required, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mfsurrogate", description="Multifidelity reservoir surrogate workflow")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="draw channelized geomodels")
    _common(p)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--prefix", default="m")

    p = sub.add_parser("upscale", help="upscale geomodels to the coarse grid")
    _common(p)
    p.add_argument("--models", required=True, help="geomodel directory or manifest")

    p = sub.add_parser("simulate", help="run the two-phase simulator")
    _common(p)
    p.add_argument("--models", required=True, help="geomodel (hf) or coarse-model (lf) directory")
    p.add_argument("--fidelity", choices=("hf", "lf"), required=True)
    p.add_argument("--selection", help="CSV from 'select'; simulate only those ids")

    p = sub.add_parser("select", help="pick representative samples from LF responses")
    _common(p)
    p.add_argument("--lf-sims", required=True)
    p.add_argument("--count", type=int, default=None, help="number of samples (default: data.n_hf)")

    p = sub.add_parser("train", help="train pressure and saturation networks")
    _common(p)
    p.add_argument("--models", required=True)
    p.add_argument("--hf-sims", required=True)
    p.add_argument("--lf-sims")
    p.add_argument("--selection")
    p.add_argument("--mode", choices=("multi", "reference"), default="multi")
    p.add_argument("--resume", action="store_true", help="reuse an existing step-1 checkpoint")

    p = sub.add_parser("evaluate", help="error statistics on a test set")
    _common(p)
    p.add_argument("--models", required=True)
    p.add_argument("--hf-sims", required=True)
    p.add_argument("--lf-sims", help="also report the LF projection")
    p.add_argument("--checkpoints", nargs="+", required=True, metavar="LABEL=DIR")

    p = sub.add_parser("history-match", help="ESMDA on synthetic observations")
    _common(p)
    p.add_argument("--forward", choices=("lf", "hf", "surrogate"))
    p.add_argument("--checkpoints", help="trained networks for the surrogate forward")

    p = sub.add_parser("cost", help="training-data simulation cost")
    _common(p, out_required=False)
    p.add_argument("--n-lf", type=int)
    p.add_argument("--n-hf", type=int)
    return ap


def _labelled(pairs: list[str]) -> dict[str, str]:
    out = {}
    for item in pairs:
        label, sep, path = item.partition("=")
        if not sep:
            label, path = Path(item).name, item
        out[label] = path
    return out


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    cfg = C.load_config(args.config, args.preset)
    seed = cfg["seed"] if args.seed is None else args.seed
    jobs = C.default_jobs() if args.jobs is None else max(1, args.jobs)
    cmd = args.command
    if cmd == "generate":
        result = P.cmd_generate(cfg, args.count, seed, args.out, jobs, args.prefix)
    elif cmd == "upscale":
        result = P.cmd_upscale(cfg, args.models, args.out, jobs)
    elif cmd == "simulate":
        ids = P.selected_ids(args.selection) if args.selection else None
        result = P.cmd_simulate(cfg, args.models, args.fidelity, args.out, jobs, ids)
    elif cmd == "select":
        n = cfg["data"]["n_hf"] if args.count is None else args.count
        result = P.cmd_select(cfg, args.lf_sims, n, seed, Path(args.out) / "selection.csv")
    elif cmd == "train":
        result = P.cmd_train(cfg, args.models, args.hf_sims, args.out, seed, args.lf_sims, args.selection,
                             args.mode, args.resume)
    elif cmd == "evaluate":
        result = P.cmd_evaluate(cfg, _labelled(args.checkpoints), args.models, args.hf_sims, args.out,
                                args.lf_sims)
    elif cmd == "history-match":
        result = P.cmd_history_match(cfg, args.out, seed, jobs, args.checkpoints, args.forward)
    else:
        result = P.cmd_cost(cfg, args.out, args.n_lf, args.n_hf)
    if isinstance(result, dict):
        print(json.dumps(result, indent=2, sort_keys=True))
    else:
        print(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
