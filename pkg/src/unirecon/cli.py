"""Command-line entry point: ``unirecon <verb> [options]``.

Exit status: 0 success, 1 validation or config error, 2 missing dependency
(checkpoint, dataset), 3 numeric abort, 4 acceptance failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .config import PRESETS, load_config, parse_override
from .errors import AcceptanceFailure, UniReconError

log = logging.getLogger("unirecon")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of dotted-key overrides")
    p.add_argument("--preset", choices=sorted(PRESETS), help="named preset (default: 'accept' for acceptance runs, else 'default')")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--workdir", help="run directory (default: paths.workdir)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="unirecon", description="caption-bottleneck reconstruction pipeline")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen-data", help="generate the scene dataset")
    _common(p)
    p.add_argument("--force", action="store_true", help="overwrite existing dataset files")

    for verb in pipeline.STAGES:
        p = sub.add_parser(verb, help=f"run {verb}")
        _common(p)
        p.add_argument("--resume", nargs="?", const=True, default=False, metavar="CKPT",
                       help="continue from the stage checkpoint (or the given file)")

    p = sub.add_parser("reconstruct", help="image or scene spec -> caption -> reconstruction")
    _common(p)
    p.add_argument("input", help="PPM image or JSON scene spec")
    p.add_argument("--out", default="recon", help="output directory")
    p.add_argument("--oracle", action="store_true", help="use the parse+render decoder stub")
    p.add_argument("--captioner")
    p.add_argument("--decoder")

    p = sub.add_parser("eval", help="benchmarks")
    _common(p)
    p.add_argument("bench", choices=["protocol1", "protocol2", "accept"])
    p.add_argument("--oracle", action="store_true")
    p.add_argument("--captioner")
    p.add_argument("--decoder")
    p.add_argument("--baseline", help="baseline captioner checkpoint for protocol2")
    p.add_argument("--only", help="comma-separated criteria for accept (e.g. A1,A3)")

    p = sub.add_parser("accept", help="run the acceptance checklist")
    _common(p)
    p.add_argument("--only", help="comma-separated criteria (e.g. A1,A3)")
    return ap


def _accept(cfg, ws, only) -> dict:
    from .acceptance import run_acceptance

    names = [s.strip().upper() for s in only.split(",")] if only else None
    results = run_acceptance(cfg, ws.root, names, stream=sys.stdout)
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise AcceptanceFailure(f"failed: {', '.join(failed)}")
    return {"passed": [r.name for r in results]}


def run(argv=None) -> dict:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    overrides = dict(parse_override(s) for s in args.set)
    accepting = args.verb == "accept" or getattr(args, "bench", None) == "accept"
    preset = args.preset or ("accept" if accepting else "default")
    cfg = load_config(args.config, preset, overrides)
    ws = pipeline.Workspace.from_config(cfg, args.workdir)
    v = args.verb
    if v == "gen-data":
        return pipeline.gen_data(cfg, ws, force=args.force)
    if v in pipeline.STAGES:
        return pipeline.STAGES[v](cfg, ws, resume=args.resume)
    if v == "reconstruct":
        return pipeline.reconstruct(cfg, ws, args.input, args.out, oracle=args.oracle,
                                    captioner_path=args.captioner, decoder_path=args.decoder)
    if accepting:
        return _accept(cfg, ws, args.only)
    if args.bench == "protocol1":
        return pipeline.eval_protocol1(cfg, ws, oracle=args.oracle, captioner_path=args.captioner,
                                       decoder_path=args.decoder)
    return pipeline.eval_protocol2(cfg, ws, captioner_path=args.captioner, baseline_path=args.baseline)


def main(argv=None) -> int:
    try:
        result = run(argv)
    except UniReconError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
