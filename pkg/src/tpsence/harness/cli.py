"""Command line entry point: gen-data, train, translate, evaluate, ablate, gradcheck."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .. import synthdata
from ..losses import ABLATION_VARIANTS
from . import train as T
from .config import ConfigError, load_config
from .gradcheck import run_gradcheck


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat 'key = value' config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="shorthand for --set seed=N")


def _config(args):
    return load_config(args.config, args.overrides, seed=args.seed)


def cmd_gen_data(args) -> int:
    counts = tuple(int(c) for c in args.counts.split(","))
    if len(counts) != 4:
        raise ConfigError("--counts takes trainA,testA,trainB,testB")
    manifest = synthdata.build_dataset(counts, args.root, seed=args.seed or 0, size=args.size)
    print(Path(args.root) / "manifest.tsv")
    print(" ".join(f"{k}={len(v)}" for k, v in manifest.entries.items()))
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dumps())
    result = T.train(cfg, out / "train.log.jsonl")
    path = T.save_result(result, out / "checkpoint.tpsn")
    print(path)
    return 0


def cmd_translate(args) -> int:
    written = T.translate(args.checkpoint, args.input, args.output)
    print(f"translated {len(written)} images into {args.output}")
    return 0


def cmd_evaluate(args) -> int:
    manifest = args.manifest or _config(args).manifest
    if not manifest:
        raise ConfigError("evaluate needs --manifest or a config with a manifest key")
    report = T.evaluate(args.checkpoint, manifest, args.report)
    print(report.to_json())
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    variants = _expand_variants(args.variants)
    rows = T.ablate(cfg, variants, args.out)
    for row in rows:
        print(json.dumps(row, sort_keys=True))
    return 0


def _expand_variants(spec: str) -> list[str]:
    if ".." in spec:
        lo, hi = spec.split("..")
        ids = sorted(ABLATION_VARIANTS)
        return ids[ids.index(lo):ids.index(hi) + 1]
    return [v.strip() for v in spec.split(",") if v.strip()]


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(seeds=args.seeds)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print("gradcheck: " + ("all passed" if not failed else "FAILED " + ", ".join(failed)))
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tpsence", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render the synthetic clear/rainy dataset")
    p.add_argument("--root", required=True)
    p.add_argument("--counts", default="200,50,200,50", help="trainA,testA,trainB,testB")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one variant")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="translate a folder of images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--seed", type=int, help="accepted for uniformity; translation is deterministic")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", help="domain-gap report on the test splits")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest")
    p.add_argument("--report", help="write the report line here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and evaluate several variants")
    _add_config_args(p)
    p.add_argument("--variants", default="M1..M7", help="e.g. M1..M7 or M1,M3,M7")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of primitives and losses")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--seed", type=int, help="accepted for uniformity; seeds are fixed")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, synthdata.DatasetError, T.TrainingError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
