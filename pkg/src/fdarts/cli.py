"""Command-line entry point: ``fdarts {search,train,eval,gradcheck,export}``.

Exit codes: 0 success, 1 verification failure, 2 configuration or input
error, 3 numeric fault during a run.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .autograd import CatalogError, NumericFault, inject_fault
from .config import ConfigError, load_config
from .data import IdxConsistencyError, IdxFormatError, IdxTruncatedError, StratificationError
from .genotype import GenotypeParseError, GenotypeValidationError, genotype_to_dot, parse_genotype
from .network import ConfigurationError

EXIT_OK, EXIT_VERIFY, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--order", choices=("1", "2"), help="first- or second-order architecture gradient")
    common.add_argument("--stem", choices=("single", "dual"))
    common.add_argument("--attention", choices=("on", "off"))
    common.add_argument("--epochs", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="fdarts", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("search", parents=[common], help="architecture search on the configured dataset")
    p = sub.add_parser("train", parents=[common], help="train a discrete network from a genotype")
    p.add_argument("--genotype", help="genotype file (overrides train.genotype)")
    p = sub.add_parser("eval", parents=[common], help="evaluate a trained checkpoint")
    p.add_argument("--genotype")
    p.add_argument("--checkpoint", help="checkpoint path without suffix")
    p = sub.add_parser("gradcheck", parents=[common], help="run the gradient verification suite")
    p.add_argument("--inject-fault", metavar="PRIMITIVE", help="test hook: negate one primitive's backward pass")
    p = sub.add_parser("export", parents=[common], help="DOT files and a network summary for a genotype")
    p.add_argument("genotype_file")
    return parser


def _overrides(args) -> dict:
    o = {}
    if args.seed is not None:
        o["seed"] = args.seed
    if args.out is not None:
        o["out"] = args.out
    if args.order is not None:
        o["search.order"] = "first" if args.order == "1" else "second"
    if args.stem is not None:
        o["network.stem"] = args.stem
    if args.attention is not None:
        o["network.attention"] = args.attention == "on"
    if args.epochs is not None:
        o["train.epochs" if args.command == "train" else "search.epochs"] = args.epochs
    if getattr(args, "genotype", None):
        o["train.genotype" if args.command == "train" else "eval.genotype"] = args.genotype
    if getattr(args, "checkpoint", None):
        o["eval.checkpoint"] = args.checkpoint
    if getattr(args, "inject_fault", None):
        o["gradcheck.inject_fault"] = args.inject_fault
    return o


def _read_genotype(path):
    if path is None:
        raise ConfigError("genotype", "no genotype file given")
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("genotype", f"cannot read {path}: {exc.strerror}") from exc
    return parse_genotype(text)


def cmd_search(cfg) -> int:
    from .pipeline import run_search

    result = run_search(cfg)
    print(json.dumps({"genotype": str(Path(cfg.out) / "search.genotype"),
                      "final": {k: v for k, v in result.history[-1].items() if k != "row_entropy"}}))
    return EXIT_OK


def cmd_train(cfg) -> int:
    from .pipeline import run_train

    result = run_train(cfg, _read_genotype(cfg.train.genotype))
    print(json.dumps({"best_val_acc": result.best_val_acc, "best_epoch": result.best_epoch,
                      "checkpoint": str(Path(cfg.out) / "best")}))
    return EXIT_OK


def cmd_eval(cfg) -> int:
    from .pipeline import run_eval

    if cfg.eval.checkpoint is None:
        raise ConfigError("eval.checkpoint", "no checkpoint given")
    try:
        report = run_eval(cfg, _read_genotype(cfg.eval.genotype), cfg.eval.checkpoint)
    except (OSError, KeyError, ValueError) as exc:
        if isinstance(exc, (GenotypeParseError, GenotypeValidationError)):
            raise
        raise ConfigError("eval.checkpoint", str(exc)) from exc
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(json.dumps(report, indent=2))
    print(json.dumps(report))
    return EXIT_OK


def cmd_gradcheck(cfg) -> int:
    from .verification import run_suite, xi_sweep

    g = cfg.gradcheck
    if g.inject_fault is not None:
        try:
            with inject_fault(g.inject_fault):
                results = run_suite(g.eps, g.threshold, cfg.seed)
        except CatalogError as exc:
            raise ConfigError("gradcheck.inject_fault", str(exc)) from exc
    else:
        results = run_suite(g.eps, g.threshold, cfg.seed)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name:<{width}}  {r.error:.3e}  {'ok' if r.passed else 'FAIL'}")
    print("xi sweep (w=1, a=0):")
    for row in xi_sweep()["rows"]:
        print(f"  xi={row['xi']:<8g} first={row['first']:+.6f} second={row['second']:+.6f} gap={row['gap']:.6f}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_export(cfg, genotype_file) -> int:
    from .pipeline import export_summary

    g = _read_genotype(genotype_file)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    for kind, text in genotype_to_dot(g).items():
        (out / f"{kind}.dot").write_text(text)
    (out / "summary.json").write_text(json.dumps(export_summary(cfg, g), indent=2))
    print(json.dumps({"normal": str(out / "normal.dot"), "reduce": str(out / "reduce.dot"),
                      "summary": str(out / "summary.json")}))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        if args.command == "search":
            return cmd_search(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg)
        return cmd_export(cfg, args.genotype_file)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (GenotypeParseError, GenotypeValidationError) as exc:
        print(f"genotype error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ConfigurationError as exc:
        print(f"network configuration error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (IdxFormatError, IdxConsistencyError, IdxTruncatedError, StratificationError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericFault as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
