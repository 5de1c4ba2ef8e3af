"""Command line entry point: ``qrmia <verb> --config run.json [--workspace DIR]``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from qrmia import config, pipeline

EXIT_OK, EXIT_VALIDATION, EXIT_COMPUTE = 0, 1, 2

logger = logging.getLogger("qrmia")


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qrmia", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    def verb(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, type=Path, help="JSON run configuration")
        p.add_argument("--workspace", type=Path, help="overrides paths.workspace")
        p.add_argument("--force", action="store_true", help="accept artifacts with a mismatched config hash")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    verb("gen-data", "write the dataset manifest and member/public/holdout split")
    verb("train-dm", "train the diffusion model on the member set (single shot, no resume)")
    p = verb("score", "compute t-error score caches")
    p.add_argument("--subset", choices=("all",) + pipeline.SUBSETS, default="all")
    verb("attack", "train the bag of weak attackers and write per-example decisions")
    verb("evaluate", "ROC, TPR@FPR tables, calibration and histograms")
    verb("ablate", "bagging sweep and per-sample variance CDFs")
    verb("bench-prep", "time score computation and attacker training")
    verb("run", "gen-data, train-dm, score, attack, evaluate and ablate in order")
    sub.add_parser("default-config", help="print the default configuration")
    return parser


def _report(verb: str, path: Path, hit: bool | None = None) -> None:
    status = "" if hit is None else (" (cache hit)" if hit else " (computed)")
    print(f"{verb}: {path}{status}")


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    if args.verb == "default-config":
        print(json.dumps(config.RunConfig().to_dict(), indent=2))
        return EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = config.load(args.config)
        if args.workspace is not None:
            cfg = dataclasses.replace(cfg, paths=config.PathsSection(str(args.workspace)))
    except config.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION

    ws = pipeline.Workspace(cfg.paths.workspace, force=args.force)
    try:
        with ws.lock():
            _dispatch(args, cfg, ws)
    except pipeline.WorkspaceError as exc:
        print(f"workspace error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ValueError, ArithmeticError, RuntimeError, OSError) as exc:
        logger.exception("compute failed")
        print(f"compute error: {exc}", file=sys.stderr)
        return EXIT_COMPUTE
    return EXIT_OK


def _dispatch(args, cfg: config.RunConfig, ws: pipeline.Workspace) -> None:
    verb = args.verb
    if verb in ("gen-data", "run"):
        _report("gen-data", *pipeline.gen_data(cfg, ws))
    if verb in ("train-dm", "run"):
        _report("train-dm", *pipeline.train_dm(cfg, ws))
    if verb in ("score", "run"):
        subset = getattr(args, "subset", "all")
        subsets = pipeline.SUBSETS if subset == "all" else (subset,)
        _report("score", *pipeline.score(cfg, ws, subsets))
    if verb in ("attack", "run"):
        _report("attack", *pipeline.run_attack(cfg, ws))
    if verb in ("evaluate", "run"):
        _report("evaluate", *pipeline.evaluate(cfg, ws))
    if verb in ("ablate", "run"):
        _report("ablate", *pipeline.ablate(cfg, ws))
    if verb == "bench-prep":
        _report("bench-prep", pipeline.bench_prep(cfg, ws))


if __name__ == "__main__":
    sys.exit(main())
