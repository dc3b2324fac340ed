"""Command-line entry point: ``tdr gen-data|train|predict|eval|gradcheck``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from tdr.schema import (DatasetParseError, SchemaError, model_config_from_mapping,
                        read_flat_config, save_candidates, save_dataset)

logger = logging.getLogger("tdr")

# exit codes per error class
EXIT_GRADCHECK_FAILED = 1
EXIT_DATA = 2
EXIT_CONFIG = 3
EXIT_NUMERIC = 4
EXIT_IO = 5
EXIT_MISSING_PREDICTION = 6


def cmd_gen_data(args) -> int:
    from tdr.synthgen import GenConfig, emit_candidate_set, generate

    config = GenConfig.from_mapping(read_flat_config(args.config))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(generate(config, "train"), out / "train.jsonl")
    save_dataset(generate(config, "eval", config.n_eval), out / "eval.jsonl")
    save_candidates(emit_candidate_set(config), out / "candidates.txt")
    logger.info("wrote %d train / %d eval instances to %s", config.n_instances, config.n_eval, out)
    return 0


def cmd_train(args) -> int:
    from tdr.harness.train import train

    config = model_config_from_mapping(read_flat_config(args.config))
    ckpt = train(args.data, args.candidates, config, args.out)
    print(ckpt)
    return 0


def cmd_predict(args) -> int:
    from tdr.harness.evaluate import predict_files

    force = {"auto": None, "classifier": 1, "pointer": 0}[args.branch]
    predict_files(args.ckpt, args.data, args.out, force_branch=force)
    return 0


def cmd_eval(args) -> int:
    from tdr.harness.evaluate import evaluate_files

    report = evaluate_files(args.pred, args.data, args.out, args.candidates)
    print(report.dumps(), end="")
    return 0


def cmd_gradcheck(args) -> int:
    from tdr.harness.gradcheck import gradcheck

    report = gradcheck(seed=args.seed)
    print(json.dumps({"max_rel_error": report.max_rel_error, "per_group": report.per_group,
                      "n_coordinates": report.n_coordinates, "passed": report.passed}, indent=2))
    return 0 if report.passed else EXIT_GRADCHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tdr", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic train/eval set and candidate file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train")
    p.add_argument("--data", required=True)
    p.add_argument("--candidates", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--branch", choices=["auto", "classifier", "pointer"], default="auto",
                   help="force every instance onto one branch (ablation)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval")
    p.add_argument("--pred", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--candidates", help="override the candidate set stored with the predictions")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    from tdr.harness.evaluate import MissingPredictionError
    from tdr.model import ConfigMismatchError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DatasetParseError, SchemaError) as e:
        logger.error("data error: %s", e)
        return EXIT_DATA
    except (ConfigMismatchError, ValueError) as e:
        logger.error("config error: %s", e)
        return EXIT_CONFIG
    except FloatingPointError as e:
        logger.error("numeric error: %s", e)
        return EXIT_NUMERIC
    except MissingPredictionError as e:
        logger.error("%s", e)
        return EXIT_MISSING_PREDICTION
    except OSError as e:
        logger.error("I/O error: %s", e)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
