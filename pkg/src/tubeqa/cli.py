"""``tubeqa`` command line: gen-data, train, infer, eval.

The run root defaults to the config file's ``root`` and can be set with the
``TUBEQA_DATA_ROOT`` environment variable or ``--root``.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .annotations import AnnotationError
from .checkpoint import CheckpointError
from .config import ANSWER_SOURCES, ConfigError, load_config
from .pipeline import PipelineError, cmd_eval, cmd_gen_data, cmd_infer, cmd_train
from .synth import SPLITS, SceneError
from .tubelet import GeometryError, SamplingError
from .vqa import AnswerError

EXPECTED = (
    PipelineError,
    ConfigError,
    AnnotationError,
    CheckpointError,
    AnswerError,
    SceneError,
    SamplingError,
    GeometryError,
    FileNotFoundError,
)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--root", help="run directory (overrides config and environment)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override, e.g. grounder.lr=3e-4")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="tubeqa", description="Two-stage grounded video QA on synthetic scenes.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate the train/val/test splits")
    t = sub.add_parser("train", parents=[common], help="train one stage")
    t.add_argument("--stage", choices=("vqa", "grounder"), required=True)
    i = sub.add_parser("infer", parents=[common], help="predict tubelets for a split")
    i.add_argument("--answers", choices=ANSWER_SOURCES, help="answer source (default from config)")
    i.add_argument("--split", choices=SPLITS, default="val")
    e = sub.add_parser("eval", parents=[common], help="score predictions with HOTA")
    e.add_argument("--predictions", help="prediction file (default: the run's file for --split/--answers)")
    e.add_argument("--annotations", help="annotation file (default: the run's --split annotations)")
    e.add_argument("--split", choices=SPLITS, default="val")
    e.add_argument("--answers", choices=ANSWER_SOURCES)
    e.add_argument("--report", help="report path (default under the run root)")
    return p


def run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args.set, args.root)
    if args.command == "gen-data":
        for split, m in cmd_gen_data(cfg, args.force).items():
            print(f"{split}: {m['num_samples']} samples, {m['num_videos']} videos")
    elif args.command == "train":
        out = cmd_train(cfg, args.stage, args.force)
        print(f"{args.stage}: final loss {out['loss'][-1]:.4f}" if out["loss"] else f"{args.stage}: untrained")
    elif args.command == "infer":
        print(cmd_infer(cfg, args.split, args.answers, args.force))
    elif args.command == "eval":
        answers = args.answers or cfg.infer.answers
        preds = args.predictions or cfg.predictions_path(args.split, answers)
        ann = args.annotations or cfg.data_dir(args.split) / "annotations.json"
        report_path = args.report or cfg.report_path(args.split, answers)
        report = cmd_eval(cfg, preds, ann, report_path, args.force)
        print(f"HOTA={report.hota:.6f}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except EXPECTED as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
