"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.
Machine-readable results go to stdout as JSON, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Optional

import numpy as np

from . import checkpoint, runconfig
from .attention import heatmap
from .backbone import build_model, count_madds, count_params, forward
from .data import Dataset, center_crop, resize, safe_crop_side, validate_image, write_synthetic
from .imageio import DataError, read_image, write_pgm
from .runconfig import ConfigParseError, RunConfig
from .tilt import decode_prediction
from .train import NumericError, evaluate, train

log = logging.getLogger("satilt")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj) + "\n")
    sys.stdout.flush()


def config_sidecar(ckpt: str) -> str:
    return ckpt + ".cfg"


def metrics_path(ckpt: str) -> str:
    return ckpt + ".metrics.jsonl"


def _load_run(ckpt: str, config: Optional[str]) -> tuple:
    rc = runconfig.load(config or config_sidecar(ckpt))
    model, _ = checkpoint.load(ckpt, rc.model)
    return rc, model


def prepare_image(path: str, size: int) -> np.ndarray:
    """Inscribed center crop and resize, matching how training samples are cut."""
    img = validate_image(read_image(path))
    return resize(center_crop(img, safe_crop_side(*img.shape[:2])), size)


# ----------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    if args.size < 8:
        raise UsageError(f"--size must be >= 8, got {args.size}")
    try:
        names = write_synthetic(args.out, args.count, args.size, args.seed)
    except OSError as exc:
        raise DataError(f"cannot write to {args.out!r}: {exc}") from exc
    _emit({"out": args.out, "images": len(names), "manifest": os.path.join(args.out, "manifest.tsv")})
    return EXIT_OK


def cmd_train(args) -> int:
    rc = runconfig.load(args.config)
    if args.steps is not None:
        rc.train.total_steps = args.steps
    if args.seed is not None:
        rc.train.seed = args.seed
    cfg = rc.model
    if rc.train.mode == "regression" and (cfg.out_dim != 1 or cfg.output != "linear"):
        raise UsageError("regression mode needs out_dim = 1 and output = linear in [model]")
    dataset = Dataset(rc.data.to_spec(args.data, cfg.input_size))
    model = build_model(cfg, rc.train.seed)
    mpath = metrics_path(args.out)
    with open(mpath, "w", encoding="utf-8") as mf:

        def on_eval(row):
            mf.write(json.dumps(row) + "\n")
            mf.flush()

        result = train(model, dataset, rc.train, on_eval=on_eval)
    checkpoint.save(args.out, result.model, result.optimizer)
    runconfig.dump(config_sidecar(args.out), rc)
    summary = {"checkpoint": args.out, "metrics": mpath, "steps": rc.train.total_steps}
    if result.history:
        summary.update({k: result.history[-1][k] for k in ("loss", "accuracy", "mean_angle_error")})
    _emit(summary)
    return EXIT_OK


def cmd_eval(args) -> int:
    rc, model = _load_run(args.ckpt, args.config)
    interval = rc.data.interval if args.interval is None else args.interval
    settings = runconfig.DataSettings(**{**rc.data.__dict__, "interval": interval})
    dataset = Dataset(settings.to_spec(args.data, rc.model.input_size))
    metrics = evaluate(model, dataset, interval)
    if not args.per_sample:
        metrics.pop("per_sample")
    _emit(metrics)
    return EXIT_OK


def cmd_predict(args) -> int:
    rc, model = _load_run(args.ckpt, args.config)
    x = prepare_image(args.image, rc.model.input_size)
    scores = forward(model, x).data
    if rc.model.output == "linear":
        angle = int(round(float(np.mod(scores[0], 360.0)))) % 360
        top = [[angle, float(scores[0])]]
    else:
        angle = decode_prediction(scores)
        order = np.argsort(-scores, kind="stable")[:5]
        top = [[int(i), float(scores[i])] for i in order]
    _emit({"angle": angle, "correction": f"rotate clockwise by {angle} degrees", "top5": top})
    return EXIT_OK


def cmd_heatmap(args) -> int:
    rc, model = _load_run(args.ckpt, args.config)
    stages = model.sa_blocks()
    if args.stage not in stages:
        raise UsageError(f"block {args.stage} has no spatial self-attention; valid stages: {stages}")
    try:
        qh, qw = (int(v) for v in args.query.split(","))
    except ValueError:
        raise UsageError(f"--query must be H,W, got {args.query!r}") from None
    side = rc.model.feature_sizes()[args.stage]
    if not (0 <= qh < side and 0 <= qw < side):
        raise UsageError(f"query ({qh},{qw}) outside the {side}x{side} grid of block {args.stage}")
    x = prepare_image(args.image, rc.model.input_size)
    capture: dict = {}
    forward(model, x, capture=capture)
    hm = heatmap(capture[args.stage], qh * side + qw, side, side)
    write_pgm(args.out, hm)
    _emit({"out": args.out, "stage": args.stage, "grid": [side, side], "query": [qh, qw]})
    return EXIT_OK


def cmd_count(args) -> int:
    if args.config:
        cfg = runconfig.load(args.config).model
    else:
        cfg = runconfig.PRESETS[args.preset]()
    model = build_model(cfg, 0)
    _emit({"params": count_params(model), "madds": count_madds(model)})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="satilt", description="image tilt estimation with attention-augmented MobileNet blocks")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", help="write a synthetic horizon dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model and write a checkpoint")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="accuracy and mean angle error on a dataset")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--interval", type=int)
    s.add_argument("--config", help="run config (default: CKPT.cfg)")
    s.add_argument("--per-sample", action="store_true", help="include per-image rows")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="predict the tilt of one image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("heatmap", help="export one attention row as a PGM")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--stage", type=int, required=True)
    s.add_argument("--query", required=True, help="H,W of the query region")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_heatmap)

    s = sub.add_parser("count", help="parameter and multiply-add counts")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--config")
    g.add_argument("--preset", choices=sorted(runconfig.PRESETS))
    s.set_defaults(func=cmd_count)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigParseError, DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
