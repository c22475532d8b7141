"""Command-line entry point: ``skpool <command> ...``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .checkpoint import load_checkpoint
from .errors import ConfigError, DataError, SKPoolError
from .keypoints import corrupt_clip, load_clips, save_clips
from .localization import eval_instance_localization, infer_instance_logits
from .synthetic import SynthConfig, gen_localization, gen_synthetic
from .train import EVAL_BATCH, TrainConfig, build_clouds, check_schema, evaluate, robustness_sweep, train
from .keypoints import collate

log = logging.getLogger("skpool")


def _grid(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad grid {text!r}: {exc}") from exc


def cmd_gen_synth(args) -> int:
    cfg = SynthConfig(
        num_classes=args.classes,
        clips_per_class=args.clips,
        F=args.frames,
        I=args.instances,
        K=args.keypoints,
        noise_sigma=args.noise,
    )
    gen = gen_localization if args.localization else gen_synthetic
    clips = gen(cfg, args.seed)
    save_clips(clips, args.out)
    log.info("wrote %d clips to %s", len(clips), args.out)
    return 0


def cmd_corrupt(args) -> int:
    clips = load_clips(args.inp)
    out = [
        corrupt_clip(c, args.mode, ratio=args.ratio, sigma=args.sigma, interval=args.interval,
                     seed=[args.seed, i])
        for i, c in enumerate(clips)
    ]
    save_clips(out, args.out)
    return 0


def cmd_train(args) -> int:
    cfg = TrainConfig.load(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.ckpt:
        cfg = dataclasses.replace(cfg, ckpt_path=args.ckpt)
    cfg.validate()
    _, report = train(cfg, resume=args.resume)
    last = report.epochs[-1] if report.epochs else {}
    print(json.dumps({
        "checkpoint": cfg.ckpt_path,
        "epochs": len(report.epochs),
        "final_loss": last.get("loss"),
        "train_accuracy": last.get("train_accuracy"),
        "test_accuracy": report.test_accuracy,
        "wall_clock": round(report.wall_clock, 3),
    }))
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    acc = evaluate(ckpt, load_clips(args.inp))
    print(json.dumps({"accuracy": acc}))
    return 0


def cmd_localize(args) -> int:
    ckpt = load_checkpoint(args.ckpt, expect_mode="localization")
    clips = load_clips(args.inp)
    check_schema(clips, ckpt.params.config, need_labels=False)
    clouds = build_clouds(clips, ckpt.params.config)
    preds = []
    for start in range(0, len(clouds), EVAL_BATCH):
        preds.extend(infer_instance_logits(collate(clouds[start:start + EVAL_BATCH]), ckpt.params))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", encoding="utf-8") as fh:
        for p in preds:
            fh.write(json.dumps(p.to_dict()) + "\n")
    if args.eval:
        metrics = eval_instance_localization(preds, clips)
        print(json.dumps({"accuracy": metrics["accuracy"], "mAP": metrics["mAP"]}))
    return 0


def cmd_sweep(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    clips = load_clips(args.inp)
    curve = robustness_sweep(ckpt, clips, args.axis, _grid(args.grid), seed=args.seed,
                             fp_ratio=args.ratio)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["level", "accuracy"])
        for level, acc in curve:
            w.writerow([level, acc])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="skpool", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate synthetic keypoint clips")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--clips", type=int, default=200, help="clips per class")
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--instances", type=int, default=2)
    p.add_argument("--keypoints", type=int, default=18)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--localization", action="store_true",
                   help="each person performs a different class")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("corrupt", help="inject synthetic detection errors")
    p.add_argument("--mode", choices=("fp", "fn", "track"), required=True)
    p.add_argument("--ratio", type=float, default=1.0)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--interval", type=int, default=1)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("train", help="train from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--ckpt", help="override the checkpoint path")
    p.add_argument("--resume", help="continue from an epoch checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("localize", help="per-instance predictions")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--eval", action="store_true", help="score against instance_label ground truth")
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("sweep", help="accuracy under increasing detection errors")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--axis", choices=("fp", "fn", "track"), required=True)
    p.add_argument("--grid", required=True, help="comma-separated levels")
    p.add_argument("--ratio", type=float, default=1.0, help="fraction of keypoints jittered (fp axis)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except SKPoolError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
