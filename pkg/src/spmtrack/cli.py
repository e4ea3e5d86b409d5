"""Command line entry point: params, train, track, eval.

Exit codes: 0 success, 2 bad input (config, paths, frames, box files),
3 training aborted on non-finite values (the last good checkpoint is written).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .boxes import BBox
from .config import ConfigError, load_run_config
from .metrics import evaluate, format_box_line, read_box_file
from .tmoe import count_params

log = logging.getLogger("spmtrack")

FRAME_SUFFIXES = {".png", ".ppm", ".pgm", ".pnm", ".bmp", ".jpg", ".jpeg"}


class UsageError(Exception):
    """Bad user input; reported on stderr with exit status 2."""


def _config(path):
    try:
        return load_run_config(path)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc


def cmd_params(args) -> int:
    run = _config(args.config)
    print(count_params(run.model, run.variant).format())
    return 0


def _check_writable(path: Path) -> None:
    if path.is_dir():
        raise UsageError(f"{path} is a directory")
    probe = path.with_name(path.name + ".tmp")
    try:
        with open(probe, "wb"):
            pass
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc.strerror or exc}") from exc


def cmd_train(args) -> int:
    from .model import SPMTrack
    from .training import NonFiniteTraining, train

    run = _config(args.config)
    if run.variant == "conventional_moe":
        raise UsageError("conventional_moe is a parameter-count variant and cannot be trained")
    steps = run.train.steps if args.steps is None else args.steps
    if steps < 0:
        raise UsageError("--steps must be >= 0")
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".csv")
    _check_writable(out)
    _check_writable(log_path)

    model = SPMTrack(run.model, run.variant, seed=run.seed)
    status = 0
    with open(log_path, "w", newline="") as fh:
        fh.write("step,loss,lr\n")

        def on_step(step, loss, lr):
            if step % run.train.log_every == 0 or step == steps - 1:
                fh.write(f"{step},{loss:.6f},{lr:.6e}\n")
            if step % 100 == 0:
                log.info("step %d loss %.4f lr %.2e", step, loss, lr)

        try:
            train(run, steps=steps, on_step=on_step, model=model)
        except NonFiniteTraining as exc:
            print(f"error: {exc}; wrote last good checkpoint to {out}", file=sys.stderr)
            status = 3
    checkpoint.save(out, model, run)
    return status


def _load_frames(frames_dir: Path) -> list[np.ndarray]:
    from PIL import Image, UnidentifiedImageError

    if not frames_dir.is_dir():
        raise UsageError(f"frames directory {frames_dir} does not exist")
    paths = sorted(p for p in frames_dir.iterdir() if p.suffix.lower() in FRAME_SUFFIXES)
    if not paths:
        raise UsageError(f"no frames found in {frames_dir}")
    frames = []
    for p in paths:
        try:
            with Image.open(p) as im:
                frames.append(np.asarray(im.convert("RGB"), dtype=np.uint8))
        except (OSError, UnidentifiedImageError, ValueError) as exc:
            raise UsageError(f"cannot read frame {p}: {exc}") from exc
    return frames


def cmd_track(args) -> int:
    from .tracking import Tracker

    try:
        init = BBox.parse(args.init)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"--init: {exc}") from exc
    try:
        model, _ = checkpoint.load(args.ckpt)
    except checkpoint.CheckpointError as exc:
        raise UsageError(f"checkpoint {args.ckpt}: {exc}") from exc
    frames = _load_frames(Path(args.frames))
    tracker = Tracker(model, keep_every=args.keep_every)
    for i, box in enumerate(tracker.track(frames, init)):
        print(format_box_line(i, box))
    return 0


def cmd_eval(args) -> int:
    try:
        pred, gt = read_box_file(args.pred), read_box_file(args.gt)
    except (OSError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    if len(pred) != len(gt):
        raise UsageError(f"{args.pred} has {len(pred)} boxes but {args.gt} has {len(gt)}")
    print(evaluate(pred, gt).format())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spmtrack", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("params", help="closed-form parameter counts")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("train", help="train on synthetic sequences")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--steps", type=int, default=None, help="override train.steps")
    p.add_argument("--log", default=None, help="CSV log path (default: checkpoint path with .csv suffix)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", help="track one object through a directory of frames")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--frames", required=True)
    p.add_argument("--init", required=True, help="x,y,w,h in frame 0")
    p.add_argument("--keep-every", type=int, default=1, help="store every k-th tracked frame as a reference candidate")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="mean IoU and success rates")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
