"""Train the desk config and score it on held-out synthetic sequences.

    python scripts/train_desk.py [--config configs/desk.yaml] [--out runs/desk.ckpt]
"""
import argparse
import logging
import time
from pathlib import Path

import numpy as np

from spmtrack import checkpoint
from spmtrack.config import load_run_config
from spmtrack.metrics import evaluate
from spmtrack.synthetic import generate_synthetic_video, random_scene
from spmtrack.tracking import Tracker
from spmtrack.training import train

ROOT = Path(__file__).resolve().parents[1]


def held_out_score(model, scene, n_seq=10, length=60, first_seed=10_000_000):
    tracker = Tracker(model)
    preds, gts = [], []
    for k in range(n_seq):
        frames, gt = generate_synthetic_video(random_scene(scene, seed=first_seed + k, length=length))
        preds += tracker.track(frames, gt[0])[1:]
        gts += gt[1:]
    return evaluate(preds, gts)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "desk.yaml"))
    ap.add_argument("--out", default=str(ROOT / "runs" / "desk.ckpt"))
    ap.add_argument("--steps", type=int, default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    run = load_run_config(args.config)
    t0 = time.perf_counter()

    def report(step, loss, lr):
        if step % 100 == 0:
            print(f"step {step:5d}  loss {loss:.4f}  lr {lr:.2e}  {time.perf_counter() - t0:6.0f}s", flush=True)

    model, losses = train(run, steps=args.steps, on_step=report)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    checkpoint.save(out, model, run)
    print(f"trained {len(losses)} steps in {time.perf_counter() - t0:.0f}s; "
          f"loss {np.mean(losses[:20]):.3f} -> {np.mean(losses[-50:]):.3f}; wrote {out}")
    print(held_out_score(model, run.scene).format())


if __name__ == "__main__":
    main()
