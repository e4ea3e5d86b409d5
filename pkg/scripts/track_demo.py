"""Track one synthetic sequence with a checkpoint and print per-frame IoU.

    python scripts/track_demo.py runs/desk.ckpt [--seed 10000000] [--frames 60]
"""
import argparse

from spmtrack import checkpoint
from spmtrack.boxes import iou
from spmtrack.metrics import evaluate
from spmtrack.synthetic import generate_synthetic_video, random_scene
from spmtrack.tracking import Tracker


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("ckpt")
    ap.add_argument("--seed", type=int, default=10_000_000)
    ap.add_argument("--frames", type=int, default=60)
    args = ap.parse_args()

    model, run = checkpoint.load(args.ckpt)
    frames, gt = generate_synthetic_video(random_scene(run.scene, seed=args.seed, length=args.frames))
    pred = Tracker(model).track(frames, gt[0])
    for i, (p, g) in enumerate(zip(pred, gt)):
        print(f"{i:3d}  pred {p.x:6.1f} {p.y:6.1f} {p.w:5.1f} {p.h:5.1f}   "
              f"gt {g.x:6.1f} {g.y:6.1f} {g.w:5.1f} {g.h:5.1f}   iou {iou(p, g):.3f}")
    print(evaluate(pred[1:], gt[1:]).format())


if __name__ == "__main__":
    main()
