"""Print total/trainable parameter counts (millions) for every shipped config."""
import sys
from pathlib import Path

from spmtrack.config import load_run_config
from spmtrack.tmoe import count_params

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def main(paths):
    paths = paths or sorted(CONFIGS.glob("*.yaml"))
    print(f"{'config':<36} {'variant':<24} {'total_M':>9} {'trainable_M':>12}")
    for p in paths:
        run = load_run_config(p)
        rep = count_params(run.model, run.variant)
        print(f"{Path(p).stem:<36} {run.variant:<24} {rep.total / 1e6:9.3f} {rep.trainable / 1e6:12.3f}")


if __name__ == "__main__":
    main(sys.argv[1:])
