"""Vary the guidance scale of a trained checkpoint and report edge density.

    memo-edge gen-data --seed 1 --n 8 --out-dir /tmp/memo-data
    memo-edge train --seed 0 --data-dir /tmp/memo-data --out /tmp/m.memo --max-steps 50
    python3 demos/guidance_sweep.py /tmp/m.memo /tmp/memo-data
"""

import sys

import numpy as np

from memo_edge.checkpoint import load_network
from memo_edge.inference import InferenceConfig, run_inference
from memo_edge.synthdata import load_dataset


def main(checkpoint: str, data_dir: str) -> None:
    net = load_network(checkpoint)
    images, gts = load_dataset(data_dir)
    print(f"ground truth density {np.mean([g.mean() for g in gts]):.4f}")
    for s in (0.5, 1.0, 1.5, 2.0, 3.0):
        cfg = InferenceConfig(steps=10, scale=s, seed=0)
        density = np.mean([run_inference(net, im, cfg)[0].mean() for im in images])
        print(f"scale {s:.1f}: edge density {density:.4f}")


if __name__ == "__main__":
    if len(sys.argv) != 3:
        sys.exit(__doc__)
    main(*sys.argv[1:])
