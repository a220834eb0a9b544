"""Train a tiny model on synthetic scenes, decode edges iteratively and score them.

Runs in under a minute on one core.  Pass a step count to train longer:

    python3 demos/quickstart.py 600
"""

import sys

import numpy as np

from memo_edge import evaluation as ev
from memo_edge import synthdata as sd
from memo_edge.inference import InferenceConfig, run_inference
from memo_edge.model import MEMONetwork, ModelConfig
from memo_edge.training import TrainingConfig, train


def as_input(image):
    return sd.quantize_image(image).transpose(2, 0, 1).astype(np.float32) / 255.0


def main(steps: int = 200) -> None:
    scene = sd.SceneConfig(height=32, width=32, min_radius=4, max_radius=9, min_shapes=1, max_shapes=3)
    train_set = [sd.generate_sample(scene, sd.sample_seed(0, i)) for i in range(256)]
    test_set = [sd.generate_sample(scene, sd.sample_seed(1, i)) for i in range(16)]

    net = MEMONetwork(ModelConfig(channels=(16, 32), groups=8, pe_dim=16))
    cfg = TrainingConfig(batch_size=8, learning_rate=1e-3, epochs=1000, max_steps=steps, log_every=0)
    history, _ = train(net, [as_input(im) for im, _ in train_set], [e for _, e in train_set], cfg)
    print(f"trained {len(history)} steps, loss {np.mean(history[:10]):.3f} -> {np.mean(history[-10:]):.3f}")

    icfg = InferenceConfig(steps=10, strategy="locmax")
    preds = []
    for im, _ in test_set:
        edges, trace = run_inference(net, as_input(im), icfg)
        preds.append(trace.probabilities)
    print("masked pixels per step (first image):", trace.masked_counts)
    print(ev.ods_ois(preds, [e for _, e in test_set], protocol="ceval").summary())
    print(ev.ods_ois(preds, [e for _, e in test_set], protocol="seval").summary())


if __name__ == "__main__":
    main(*(int(a) for a in sys.argv[1:]))
