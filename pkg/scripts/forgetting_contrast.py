"""Stage-1 task accuracy before and after a second stage with a different label rule."""

import argparse

from flame.config import split_dataset
from flame.data import ModalityGen, StageSpec, StreamConfig, SyntheticTaskParams, make_synthetic_task
from flame.model import ModelConfig
from flame.trainer import METHODS, TrainConfig, run_stream


def run(seed: int, epochs: int, methods):
    gen = (ModalityGen("x", 8, 3, (4, 8), latent_key="x"),)
    splits = {t: split_dataset(make_synthetic_task(SyntheticTaskParams(t, gen, n_samples=200, label_key=f"rule_{t}"),
                                                   seed)[1], 0.25, seed) for t in "ab"}
    stream = StreamConfig((StageSpec(("a",), 4, epochs), StageSpec(("b",), 4, epochs)))
    for method in methods:
        res = run_stream(method, stream, splits, ModelConfig(d=16, n_experts=5, top_k=2),
                         TrainConfig(epochs=epochs, momentum=0.9), seed)
        before, after = [row["accuracy"] for row in res.rows if row["task"] == "a"]
        print(f"seed {seed} {method:<10} task a accuracy {before:.3f} -> {after:.3f}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--methods", nargs="+", choices=METHODS, default=list(METHODS))
    args = ap.parse_args()
    for s in args.seeds:
        run(s, args.epochs, args.methods)
