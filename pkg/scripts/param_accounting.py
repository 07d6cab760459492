"""Per-stage stored growth by kind for every method on the small three-stage toy stream."""

import argparse

from flame.config import split_dataset
from flame.data import ModalityGen, StageSpec, StreamConfig, SyntheticTaskParams, make_synthetic_task
from flame.model import ModelConfig
from flame.trainer import METHODS, TrainConfig, run_stream


def toy_splits(seed: int):
    def task(tid, mods, key):
        gens = tuple(ModalityGen(m, 8, 3, (4, 8), latent_key=m) for m in mods)
        ds = make_synthetic_task(SyntheticTaskParams(tid, gens, n_samples=40, label_key=key), seed)[1]
        return split_dataset(ds, 0.25, seed)
    return {"a": task("a", ("x",), "ra"), "b": task("b", ("x", "y"), "rb"), "c": task("c", ("x",), "rc")}


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--rank", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    stream = StreamConfig(tuple(StageSpec((t,), args.rank, 2) for t in "abc"))
    print("method,stage,kind,count")
    for method in METHODS:
        res = run_stream(method, stream, toy_splits(args.seed), ModelConfig(d=16, d_h=32, n_experts=5, top_k=2),
                         TrainConfig(epochs=2), args.seed, lora_rank=args.rank)
        for led in res.ledgers:
            for kind, count in sorted(led.counts.items()):
                print(f"{method},{led.stage},{kind},{count}")
            print(f"{method},{led.stage},growth,{led.growth}")
