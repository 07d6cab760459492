"""Run one config's continual stream under every method and print a side-by-side summary."""

import argparse
import csv

from flame.cli import main
from flame.config import load_config
from flame.trainer import METHODS


def run(config: str, methods) -> None:
    for method in methods:
        code = main(["continual", config, "--method", method])
        if code:
            raise SystemExit(code)
    out = load_config(config).resolved_output()
    print(f"{'method':<10} {'stage':>5} {'task':<14} {'auroc':>7} {'accuracy':>9}")
    for method in methods:
        with open(out / f"report_{method}.csv") as fh:
            for row in csv.DictReader(fh):
                auroc = float(row["auroc"]) if row["auroc"] else float("nan")
                print(f"{method:<10} {row['stage']:>5} {row['task']:<14} {auroc:7.3f} {float(row['accuracy']):9.3f}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("config", nargs="?", default="configs/stream3.json")
    ap.add_argument("--methods", nargs="+", choices=METHODS, default=list(METHODS))
    args = ap.parse_args()
    run(args.config, args.methods)
