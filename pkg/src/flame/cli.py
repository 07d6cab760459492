"""Command-line entry point: ``flame {pretrain,continual,spectra,fingerprint,params}``."""

from __future__ import annotations

import argparse
import csv
import math
import sys
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import ConfigError, RunConfig, build_splits, load_config
from .data import DataFormatError
from .experts import LedgerError
from .model import load_checkpoint, save_checkpoint
from .routing import routing_fingerprint
from .spectra import SPECTRAL_COLUMNS, report_rows, spectral_report
from .trainer import (METHODS, REPORT_COLUMNS, InvariantViolation, StageLedger, count_params, evaluate,
                      flame_slice_scalars, lora_adapter_scalars, pretrain_multitask, run_stream)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INVARIANT = 0, 2, 3, 4


def fmt(value) -> str:
    """CSV cell: floats in 17 significant digits, missing values empty."""
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        v = float(value)
        return "" if math.isnan(v) else "%.17g" % v
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return str(value)


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(row.get(c)) for c in columns])


LEDGER_COLUMNS = ("stage", "method", "kind", "count")


def ledger_rows(ledger: StageLedger) -> list[dict]:
    rows = [{"stage": ledger.stage, "method": ledger.method, "kind": k, "count": v}
            for k, v in sorted(ledger.counts.items())]
    rows.append({"stage": ledger.stage, "method": ledger.method, "kind": "growth", "count": ledger.growth})
    rows.append({"stage": ledger.stage, "method": ledger.method, "kind": "trainable_tensors",
                 "count": len(ledger.trainable)})
    rows.append({"stage": ledger.stage, "method": ledger.method, "kind": "frozen_tensors",
                 "count": len(ledger.frozen)})
    for k, v in sorted(ledger.totals.items()):
        rows.append({"stage": ledger.stage, "method": ledger.method, "kind": f"stored_{k}", "count": v})
    return rows


# ------------------------------------------------------------------ commands

def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    out = cfg.resolved_output()
    first = cfg.stream.stages[0]
    splits = build_splits(cfg, first.tasks)
    from dataclasses import replace
    model = pretrain_multitask([splits[t][0] for t in first.tasks], cfg.model,
                               replace(cfg.train, epochs=first.epochs), cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "checkpoint_stage0.npz")
    rows = []
    for t in first.tasks:
        m = evaluate(model, splits[t][1], cursor=0, batch_size=cfg.train.eval_batch_size)
        rows.append({"task": t, "auroc": m.auroc, "auprc": m.auprc, "accuracy": m.accuracy})
    write_csv(out / "metrics.csv", ("task", "auroc", "auprc", "accuracy"), rows)
    write_csv(out / "ledger_stage0.csv", LEDGER_COLUMNS, ledger_rows(model.ledgers[0]))
    print(f"wrote {out / 'metrics.csv'}")
    return EXIT_OK


def cmd_continual(args) -> int:
    cfg = load_config(args.config)
    if len(cfg.stream.stages) < 2:
        raise ConfigError("stream", "continual runs need at least two stages")
    out = cfg.resolved_output()
    out.mkdir(parents=True, exist_ok=True)
    splits = build_splits(cfg, [t for st in cfg.stream.stages for t in st.tasks])

    def checkpoint(stage, model):
        save_checkpoint(model, out / f"checkpoint_{args.method}_stage{stage}.npz")

    result = run_stream(args.method, cfg.stream, splits, cfg.model, cfg.train, cfg.seed,
                        lam=cfg.ewc_lambda, lora_rank=cfg.lora_rank, on_stage=checkpoint)
    write_csv(out / f"report_{args.method}.csv", REPORT_COLUMNS, result.rows)
    write_csv(out / f"ledger_{args.method}.csv", LEDGER_COLUMNS,
              [r for led in result.ledgers for r in ledger_rows(led)])
    print(f"wrote {out / f'report_{args.method}.csv'}")
    return EXIT_OK


def _eval_sets(cfg: RunConfig, model, cursor: int | None):
    ids = [t for t in model.tasks if t in cfg.tasks and (cursor is None or model.cursor[t] == cursor)]
    if not ids:
        raise ConfigError("tasks", "no task in the config matches the checkpoint at this cursor")
    splits = build_splits(cfg, ids)
    return [splits[t][1] for t in ids]


def cmd_spectra(args) -> int:
    cfg = load_config(args.config)
    model = load_checkpoint(args.checkpoint)
    data = _eval_sets(cfg, model, args.cursor)
    reports = spectral_report(model, data, cursor=args.cursor)
    out = cfg.resolved_output()
    write_csv(out / "spectra.csv", SPECTRAL_COLUMNS, report_rows(reports))
    print(f"wrote {out / 'spectra.csv'}")
    return EXIT_OK


FINGERPRINT_COLUMNS = ("task", "modality", "cursor", "expert", "activation_ratio", "mean_gate_weight")


def fingerprint_rows(model, datasets) -> list[dict]:
    rows = []
    for ds in datasets:
        tid = ds.task.task_id
        for m, fp in routing_fingerprint(model, ds).items():
            for i in range(model.config.n_experts):
                rows.append({"task": tid, "modality": m, "cursor": model.cursor[tid], "expert": i,
                             "activation_ratio": float(fp.activation_ratio[i]),
                             "mean_gate_weight": float(fp.mean_gate_weight[i])})
    return rows


def cmd_fingerprint(args) -> int:
    cfg = load_config(args.config)
    model = load_checkpoint(args.checkpoint)
    data = _eval_sets(cfg, model, args.cursor)
    out = cfg.resolved_output()
    name = args.output or "fingerprint.csv"
    write_csv(out / name, FINGERPRINT_COLUMNS, fingerprint_rows(model, data))
    print(f"wrote {out / name}")
    return EXIT_OK


PARAM_COLUMNS = ("scope", "name", "p", "q", "rank", "count")


def cmd_params(args) -> int:
    model = load_checkpoint(args.checkpoint)
    rows = [{"scope": "component", "name": k, "count": v} for k, v in count_params(model).items()]
    if args.rank is not None:
        for w in model.stackable_weights():
            p, q = w.shape
            r = min(args.rank, p, q)
            rows.append({"scope": "flame_slice", "name": w.name, "p": p, "q": q, "rank": r,
                         "count": flame_slice_scalars(p, q, r) + (p if w.has_bias else 0)})
            rows.append({"scope": "lora_adapter", "name": w.name, "p": p, "q": q, "rank": args.rank,
                         "count": lora_adapter_scalars(p, q, args.rank)})
    out = Path(args.output) if args.output else None
    if out is None:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(PARAM_COLUMNS)
        for row in rows:
            w.writerow([fmt(row.get(c)) for c in PARAM_COLUMNS])
    else:
        write_csv(out, PARAM_COLUMNS, rows)
    return EXIT_OK


# ------------------------------------------------------------------ wiring

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="flame", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("pretrain", help="stage-0 multitask pretraining")
    p.add_argument("config")
    p.set_defaults(fn=cmd_pretrain)
    p = sub.add_parser("continual", help="run the whole stream with one method")
    p.add_argument("config")
    p.add_argument("--method", choices=METHODS, default="flame")
    p.set_defaults(fn=cmd_continual)
    for name, fn, helptext in (("spectra", cmd_spectra, "three-lens expert spectra"),
                               ("fingerprint", cmd_fingerprint, "per-expert routing fingerprints")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("checkpoint")
        p.add_argument("config")
        p.add_argument("--cursor", type=int, default=None,
                       help="restrict to tasks introduced at this stage (default: all, each at its cursor)")
        if name == "fingerprint":
            p.add_argument("--output", default=None, help="file name inside the output directory")
        p.set_defaults(fn=fn)
    p = sub.add_parser("params", help="stored-parameter accounting for a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--rank", type=int, default=None, help="also tabulate per-matrix slice vs adapter cost")
    p.add_argument("--output", default=None)
    p.set_defaults(fn=cmd_params)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except LedgerError as exc:
        print(f"cursor or stage error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except InvariantViolation as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
