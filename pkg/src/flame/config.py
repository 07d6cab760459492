"""Run configuration: a JSON document with nested sections, validated with key paths."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .data import (OBJECTIVES, Dataset, ModalityGen, StageSpec, StreamConfig, SyntheticTaskParams,
                   make_synthetic_task, mnist_task)
from .model import ModelConfig
from .numerics.rng import stream
from .trainer import TrainConfig

OUTPUT_ENV = "FLAME_OUTPUT_DIR"


class ConfigError(ValueError):
    def __init__(self, path: str, message: str) -> None:
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass(frozen=True)
class SyntheticSource:
    params: SyntheticTaskParams


@dataclass(frozen=True)
class IdxSource:
    task_id: str
    images: Path
    labels: Path
    limit: int | None = None
    classes: tuple[int, ...] | None = None


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    stream: StreamConfig
    tasks: dict[str, SyntheticSource | IdxSource]
    beta: dict[str, int] = field(default_factory=dict)
    seed: int = 0
    output_dir: Path = Path("flame-out")
    eval_fraction: float = 0.25
    ewc_lambda: float = 100.0
    lora_rank: int | None = None

    def resolved_output(self) -> Path:
        import os
        env = os.environ.get(OUTPUT_ENV)
        return Path(env) if env else self.output_dir


# ------------------------------------------------------------------ typed field readers

def _obj(node: Any, path: str) -> dict:
    if not isinstance(node, dict):
        raise ConfigError(path, "expected an object")
    return node


def _known(node: dict, path: str, keys: set[str]) -> None:
    extra = sorted(set(node) - keys)
    if extra:
        raise ConfigError(f"{path}.{extra[0]}" if path else extra[0], "unknown key")


def _int(node: dict, key: str, path: str, default: Any = ..., minimum: int | None = None, nullable=False):
    where = f"{path}.{key}" if path else key
    if key not in node:
        if default is ...:
            raise ConfigError(where, "missing required key")
        return default
    v = node[key]
    if v is None and nullable:
        return None
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(where, f"expected an integer, got {v!r}")
    if minimum is not None and v < minimum:
        raise ConfigError(where, f"must be >= {minimum}, got {v}")
    return v


def _num(node: dict, key: str, path: str, default: Any = ..., minimum: float | None = None) -> float:
    where = f"{path}.{key}" if path else key
    if key not in node:
        if default is ...:
            raise ConfigError(where, "missing required key")
        return default
    v = node[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(where, f"expected a number, got {v!r}")
    if minimum is not None and v < minimum:
        raise ConfigError(where, f"must be >= {minimum}, got {v}")
    return float(v)


def _str(node: dict, key: str, path: str, default: Any = ...) -> str:
    where = f"{path}.{key}" if path else key
    if key not in node:
        if default is ...:
            raise ConfigError(where, "missing required key")
        return default
    v = node[key]
    if not isinstance(v, str) or not v:
        raise ConfigError(where, f"expected a non-empty string, got {v!r}")
    return v


# ------------------------------------------------------------------ sections

def _model(node: Any) -> ModelConfig:
    node = _obj(node, "model")
    _known(node, "model", {"d", "d_h", "N", "K", "kappa_conv", "r0", "init_gain"})
    d = _int(node, "d", "model", 16, minimum=1)
    d_h = _int(node, "d_h", "model", None, minimum=1, nullable=True)
    n = _int(node, "N", "model", 5, minimum=1)
    k = _int(node, "K", "model", 2, minimum=1)
    kappa = _int(node, "kappa_conv", "model", 3, minimum=1)
    r0 = _int(node, "r0", "model", None, minimum=1, nullable=True)
    gain = _num(node, "init_gain", "model", 1.0)
    if gain <= 0:
        raise ConfigError("model.init_gain", "must be positive")
    if k > n:
        raise ConfigError("model.K", f"top-K must satisfy K <= N (K={k}, N={n})")
    if kappa % 2 == 0:
        raise ConfigError("model.kappa_conv", f"must be odd, got {kappa}")
    return ModelConfig(d=d, d_h=d_h, n_experts=n, top_k=k, kappa=kappa, r0=r0, init_gain=gain)


def _train(losses: Any, opt: Any) -> tuple[TrainConfig, dict[str, int]]:
    losses = _obj(losses, "losses")
    opt = _obj(opt, "optimizer")
    _known(losses, "losses", {"w_bal", "w_div", "beta"})
    _known(opt, "optimizer", {"lr", "momentum", "epochs", "batch_size", "cosine_decay"})
    beta_node = _obj(losses.get("beta", {}), "losses.beta")
    beta = {}
    for t, v in beta_node.items():
        if v not in (1, -1) or isinstance(v, bool):
            raise ConfigError(f"losses.beta.{t}", f"must be +1 or -1, got {v!r}")
        beta[t] = v
    lr = _num(opt, "lr", "optimizer", 0.05)
    if lr <= 0:
        raise ConfigError("optimizer.lr", "must be positive")
    momentum = _num(opt, "momentum", "optimizer", 0.0, minimum=0.0)
    if momentum >= 1:
        raise ConfigError("optimizer.momentum", "must be < 1")
    cosine = opt.get("cosine_decay", True)
    if not isinstance(cosine, bool):
        raise ConfigError("optimizer.cosine_decay", "expected true or false")
    cfg = TrainConfig(lr=lr, momentum=momentum, epochs=_int(opt, "epochs", "optimizer", 100, minimum=0),
                      batch_size=_int(opt, "batch_size", "optimizer", 32, minimum=1),
                      w_bal=_num(losses, "w_bal", "losses", 0.01, minimum=0.0),
                      w_div=_num(losses, "w_div", "losses", 0.1, minimum=0.0), cosine_decay=cosine)
    return cfg, beta


def _stream(node: Any, default_epochs: int) -> StreamConfig:
    if not isinstance(node, list) or not node:
        raise ConfigError("stream", "expected a nonempty list of stages")
    stages = []
    seen: set[str] = set()
    for i, st in enumerate(node):
        path = f"stream[{i}]"
        st = _obj(st, path)
        _known(st, path, {"tasks", "rank", "epochs"})
        tasks = st.get("tasks")
        if not isinstance(tasks, list) or not tasks or not all(isinstance(t, str) for t in tasks):
            raise ConfigError(f"{path}.tasks", "expected a nonempty list of task ids")
        for t in tasks:
            if t in seen:
                raise ConfigError(f"{path}.tasks", f"task {t!r} already appears in an earlier stage")
            seen.add(t)
        stages.append(StageSpec(tuple(tasks), _int(st, "rank", path, 4, minimum=1),
                                _int(st, "epochs", path, default_epochs, minimum=0)))
    return StreamConfig(tuple(stages))


def _modality(node: Any, path: str) -> ModalityGen:
    node = _obj(node, path)
    _known(node, path, {"id", "dim", "rank", "length", "noise", "latent_key", "missing_rate"})
    length = node.get("length", 16)
    if isinstance(length, list):
        if len(length) != 2 or not all(isinstance(v, int) and v >= 1 for v in length) or length[0] > length[1]:
            raise ConfigError(f"{path}.length", "expected [lo, hi] with 1 <= lo <= hi")
        length = (length[0], length[1])
    elif isinstance(length, bool) or not isinstance(length, int) or length < 1:
        raise ConfigError(f"{path}.length", f"expected a positive integer, got {length!r}")
    dim = _int(node, "dim", path, minimum=1)
    rank = _int(node, "rank", path, minimum=1)
    if rank > dim:
        raise ConfigError(f"{path}.rank", f"intrinsic rank {rank} exceeds dim {dim}")
    missing = _num(node, "missing_rate", path, 0.0, minimum=0.0)
    if missing > 1:
        raise ConfigError(f"{path}.missing_rate", "must lie in [0, 1]")
    key = node.get("latent_key")
    if key is not None and not isinstance(key, str):
        raise ConfigError(f"{path}.latent_key", "expected a string")
    return ModalityGen(_str(node, "id", path), dim, rank, length, _num(node, "noise", path, 0.01, minimum=0.0),
                       key, missing)


def _task(task_id: str, node: Any, base: Path, beta: int) -> SyntheticSource | IdxSource:
    path = f"tasks.{task_id}"
    node = _obj(node, path)
    kind = _str(node, "kind", path, "synthetic")
    if kind == "idx":
        _known(node, path, {"kind", "images", "labels", "limit", "classes"})
        classes = node.get("classes")
        if classes is not None and (not isinstance(classes, list) or len(classes) < 2):
            raise ConfigError(f"{path}.classes", "expected a list of at least two labels")
        return IdxSource(task_id, base / _str(node, "images", path), base / _str(node, "labels", path),
                         _int(node, "limit", path, None, minimum=1, nullable=True),
                         None if classes is None else tuple(int(c) for c in classes))
    if kind != "synthetic":
        raise ConfigError(f"{path}.kind", f"expected 'synthetic' or 'idx', got {kind!r}")
    _known(node, path, {"kind", "modalities", "n_samples", "objective", "n_classes", "label_key", "drift"})
    mods = node.get("modalities")
    if not isinstance(mods, list) or not mods:
        raise ConfigError(f"{path}.modalities", "expected a nonempty list")
    gens = tuple(_modality(m, f"{path}.modalities[{i}]") for i, m in enumerate(mods))
    ids = [g.modality_id for g in gens]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"{path}.modalities", "modality ids must be unique within a task")
    objective = _str(node, "objective", path, "binary")
    if objective not in OBJECTIVES:
        raise ConfigError(f"{path}.objective", f"expected one of {OBJECTIVES}, got {objective!r}")
    label_key = node.get("label_key")
    if label_key is not None and not isinstance(label_key, str):
        raise ConfigError(f"{path}.label_key", "expected a string")
    params = SyntheticTaskParams(task_id, gens, _int(node, "n_samples", path, 256, minimum=2), objective,
                                 _int(node, "n_classes", path, 2, minimum=2), label_key, beta,
                                 _num(node, "drift", path, 0.5))
    return SyntheticSource(params)


def parse_config(doc: Any, base: Path = Path(".")) -> RunConfig:
    doc = _obj(doc, "")
    _known(doc, "", {"seed", "output_dir", "model", "losses", "optimizer", "stream", "tasks",
                     "eval_fraction", "ewc_lambda", "lora_rank"})
    model = _model(doc.get("model", {}))
    train, beta = _train(doc.get("losses", {}), doc.get("optimizer", {}))
    stream_cfg = _stream(doc.get("stream"), train.epochs)
    tasks_node = _obj(doc.get("tasks"), "tasks")
    tasks = {t: _task(t, node, base, beta.get(t, 1)) for t, node in tasks_node.items()}
    for i, st in enumerate(stream_cfg.stages):
        for t in st.tasks:
            if t not in tasks:
                raise ConfigError(f"stream[{i}].tasks", f"task {t!r} is not defined under tasks")
    unknown_beta = sorted(set(beta) - set(tasks))
    if unknown_beta:
        raise ConfigError(f"losses.beta.{unknown_beta[0]}", "no such task")
    frac = _num(doc, "eval_fraction", "", 0.25)
    if not 0.0 < frac < 1.0:
        raise ConfigError("eval_fraction", "must lie strictly between 0 and 1")
    out = doc.get("output_dir", "flame-out")
    if not isinstance(out, str):
        raise ConfigError("output_dir", "expected a path string")
    return RunConfig(model, train, stream_cfg, tasks, beta, _int(doc, "seed", "", 0, minimum=0),
                     base / out, frac, _num(doc, "ewc_lambda", "", 100.0, minimum=0.0),
                     _int(doc, "lora_rank", "", None, minimum=1, nullable=True))


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError("", f"cannot read config {p}: {exc.strerror}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return parse_config(doc, p.parent)


# ------------------------------------------------------------------ data

def build_dataset(source: SyntheticSource | IdxSource, seed: int, beta: int = 1) -> Dataset:
    if isinstance(source, SyntheticSource):
        return make_synthetic_task(source.params, seed)[1]
    spec, ds = mnist_task(source.images, source.labels, source.task_id, source.limit, source.classes)
    if beta != 1:
        from dataclasses import replace
        spec = replace(spec, beta=beta)
        ds = Dataset(spec, ds.samples, ds.latents)
    return ds


def split_dataset(ds: Dataset, eval_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Deterministic train/eval split; both parts keep at least one sample."""
    n = len(ds)
    if n < 2:
        raise ValueError(f"task {ds.task.task_id!r} needs at least two samples to split")
    order = stream(seed, "split", ds.task.task_id).permutation(n)
    n_eval = min(n - 1, max(1, int(round(eval_fraction * n))))
    ev = np.sort(order[:n_eval])
    tr = np.sort(order[n_eval:])
    return ds.subset(tr.tolist()), ds.subset(ev.tolist())


def build_splits(cfg: RunConfig, task_ids=None) -> dict[str, tuple[Dataset, Dataset]]:
    ids = list(cfg.tasks) if task_ids is None else list(task_ids)
    return {t: split_dataset(build_dataset(cfg.tasks[t], cfg.seed, cfg.beta.get(t, 1)), cfg.eval_fraction, cfg.seed)
            for t in ids}
