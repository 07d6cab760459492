"""Multitask pretraining, continual stages, baselines, evaluation and parameter accounting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import Dataset, Sample, StageSpec, StreamConfig, batch_iter
from .experts import LedgerError
from .metrics import Metrics, compute_metrics
from .model import FlameModel, ModelConfig
from .numerics import autodiff as ad
from .numerics.autodiff import Param, Tensor
from .numerics.rng import stream
from .routing import balance_loss, divergence_loss

METHODS = ("flame", "simple_ft", "ewc", "lora")


class TrainingError(RuntimeError):
    """Optimisation produced a non-finite loss or gradient."""


class InvariantViolation(RuntimeError):
    """A structural guarantee (bit-exact retention of earlier tasks) failed."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.0
    epochs: int = 100
    batch_size: int = 32
    w_bal: float = 0.01
    w_div: float = 0.1
    cosine_decay: bool = True
    eval_batch_size: int = 64

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 0 or self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError("lr must be positive, epochs non-negative, batch sizes >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.w_bal < 0 or self.w_div < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class StageLedger:
    stage: int
    method: str
    trainable: tuple[str, ...]
    frozen: tuple[str, ...]
    counts: dict[str, int]             # new stored scalars by kind
    totals: dict[str, int] = field(default_factory=dict)  # stored scalars after the stage, by component

    def __post_init__(self):
        overlap = set(self.trainable) & set(self.frozen)
        if overlap:
            raise LedgerError(f"parameters both trainable and frozen: {sorted(overlap)[:3]}")

    @property
    def growth(self) -> int:
        return int(sum(self.counts.values()))


@dataclass
class TrainLog:
    epoch_losses: list[float] = field(default_factory=list)
    steps: int = 0


class SGD:
    """Plain SGD with optional heavy-ball momentum."""

    def __init__(self, params: Sequence[Param], momentum: float = 0.0) -> None:
        self.params = list(params)
        self.momentum = momentum
        self.velocity = {id(p): np.zeros_like(p.data) for p in self.params}

    def step(self, grads: Mapping[Tensor, np.ndarray], lr: float) -> None:
        for p in self.params:
            g = grads[p]
            if self.momentum:
                v = self.velocity[id(p)] = self.momentum * self.velocity[id(p)] + g
            else:
                v = g
            p.data = p.data - lr * v


# ------------------------------------------------------------------ losses

def task_loss(logits: Tensor, labels: np.ndarray, objective: str) -> Tensor:
    if objective == "binary":
        return ad.bce_with_logits(ad.reshape(logits, (logits.shape[0],)), labels)
    if objective == "multiclass":
        return ad.cross_entropy(logits, labels)
    if objective == "multilabel":
        return ad.bce_with_logits(logits, labels)
    raise ValueError(f"unknown objective {objective!r}")


def batch_objective(model: FlameModel, samples: Sequence[Sample], task_id: str, cfg: TrainConfig,
                    train: bool = True, rng: np.random.Generator | None = None) -> tuple[Tensor, dict[str, float]]:
    """Task loss plus weighted balance (per modality) and divergence terms."""
    spec = model.tasks[task_id]
    res = model.forward(samples, task_id, train=train, rng=rng)
    labels = np.stack([np.asarray(s.label) for s in samples])
    lk = task_loss(res.logits, labels, spec.objective)
    total = lk
    parts = {"task": float(lk.data)}
    if cfg.w_bal:
        bal: Tensor = Tensor(0.0)
        for r in res.routing.values():
            bal = bal + balance_loss(r.gates)
        total = total + bal * cfg.w_bal
        parts["balance"] = float(bal.data)
    if cfg.w_div:
        div = divergence_loss({m: ad.mean(r.gates, axis=0) for m, r in res.routing.items()}, spec.beta)
        total = total + div * cfg.w_div
        parts["divergence"] = float(div.data)
    return total, parts


def ewc_penalty(params: Mapping[str, Tensor], fisher: Mapping[str, np.ndarray],
                anchor: Mapping[str, np.ndarray], lam: float) -> Tensor:
    """``(lam / 2) * sum_i F_i (theta_i - theta*_i)^2`` over the anchored parameters."""
    total: Tensor = Tensor(0.0)
    for name in sorted(fisher):
        diff = params[name] - anchor[name]
        total = total + ad.sum(ad.square(diff) * fisher[name])
    return total * (0.5 * lam)


# ------------------------------------------------------------------ optimisation loop

def _set_trainable(model: FlameModel, trainable: Sequence[Param]) -> None:
    ids = {id(p) for p in trainable}
    for p in model.parameters().values():
        p.requires_grad = id(p) in ids


def train_tasks(model: FlameModel, datasets: Sequence[Dataset], trainable: Sequence[Param],
                cfg: TrainConfig, seed: int, stage: int,
                penalty: Callable[[], Tensor] | None = None) -> TrainLog:
    """Round-robin SGD over per-task batches; only ``trainable`` is updated."""
    _set_trainable(model, trainable)
    log = TrainLog()
    opt = SGD(trainable, cfg.momentum)
    noise = stream(seed, "gate-noise", stage)
    per_epoch = sum(math.ceil(len(ds) / cfg.batch_size) for ds in datasets)
    total_steps = max(1, cfg.epochs * per_epoch)
    step = 0
    try:
        for epoch in range(cfg.epochs):
            iters = [(ds, batch_iter(ds, cfg.batch_size, seed, epoch)) for ds in datasets]
            losses = []
            while iters:
                still = []
                for ds, it in iters:
                    idx = next(it, None)
                    if idx is None:
                        continue
                    still.append((ds, it))
                    lr = cfg.lr
                    if cfg.cosine_decay:
                        lr = 0.5 * cfg.lr * (1.0 + math.cos(math.pi * step / total_steps))
                    with ad.Tape() as tape:
                        loss, _ = batch_objective(model, [ds.samples[i] for i in idx], ds.task.task_id,
                                                  cfg, train=True, rng=noise)
                        if penalty is not None:
                            loss = loss + penalty()
                    value = float(loss.data)
                    if not math.isfinite(value):
                        raise TrainingError(f"non-finite loss {value} at step {step} "
                                            f"(stage {stage}, seed {seed}, task {ds.task.task_id!r})")
                    grads = ad.backward(tape, loss, trainable)
                    if not all(np.all(np.isfinite(g)) for g in grads.values()):
                        raise TrainingError(f"non-finite gradient at step {step} "
                                            f"(stage {stage}, seed {seed}, task {ds.task.task_id!r})")
                    opt.step(grads, lr)
                    losses.append(value)
                    step += 1
                iters = still
            log.epoch_losses.append(float(np.mean(losses)) if losses else float("nan"))
    finally:
        _set_trainable(model, ())
    log.steps = step
    return log


# ------------------------------------------------------------------ accounting

COMPONENTS = ("encoder", "moe", "router", "head")


def _component(name: str) -> str:
    for prefix in ("ewc.fisher.", "ewc.anchor."):
        if name.startswith(prefix):
            name = name[len(prefix):]
    if name.startswith("expert"):
        return "moe"
    if name.startswith("enc["):
        return "encoder"
    if name.startswith("router["):
        return "router"
    if name.startswith("head["):
        return "head"
    raise ValueError(f"unclassified stored tensor {name!r}")


def count_params(model_or_ledger) -> dict[str, int]:
    """Exact stored scalar counts.

    For a model: per component (EWC Fisher/anchor copies are charged to the
    component they shadow and also reported as ``ewc_store``), plus ``total``.
    For a :class:`StageLedger`: its per-kind growth counts plus ``total``.
    """
    if isinstance(model_or_ledger, StageLedger):
        out = dict(model_or_ledger.counts)
        out["total"] = model_or_ledger.growth
        return out
    counts = {c: 0 for c in COMPONENTS}
    counts["ewc_store"] = 0
    for name, arr in model_or_ledger.stored_arrays().items():
        counts[_component(name)] += int(np.asarray(arr).size)
        if name.startswith("ewc."):
            counts["ewc_store"] += int(np.asarray(arr).size)
    counts["total"] = sum(counts[c] for c in COMPONENTS)
    return counts


def flame_slice_scalars(p: int, q: int, rank: int) -> int:
    return rank * (p + q + 1)


def lora_adapter_scalars(p: int, q: int, rank: int) -> int:
    return rank * (p + q)


def _new_encoder_scalars(model: FlameModel, stage: int) -> int:
    n = 0
    for enc in model.encoders.values():
        if enc.origin == stage:
            n += sum(w.base_scalars() for w in enc.weights) + enc.pos.data.size
    return n


def _ledger(model: FlameModel, stage: int, method: str, trainable: Sequence[Param],
            new_tasks: Sequence[str], extra: Mapping[str, int] | None = None) -> StageLedger:
    names = tuple(sorted(p.name for p in trainable))
    frozen = tuple(sorted(set(model.stored_arrays()) - set(names)))
    counts: dict[str, int] = {}
    routers = [h for (m, s), h in model.routers.items() if s == stage]
    counts["router_gate"] = sum(h.w_gate.data.size for h in routers)
    counts["router_noise"] = sum(h.w_noise.data.size for h in routers)
    counts["router_query"] = sum(h.query.data.size for h in routers)
    counts["head"] = sum(model.heads[t].weight.data.size + model.heads[t].bias.data.size for t in new_tasks)
    counts["encoder_new"] = _new_encoder_scalars(model, stage)
    if extra:
        counts.update(extra)
    ledger = StageLedger(stage, method, names, frozen, counts, totals=count_params(model))
    model.ledgers.append(ledger)
    return ledger


def _close_stage(model: FlameModel, stage: int) -> None:
    for w in model.stackable_weights():
        w.horizon = max(w.horizon, stage)
    model.stage = stage


# ------------------------------------------------------------------ stage 0

def pretrain_multitask(datasets: Sequence[Dataset], model_cfg: ModelConfig, cfg: TrainConfig, seed: int,
                       model: FlameModel | None = None, log: TrainLog | None = None) -> FlameModel:
    """Joint training of everything on all stage-0 tasks, then compress-and-freeze the base."""
    if not datasets:
        raise ValueError("pretraining needs at least one task")
    if model is None:
        model = FlameModel(model_cfg, seed)
    if model.stage != -1:
        raise LedgerError("pretraining runs only on a fresh model")
    for ds in datasets:
        model.add_task(ds.task, ds.modality_dims(), stage=0)
    trainable = list(model.parameters().values())
    result = train_tasks(model, datasets, trainable, cfg, seed, stage=0)
    if log is not None:
        log.epoch_losses.extend(result.epoch_losses)
        log.steps += result.steps
    for w in model.stackable_weights():
        w.freeze_base(model.config.r0)
    _close_stage(model, 0)
    _ledger(model, 0, model.method, trainable, [ds.task.task_id for ds in datasets])
    return model


# ------------------------------------------------------------------ FLAME continual stage

def _stage_modalities(datasets: Sequence[Dataset]) -> list[str]:
    out: list[str] = []
    for ds in datasets:
        for m in ds.task.modalities:
            if m not in out:
                out.append(m)
    return out


def _check_new_tasks(model: FlameModel, datasets: Sequence[Dataset]) -> int:
    if model.stage < 0:
        raise LedgerError("continual stages need a pretrained model")
    if model.active_stage is not None:
        raise LedgerError(f"stage {model.active_stage} is still open")
    for ds in datasets:
        if ds.task.task_id in model.tasks:
            raise LedgerError(f"task {ds.task.task_id!r} already trained")
    if not datasets:
        raise ValueError("a stage needs at least one task")
    return model.stage + 1


def begin_stage(model: FlameModel, datasets: Sequence[Dataset]) -> list[Param]:
    """Attach zero live components, add router and task heads; returns the trainable set."""
    t = _check_new_tasks(model, datasets)
    mods = _stage_modalities(datasets)
    existing = [m for m in mods if m in model.encoders]
    for e in model.experts:
        for w in e.weights:
            w.attach_live(t)
    for m in existing:
        model.encoders[m].attach_live(t)
    for ds in datasets:
        model.add_task(ds.task, ds.modality_dims(), stage=t)
    model.active_stage = t
    trainable: list[Param] = []
    for e in model.experts:
        for w in e.weights:
            trainable.append(w.live)
            trainable.append(w.live_bias)
    for m in mods:
        enc = model.encoders[m]
        if m in existing:
            for w in enc.weights:
                trainable.append(w.live)
                if w.live_bias is not None:
                    trainable.append(w.live_bias)
            trainable.append(enc.live_pos)
        else:
            trainable.extend(enc.params().values())
        trainable.extend(model.routers[(m, t)].params().values())
    for ds in datasets:
        trainable.extend(model.heads[ds.task.task_id].params().values())
    return trainable


def end_stage(model: FlameModel, rank: int, trainable: Sequence[Param],
              new_tasks: Sequence[str]) -> StageLedger:
    """Compress every live component at ``rank``, freeze, and record the ledger."""
    t = model.active_stage
    if t is None:
        raise LedgerError("no open stage")
    for e in model.experts:
        for w in e.weights:
            w.compress_and_stack(rank)
    for enc in model.encoders.values():
        if enc.live_pos is not None:
            enc.compress_and_stack(rank)
        elif enc.origin == t:
            enc.freeze_base(model.config.r0)
    model.active_stage = None
    _close_stage(model, t)
    weights = model.stackable_weights()
    factor = sum(sl.factors.stored_scalars() for w in weights for sl in w.slices if sl.stage == t)
    bias = sum(sl.bias.size for w in weights for sl in w.slices if sl.stage == t and sl.bias is not None)
    pos = sum(1 for enc in model.encoders.values() if t in enc.pos_deltas)
    return _ledger(model, t, "flame", trainable, new_tasks,
                   {"slice_factors": factor, "bias_deltas": bias, "pos_deltas": pos})


def continual_stage(model: FlameModel, stage: StageSpec, datasets: Sequence[Dataset], cfg: TrainConfig,
                    seed: int, log: TrainLog | None = None) -> StageLedger:
    """One FLAME continual stage: train live deltas for the new tasks, then compress and stack."""
    trainable = begin_stage(model, datasets)
    result = train_tasks(model, datasets, trainable, replace(cfg, epochs=stage.epochs), seed, model.active_stage)
    if log is not None:
        log.epoch_losses.extend(result.epoch_losses)
        log.steps += result.steps
    return end_stage(model, stage.rank, trainable, [ds.task.task_id for ds in datasets])


# ------------------------------------------------------------------ baselines

def _latest_router_stage(model: FlameModel, modality: str) -> int | None:
    stages = [s for (m, s) in model.routers if m == modality]
    return max(stages) if stages else None


def _backbone(model: FlameModel) -> dict[str, Param]:
    return {n: p for n, p in model.parameters().items() if not n.startswith("head[")}


def _add_shared_tasks(model: FlameModel, datasets: Sequence[Dataset], t: int) -> None:
    for ds in datasets:
        shared = {}
        for m in ds.task.modalities:
            s = _latest_router_stage(model, m)
            if s is not None:
                shared[m] = s
        model.add_task(ds.task, ds.modality_dims(), stage=t, router_stage=shared)


def _in_place_stage(model: FlameModel, stage: StageSpec, datasets: Sequence[Dataset], cfg: TrainConfig,
                    seed: int, method: str, lam: float | None) -> StageLedger:
    t = _check_new_tasks(model, datasets)
    if method == "ewc" and (model.ewc_fisher is None or model.ewc_anchor is None):
        raise LedgerError("EWC needs the previous stage's Fisher and anchor")
    _add_shared_tasks(model, datasets, t)
    for w in model.stackable_weights():  # weights change in place, so the ledger simply advances
        w.horizon = t
    new_tasks = [ds.task.task_id for ds in datasets]
    trainable = list(_backbone(model).values())
    for tid in new_tasks:
        trainable.extend(model.heads[tid].params().values())
    penalty = None
    if method == "ewc":
        params = _backbone(model)
        fisher, anchor = model.ewc_fisher, model.ewc_anchor
        penalty = lambda: ewc_penalty(params, fisher, anchor, lam)  # noqa: E731
    train_tasks(model, datasets, trainable, replace(cfg, epochs=stage.epochs), seed, t, penalty)
    for enc in model.encoders.values():
        if enc.origin == t:
            enc.freeze_base(model.config.r0)
    _close_stage(model, t)
    before = count_params(model)
    if method == "ewc":
        consolidate_ewc(model, datasets)
    after = count_params(model)
    return _ledger(model, t, method, trainable, new_tasks, {"ewc_store": after["ewc_store"] - before["ewc_store"]})


def baseline_simple_ft(model: FlameModel, stage: StageSpec, datasets: Sequence[Dataset], cfg: TrainConfig,
                       seed: int) -> StageLedger:
    """Fine-tune the whole shared backbone in place for the new tasks (no isolation)."""
    model.method = "simple_ft"
    return _in_place_stage(model, stage, datasets, cfg, seed, "simple_ft", None)


def baseline_ewc(model: FlameModel, stage: StageSpec, datasets: Sequence[Dataset], cfg: TrainConfig,
                 seed: int, lam: float) -> StageLedger:
    """In-place fine-tuning with a diagonal-Fisher quadratic pull toward the previous weights."""
    if lam < 0:
        raise ValueError("EWC strength must be non-negative")
    model.method = "ewc"
    return _in_place_stage(model, stage, datasets, cfg, seed, "ewc", lam)


def fisher_diagonal(model: FlameModel, datasets: Sequence[Dataset]) -> dict[str, np.ndarray]:
    """Empirical diagonal Fisher: mean over samples of squared per-sample log-likelihood gradients."""
    params = _backbone(model)
    plist = list(params.values())
    _set_trainable(model, plist)
    fisher = {n: np.zeros_like(p.data) for n, p in params.items()}
    n = 0
    try:
        for ds in datasets:
            for s in ds.samples:
                with ad.Tape() as tape:
                    res = model.forward([s], ds.task.task_id)
                    nll = task_loss(res.logits, np.stack([np.asarray(s.label)]), ds.task.objective)
                grads = ad.backward(tape, nll, plist)
                for name, p in params.items():
                    fisher[name] += np.square(grads[p])
                n += 1
    finally:
        _set_trainable(model, ())
    if n == 0:
        raise ValueError("Fisher estimation needs data")
    return {k: v / n for k, v in fisher.items()}


def consolidate_ewc(model: FlameModel, datasets: Sequence[Dataset]) -> None:
    """Accumulate the Fisher of the just-finished stage and re-anchor at the current weights."""
    new = fisher_diagonal(model, datasets)
    old = model.ewc_fisher or {}
    model.ewc_fisher = {k: old[k] + v if k in old else v for k, v in new.items()}
    model.ewc_anchor = {k: p.data.copy() for k, p in _backbone(model).items()}


def baseline_lora(model: FlameModel, stage: StageSpec, datasets: Sequence[Dataset], cfg: TrainConfig,
                  seed: int, rank: int | None = None) -> StageLedger:
    """Per-stage low-rank adapters on the matrices FLAME would compress; base stays frozen."""
    t = _check_new_tasks(model, datasets)
    rank = stage.rank if rank is None else rank
    model.method = "lora"
    mods = _stage_modalities(datasets)
    existing = [m for m in mods if m in model.encoders]
    adapted = [w for e in model.experts for w in e.weights]
    for m in existing:
        adapted.extend(model.encoders[m].weights)
    for w in adapted:
        w.attach_adapter(t, rank, stream(seed, "lora-init", w.name, t))
    for ds in datasets:
        model.add_task(ds.task, ds.modality_dims(), stage=t)
    trainable: list[Param] = []
    for w in adapted:
        trainable.extend(w.adapters[t])
    for m in mods:
        if m not in existing:
            trainable.extend(model.encoders[m].params().values())
        trainable.extend(model.routers[(m, t)].params().values())
    new_tasks = [ds.task.task_id for ds in datasets]
    for tid in new_tasks:
        trainable.extend(model.heads[tid].params().values())
    train_tasks(model, datasets, trainable, replace(cfg, epochs=stage.epochs), seed, t)
    for enc in model.encoders.values():
        if enc.origin == t:
            enc.freeze_base(model.config.r0)
    _close_stage(model, t)
    return _ledger(model, t, "lora", trainable, new_tasks,
                   {"adapters": sum(w.adapter_scalars(t) for w in adapted)})


# ------------------------------------------------------------------ evaluation

def evaluate(model: FlameModel, dataset: Dataset, cursor: int | None = None, batch_size: int = 64) -> Metrics:
    task_id = dataset.task.task_id
    if task_id not in model.cursor:
        raise LedgerError(f"task {task_id!r} has not been trained")
    if cursor is not None and cursor != model.cursor[task_id]:
        raise LedgerError(f"task {task_id!r} must be evaluated at its cursor {model.cursor[task_id]}, got {cursor}")
    probs = model.predict(dataset, batch_size=batch_size)
    return compute_metrics(probs, dataset.labels(), dataset.task.objective)


# ------------------------------------------------------------------ streams

REPORT_COLUMNS = ("stage", "method", "task", "auroc", "auprc", "accuracy",
                  "encoder_params", "moe_params", "router_params", "head_params")


@dataclass
class StreamResult:
    model: FlameModel
    rows: list[dict]
    ledgers: list[StageLedger]
    predictions: dict[int, dict[str, np.ndarray]]  # stage -> task -> eval probabilities


def run_stream(method: str, stream_cfg: StreamConfig, splits: Mapping[str, tuple[Dataset, Dataset]],
               model_cfg: ModelConfig, cfg: TrainConfig, seed: int, lam: float = 100.0,
               lora_rank: int | None = None,
               on_stage: Callable[[int, FlameModel], None] | None = None) -> StreamResult:
    """Stage-0 pretraining then one continual stage per stream entry, evaluating every seen task.

    ``splits`` maps task id to ``(train, eval)`` datasets. For ``flame`` each
    earlier task's eval probabilities must stay bit-identical, otherwise
    :class:`InvariantViolation` is raised.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    if not stream_cfg.stages:
        raise ValueError("stream has no stages")
    missing = [t for st in stream_cfg.stages for t in st.tasks if t not in splits]
    if missing:
        raise ValueError(f"no data for tasks {missing}")
    first = stream_cfg.stages[0]
    train0 = [splits[t][0] for t in first.tasks]
    model = FlameModel(model_cfg, seed)
    model.method = method
    pretrain_multitask(train0, model_cfg, replace(cfg, epochs=first.epochs), seed, model=model)
    if method == "ewc":
        consolidate_ewc(model, train0)
    rows: list[dict] = []
    preds: dict[int, dict[str, np.ndarray]] = {}
    seen: list[str] = []
    for t, st in enumerate(stream_cfg.stages):
        if t > 0:
            train = [splits[k][0] for k in st.tasks]
            if method == "flame":
                continual_stage(model, st, train, cfg, seed)
            elif method == "simple_ft":
                baseline_simple_ft(model, st, train, cfg, seed)
            elif method == "ewc":
                baseline_ewc(model, st, train, cfg, seed, lam)
            else:
                baseline_lora(model, st, train, cfg, seed, lora_rank)
        seen.extend(st.tasks)
        totals = count_params(model)
        preds[t] = {}
        for task_id in seen:
            ev = splits[task_id][1]
            probs = model.predict(ev, batch_size=cfg.eval_batch_size)
            preds[t][task_id] = probs
            if method == "flame":
                intro = model.cursor[task_id]
                if intro < t and not np.array_equal(preds[intro][task_id], probs):
                    raise InvariantViolation(
                        f"task {task_id!r} predictions changed between stage {intro} and stage {t}")
            m = compute_metrics(probs, ev.labels(), ev.task.objective)
            rows.append({"stage": t, "method": method, "task": task_id, "auroc": m.auroc, "auprc": m.auprc,
                         "accuracy": m.accuracy, "encoder_params": totals["encoder"],
                         "moe_params": totals["moe"], "router_params": totals["router"],
                         "head_params": totals["head"]})
        if on_stage is not None:
            on_stage(t, model)
    return StreamResult(model, rows, list(model.ledgers), preds)
