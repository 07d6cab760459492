"""The flexi-modal MoE model: encoders, router heads, shared expert pool, task heads."""

from __future__ import annotations

import hashlib
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DataFormatError, Dataset, Sample, TaskSpec
from .encoders import Encoder, encode
from .experts import Expert, LedgerError, Slice, StackableWeight, expert_forward
from .numerics import autodiff as ad
from .numerics.autodiff import Param, Tensor
from .numerics.linalg import SvdFactors
from .numerics.rng import stream
from .routing import GateBatch, RouterHead, noisy_topk_gate, tap_pool

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    d: int = 16
    d_h: int | None = None  # defaults to 2 * d
    n_experts: int = 5
    top_k: int = 2
    kappa: int = 3
    r0: int | None = None   # stage-0 truncation rank; None keeps the dense base
    init_gain: float = 1.0  # multiplies the N(0, 1/fan_in) expert initialisation

    def __post_init__(self):
        if min(self.d, self.n_experts, self.top_k, self.kappa) < 1:
            raise ValueError("model sizes must be positive")
        if self.top_k > self.n_experts:
            raise ValueError(f"top_k={self.top_k} exceeds n_experts={self.n_experts}")
        if self.kappa % 2 == 0:
            raise ValueError("kappa must be odd")
        if not self.init_gain > 0:
            raise ValueError("init_gain must be positive")

    @property
    def hidden(self) -> int:
        return self.d_h if self.d_h is not None else 2 * self.d


@dataclass
class TaskHead:
    task_id: str
    weight: Param  # (n_out, d)
    bias: Param    # (n_out,)

    def params(self) -> dict[str, Param]:
        return {self.weight.name: self.weight, self.bias.name: self.bias}


@dataclass
class ModalityRouting:
    rows: np.ndarray          # sample positions in the batch where the modality is present
    lengths: np.ndarray       # token count per routed row
    gates: Tensor             # (len(rows), N)
    selected: np.ndarray      # (len(rows), K)


@dataclass
class ForwardResult:
    fused: Tensor                        # (B, d)
    logits: Tensor                       # (B, n_out)
    routing: dict[str, ModalityRouting] = field(default_factory=dict)


class FlameModel:
    def __init__(self, config: ModelConfig, seed: int = 0) -> None:
        self.config = config
        self.seed = seed
        self.experts = [Expert(i, config.d, config.hidden, config.kappa, stream(seed, "init", "expert", i),
                               gain=config.init_gain) for i in range(config.n_experts)]
        self.encoders: dict[str, Encoder] = {}
        self.routers: dict[tuple[str, int], RouterHead] = {}
        self.heads: dict[str, TaskHead] = {}
        self.tasks: dict[str, TaskSpec] = {}
        self.cursor: dict[str, int] = {}
        self.router_stage: dict[tuple[str, str], int] = {}
        self.stage = -1               # last completed stage
        self.active_stage: int | None = None
        self.method = "flame"
        self.ewc_fisher: dict[str, np.ndarray] | None = None
        self.ewc_anchor: dict[str, np.ndarray] | None = None
        self.ledgers: list = []       # StageLedger per completed stage (not checkpointed)

    # ------------------------------------------------------------ structure

    def ensure_encoder(self, modality_id: str, d_in: int, stage: int) -> Encoder:
        enc = self.encoders.get(modality_id)
        if enc is None:
            enc = Encoder(modality_id, d_in, self.config.d, origin=stage,
                          rng=stream(self.seed, "init", "encoder", modality_id))
            self.encoders[modality_id] = enc
        elif enc.d_in != d_in:
            raise ValueError(f"modality {modality_id!r} dim {d_in} != encoder dim {enc.d_in}")
        return enc

    def ensure_router(self, modality_id: str, stage: int) -> RouterHead:
        key = (modality_id, stage)
        if key not in self.routers:
            self.routers[key] = RouterHead.create(modality_id, stage, self.config.d, self.config.n_experts,
                                                  stream(self.seed, "init", "router", modality_id, stage))
        return self.routers[key]

    def add_task(self, spec: TaskSpec, modality_dims: dict[str, int], stage: int,
                 cursor: int | None = None, router_stage: dict[str, int] | None = None) -> TaskHead:
        if spec.task_id in self.tasks:
            raise LedgerError(f"task {spec.task_id!r} already trained")
        self.tasks[spec.task_id] = spec
        self.cursor[spec.task_id] = stage if cursor is None else cursor
        for m in spec.modalities:
            self.ensure_encoder(m, modality_dims[m], stage)
            rs = stage if router_stage is None else router_stage.get(m, stage)
            self.ensure_router(m, rs)
            self.router_stage[(spec.task_id, m)] = rs
        rng = stream(self.seed, "init", "head", spec.task_id)
        d = self.config.d
        head = TaskHead(spec.task_id,
                        Param(rng.standard_normal((spec.n_outputs, d)) / np.sqrt(d), f"head[{spec.task_id}].w"),
                        Param(np.zeros(spec.n_outputs), f"head[{spec.task_id}].b"))
        self.heads[spec.task_id] = head
        return head

    def router_for(self, task_id: str, modality_id: str) -> RouterHead:
        return self.routers[(modality_id, self.router_stage[(task_id, modality_id)])]

    def stackable_weights(self) -> list[StackableWeight]:
        out = [w for e in self.experts for w in e.weights]
        for m in sorted(self.encoders):
            out.extend(self.encoders[m].weights)
        return out

    def parameters(self) -> dict[str, Param]:
        out: dict[str, Param] = {}
        for e in self.experts:
            for w in e.weights:
                out.update(w.params())
        for m in sorted(self.encoders):
            out.update(self.encoders[m].params())
        for key in sorted(self.routers):
            out.update(self.routers[key].params())
        for t in sorted(self.heads):
            out.update(self.heads[t].params())
        return out

    def stored_arrays(self) -> dict[str, np.ndarray]:
        """Every stored tensor: parameters, frozen slices, positional deltas, EWC stores."""
        out = {name: p.data for name, p in self.parameters().items()}
        for w in self.stackable_weights():
            out.update(w.slice_arrays())
        for m, enc in self.encoders.items():
            for s, v in enc.pos_deltas.items():
                out[f"enc[{m}].pos.delta{s}"] = np.asarray(v)
        if self.ewc_fisher is not None:
            out.update({f"ewc.fisher.{k}": v for k, v in self.ewc_fisher.items()})
            out.update({f"ewc.anchor.{k}": v for k, v in self.ewc_anchor.items()})
        return out

    def checksum(self, names: Sequence[str] | None = None) -> str:
        arrays = self.stored_arrays()
        h = hashlib.sha256()
        for k in sorted(arrays if names is None else names):
            h.update(k.encode())
            h.update(np.ascontiguousarray(arrays[k]).tobytes())
        return h.hexdigest()

    # ------------------------------------------------------------ forward

    def forward(self, samples: Sequence[Sample], task_id: str, tau: int | None = None,
                train: bool = False, rng: np.random.Generator | None = None,
                trace: dict | None = None) -> ForwardResult:
        spec = self.tasks[task_id]
        tau = self.cursor[task_id] if tau is None else tau
        fused, routing = moe_forward(self, samples, spec, tau, train=train, rng=rng, trace=trace)
        head = self.heads[task_id]
        logits = ad.matmul(fused, ad.transpose(head.weight)) + head.bias
        return ForwardResult(fused, logits, routing)

    def predict(self, dataset: Dataset, batch_size: int = 64, tau: int | None = None) -> np.ndarray:
        """Eval-mode probabilities in dataset order, shape ``(n, n_out)``."""
        task = dataset.task
        outs = []
        with ad.no_tape():
            for start in range(0, len(dataset), batch_size):
                res = self.forward(dataset.samples[start:start + batch_size], task.task_id, tau)
                outs.append(res.logits.data)
        logits = np.concatenate(outs, axis=0) if outs else np.zeros((0, task.n_outputs))
        if task.objective == "multiclass":
            z = logits - logits.max(axis=1, keepdims=True)
            e = np.exp(z)
            return e / e.sum(axis=1, keepdims=True)
        return 1.0 / (1.0 + np.exp(-logits))


def moe_forward(model: FlameModel, samples: Sequence[Sample], task: TaskSpec, tau: int,
                train: bool = False, rng: np.random.Generator | None = None,
                trace: dict | None = None) -> tuple[Tensor, dict[str, ModalityRouting]]:
    """Encode, pool, gate and mix experts per present modality; fuse by time-mean then sum."""
    B = len(samples)
    cfg = model.config
    fused: Tensor | None = None
    routing: dict[str, ModalityRouting] = {}
    for m in task.modalities:
        rows = [i for i, s in enumerate(samples) if m in s.inputs and s.inputs[m].present]
        if not rows:
            continue
        enc = model.encoders[m]
        head = model.router_for(task.task_id, m)
        lengths = np.array([samples[i].inputs[m].length for i in rows])
        groups: dict[int, list[int]] = {}
        for pos, L in enumerate(lengths):
            groups.setdefault(int(L), []).append(pos)
        gate_parts = []
        selected = np.zeros((len(rows), cfg.top_k), dtype=np.int64)
        for L in sorted(groups):
            members = groups[L]
            batch_rows = [rows[p] for p in members]
            x = np.stack([samples[i].inputs[m].values for i in batch_rows])
            z = encode(enc, x, tau)
            pooled = tap_pool(z, head.query)
            gb = noisy_topk_gate(pooled, head, cfg.top_k, train=train, rng=rng)
            y = mix_experts(model.experts, z, gb, tau, trace)
            contrib = ad.scatter_rows(ad.mean(y, axis=1), batch_rows, B)
            fused = contrib if fused is None else fused + contrib
            gate_parts.append(ad.scatter_rows(gb.gates, members, len(rows)))
            selected[members] = gb.selected
        gates = gate_parts[0]
        for part in gate_parts[1:]:
            gates = gates + part
        routing[m] = ModalityRouting(np.array(rows), lengths, gates, selected)
    if fused is None:
        raise ValueError(f"task {task.task_id!r}: every modality is absent in this batch")
    return fused, routing


def mix_experts(experts: Sequence[Expert], z: Tensor, gb: GateBatch, tau: int,
                trace: dict | None = None) -> Tensor:
    """``sum_i g_i * E_i(z)`` evaluating each expert only on the samples that selected it."""
    B = z.shape[0]
    out: Tensor | None = None
    for e in experts:
        idx = np.flatnonzero((gb.selected == e.index).any(axis=1))
        if idx.size == 0:
            continue
        y = expert_forward(e, z[idx], tau, trace)
        w = ad.reshape(gb.gates[idx, e.index], (idx.size, 1, 1))
        part = ad.scatter_rows(y * w, idx, B)
        out = part if out is None else out + part
    return out


# ------------------------------------------------------------------ checkpoints

def _weight_header(w: StackableWeight) -> dict:
    return {"name": w.name, "shape": list(w.shape), "has_bias": w.has_bias, "origin": w.origin,
            "horizon": w.horizon,
            "slices": [{"stage": s.stage, "rank": s.factors.rank, "bias": s.bias is not None} for s in w.slices],
            "adapters": {str(k): int(a.shape[1]) for k, (a, _) in w.adapters.items()}}


def save_checkpoint(model: FlameModel, path) -> None:
    """Single ``.npz`` archive with a versioned JSON header; round trip is bit-exact."""
    if any(w.live is not None for w in model.stackable_weights()):
        raise LedgerError("cannot checkpoint while a stage owns live components")
    header = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "seed": model.seed,
        "stage": model.stage,
        "method": model.method,
        "experts": [[_weight_header(w) for w in e.weights] for e in model.experts],
        "encoders": {m: {"d_in": enc.d_in, "origin": enc.origin,
                         "weights": [_weight_header(w) for w in enc.weights],
                         "pos_deltas": sorted(enc.pos_deltas)}
                     for m, enc in model.encoders.items()},
        "routers": [[m, s] for (m, s) in sorted(model.routers)],
        "tasks": {t: asdict(spec) for t, spec in model.tasks.items()},
        "cursor": model.cursor,
        "router_stage": [[t, m, s] for (t, m), s in sorted(model.router_stage.items())],
        "ewc": model.ewc_fisher is not None,
    }
    arrays = dict(model.stored_arrays())
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(Path(path), "wb") as fh:
        np.savez(fh, **arrays)


def _restore_weight(w: StackableWeight, meta: dict, arrays) -> None:
    w.horizon = int(meta["horizon"])
    w.base.data = np.array(arrays[w.base.name])
    if w.base_bias is not None:
        w.base_bias.data = np.array(arrays[w.base_bias.name])
    for sm in meta["slices"]:
        key = f"{w.name}.slice{sm['stage']}"
        f = SvdFactors(np.array(arrays[key + ".u"]), np.array(arrays[key + ".sigma"]), np.array(arrays[key + ".vt"]))
        w.slices.append(Slice(sm["stage"], f, np.array(arrays[key + ".bias"]) if sm["bias"] else None))
    for stage, _ in meta["adapters"].items():
        s = int(stage)
        a = Param(np.array(arrays[f"{w.name}.lora_a{s}"]), f"{w.name}.lora_a{s}")
        b = Param(np.array(arrays[f"{w.name}.lora_b{s}"]), f"{w.name}.lora_b{s}")
        w.adapters[s] = (a, b)


def load_checkpoint(path) -> FlameModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        return _load_checkpoint(path)
    except (zipfile.BadZipFile, KeyError, ValueError, TypeError, OSError) as exc:
        raise DataFormatError(f"{path}: not a readable checkpoint ({exc})") from exc


def _load_checkpoint(path: Path) -> FlameModel:
    with np.load(path, allow_pickle=False) as arrays:
        header = json.loads(bytes(arrays["__header__"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        model = FlameModel(ModelConfig(**header["config"]), seed=header["seed"])
        model.stage = header["stage"]
        model.method = header["method"]
        for e, metas in zip(model.experts, header["experts"]):
            for w, meta in zip(e.weights, metas):
                _restore_weight(w, meta, arrays)
        for m, meta in header["encoders"].items():
            enc = Encoder(m, meta["d_in"], model.config.d, origin=meta["origin"])
            for w, wm in zip(enc.weights, meta["weights"]):
                _restore_weight(w, wm, arrays)
            enc.pos.data = np.array(arrays[enc.pos.name])
            for s in meta["pos_deltas"]:
                enc.pos_deltas[int(s)] = float(arrays[f"enc[{m}].pos.delta{s}"])
            model.encoders[m] = enc
        for m, s in header["routers"]:
            head = RouterHead.create(m, s, model.config.d, model.config.n_experts, None)
            for p in (head.w_gate, head.w_noise, head.query):
                p.data = np.array(arrays[p.name])
            model.routers[(m, s)] = head
        for t, spec in header["tasks"].items():
            spec["modalities"] = tuple(spec["modalities"])
            model.tasks[t] = TaskSpec(**spec)
            n_out = model.tasks[t].n_outputs
            model.heads[t] = TaskHead(t, Param(np.array(arrays[f"head[{t}].w"]), f"head[{t}].w"),
                                      Param(np.array(arrays[f"head[{t}].b"]), f"head[{t}].b"))
            if model.heads[t].weight.shape[0] != n_out:
                raise ValueError(f"head for {t!r} does not match its objective")
        model.cursor = {t: int(s) for t, s in header["cursor"].items()}
        model.router_stage = {(t, m): int(s) for t, m, s in header["router_stage"]}
        if header["ewc"]:
            model.ewc_fisher = {k[len("ewc.fisher."):]: np.array(arrays[k]) for k in arrays.files
                                if k.startswith("ewc.fisher.")}
            model.ewc_anchor = {k[len("ewc.anchor."):]: np.array(arrays[k]) for k in arrays.files
                                if k.startswith("ewc.anchor.")}
    return model
