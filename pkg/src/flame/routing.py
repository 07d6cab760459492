"""Per-modality sample-level routing: pooling, noisy top-K gates and routing losses."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .numerics import autodiff as ad
from .numerics.autodiff import Param, Tensor


@dataclass
class RouterHead:
    modality_id: str
    stage: int
    w_gate: Param   # (d, N)
    w_noise: Param  # (d, N)
    query: Param    # (d,)

    @classmethod
    def create(cls, modality_id: str, stage: int, d: int, n_experts: int,
               rng: np.random.Generator | None) -> "RouterHead":
        pre = f"router[{modality_id}@{stage}]"
        wg = np.zeros((d, n_experts)) if rng is None else rng.standard_normal((d, n_experts)) / np.sqrt(d)
        return cls(modality_id, stage, Param(wg, f"{pre}.w_gate"),
                   Param(np.zeros((d, n_experts)), f"{pre}.w_noise"),
                   Param(np.zeros(d), f"{pre}.query"))

    @property
    def n_experts(self) -> int:
        return self.w_gate.shape[1]

    def params(self) -> dict[str, Param]:
        return {p.name: p for p in (self.w_gate, self.w_noise, self.query)}


@dataclass(frozen=True)
class GateDecision:
    selected: np.ndarray  # (K,) ascending expert indices
    weights: np.ndarray   # (K,) positive, sum to 1
    dense: np.ndarray     # (N,)


@dataclass
class GateBatch:
    gates: Tensor         # (B, N) dense gates, zero off-support
    selected: np.ndarray  # (B, K) ascending

    def decisions(self) -> list[GateDecision]:
        g = self.gates.data
        return [GateDecision(sel, g[b, sel].copy(), g[b].copy()) for b, sel in enumerate(self.selected)]


def tap_pool(z, q) -> Tensor:
    """Learnable-query softmax attention over time: ``(..., L, d) -> (..., d)``."""
    z, q = ad.tensor(z), ad.tensor(q)
    if z.shape[-2] == 0:
        raise ValueError("temporal pooling needs at least one time step")
    d = z.shape[-1]
    scores = ad.matmul(z, q) * (1.0 / math.sqrt(d))
    alpha = ad.softmax(scores, axis=-1)
    return ad.sum(z * ad.reshape(alpha, alpha.shape + (1,)), axis=-2)


def topk_mask(logits: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Keep the ``k`` largest entries per row; ties go to the lowest index."""
    n = logits.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"top-K needs 1 <= K <= N, got K={k}, N={n}")
    order = np.argsort(-logits, axis=-1, kind="stable")[..., :k]
    selected = np.sort(order, axis=-1)
    mask = np.zeros(logits.shape, dtype=bool)
    np.put_along_axis(mask, selected, True, axis=-1)
    return selected, mask


def gate_logits(pooled, head: RouterHead, train: bool, rng: np.random.Generator | None) -> Tensor:
    pooled = ad.tensor(pooled)
    h = ad.matmul(pooled, head.w_gate)
    if train:
        if rng is None:
            raise ValueError("training-mode gating needs a noise generator")
        eps = rng.standard_normal(h.shape)
        h = h + eps * ad.softplus(ad.matmul(pooled, head.w_noise))
    return h


def noisy_topk_gate(pooled, head: RouterHead, k: int, train: bool = False,
                    rng: np.random.Generator | None = None) -> GateBatch:
    """Noisy top-K gating over ``(B, d)`` pooled summaries (noise only when training)."""
    h = gate_logits(pooled, head, train, rng)
    return gate_from_logits(h, k)


def gate_from_logits(h, k: int) -> GateBatch:
    h = ad.tensor(h)
    selected, mask = topk_mask(h.data, k)
    return GateBatch(ad.masked_softmax(h, mask), selected)


def _dense_stack(decisions) -> Tensor:
    if isinstance(decisions, Tensor):
        return decisions
    if isinstance(decisions, GateBatch):
        return decisions.gates
    return Tensor(np.stack([np.asarray(d.dense) for d in decisions]))


def balance_loss(decisions) -> Tensor:
    """Squared coefficient of variation of per-expert importance (sum of gates over the batch)."""
    g = _dense_stack(decisions)
    if g.shape[0] == 0:
        raise ValueError("balance loss needs a nonempty batch")
    importance = ad.sum(g, axis=0)
    n = importance.shape[0]
    mu = ad.sum(importance) * (1.0 / n)
    if float(mu.data) == 0.0:
        return Tensor(0.0)
    var = ad.sum(ad.square(importance - mu)) * (1.0 / n)
    return var / ad.square(mu)


def cosine(a, b) -> Tensor:
    a, b = ad.tensor(a), ad.tensor(b)
    na = ad.sqrt(ad.sum(ad.square(a)))
    nb = ad.sqrt(ad.sum(ad.square(b)))
    if float(na.data) == 0.0 or float(nb.data) == 0.0:
        return Tensor(0.0)
    return ad.sum(a * b) / (na * nb)


def divergence_loss(mean_gates: Mapping[str, Tensor], beta: int) -> Tensor:
    """``beta`` times the mean pairwise cosine between per-modality mean gate vectors."""
    if beta not in (1, -1):
        raise ValueError("beta must be +1 (spread) or -1 (concentrate)")
    keys = list(mean_gates)
    if len(keys) < 2:
        return Tensor(0.0)
    total: Tensor = Tensor(0.0)
    pairs = 0
    for i in range(len(keys)):
        for j in range(i + 1, len(keys)):
            total = total + cosine(mean_gates[keys[i]], mean_gates[keys[j]])
            pairs += 1
    return total * (float(beta) / pairs)


@dataclass
class Fingerprint:
    activation_ratio: np.ndarray  # (N,)
    mean_gate_weight: np.ndarray  # (N,), NaN where never activated


def fingerprint_from_decisions(decisions: Sequence[GateDecision], n_experts: int,
                               token_counts: Sequence[int] | None = None) -> Fingerprint:
    """Token-weighted activation ratio and activation-conditioned mean gate weight."""
    if not decisions:
        raise ValueError("fingerprint needs at least one routing decision")
    w = np.ones(len(decisions)) if token_counts is None else np.asarray(token_counts, dtype=np.float64)
    active = np.zeros(n_experts)
    weight_sum = np.zeros(n_experts)
    for dec, wt in zip(decisions, w):
        active[dec.selected] += wt
        weight_sum[dec.selected] += wt * np.asarray(dec.weights)
    total = w.sum()
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_w = np.where(active > 0, weight_sum / np.where(active > 0, active, 1.0), np.nan)
    return Fingerprint(active / total, mean_w)


def routing_fingerprint(model, dataset, cursor: int | None = None,
                        batch_size: int = 64) -> dict[str, Fingerprint]:
    """Per-modality fingerprint of eval-mode routing for one task's data."""
    from .numerics.autodiff import no_tape

    if len(dataset) == 0:
        raise ValueError("fingerprint needs data")
    task = dataset.task
    decisions: dict[str, list[GateDecision]] = {}
    counts: dict[str, list[int]] = {}
    with no_tape():
        for start in range(0, len(dataset), batch_size):
            res = model.forward(dataset.samples[start:start + batch_size], task.task_id, cursor)
            for m, r in res.routing.items():
                g = r.gates.data
                for row, sel in enumerate(r.selected):
                    decisions.setdefault(m, []).append(GateDecision(sel, g[row, sel], g[row]))
                counts.setdefault(m, []).extend(int(v) for v in r.lengths)
    n = model.config.n_experts
    return {m: fingerprint_from_decisions(decisions[m], n, counts[m]) for m in task.modalities if m in decisions}
