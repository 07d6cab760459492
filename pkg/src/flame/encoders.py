"""Modality encoders: input projection plus one self-attention layer with residual."""

from __future__ import annotations

import numpy as np

from .numerics import autodiff as ad
from .numerics.autodiff import Param, Tensor
from .experts import LedgerError, StackableWeight


def sinusoidal(L: int, d: int) -> np.ndarray:
    pos = np.arange(L, dtype=np.float64)[:, None]
    i = np.arange(d)[None, :]
    rate = 1.0 / np.power(10000.0, (2 * (i // 2)) / d)
    ang = pos * rate
    return np.where(i % 2 == 0, np.sin(ang), np.cos(ang))


class Encoder:
    """Maps a modality's ``(L, d_in)`` sequence to ``(L, d)``.

    All four projections are :class:`StackableWeight` so they take part in
    compress-and-stack; the positional scale keeps exact per-stage deltas.
    """

    def __init__(self, modality_id: str, d_in: int, d: int, origin: int = 0,
                 rng: np.random.Generator | None = None) -> None:
        self.modality_id, self.d_in, self.d, self.origin = modality_id, d_in, d, origin

        def init(shape):
            if rng is None:
                return np.zeros(shape)
            return rng.standard_normal(shape) / np.sqrt(shape[1])

        pre = f"enc[{modality_id}]"
        self.inp = StackableWeight(f"{pre}.inp", (d, d_in), origin=origin, init=init((d, d_in)))
        self.q = StackableWeight(f"{pre}.q", (d, d), has_bias=False, origin=origin, init=init((d, d)))
        self.k = StackableWeight(f"{pre}.k", (d, d), has_bias=False, origin=origin, init=init((d, d)))
        self.v = StackableWeight(f"{pre}.v", (d, d), has_bias=False, origin=origin, init=init((d, d)))
        self.pos = Param(np.zeros(()), name=f"{pre}.pos.base")
        self.pos_deltas: dict[int, float] = {}
        self.live_pos: Param | None = None
        self.live_pos_stage: int | None = None

    @property
    def weights(self) -> tuple[StackableWeight, ...]:
        return (self.inp, self.q, self.k, self.v)

    def attach_live(self, stage: int) -> None:
        for w in self.weights:
            w.attach_live(stage)
        self.live_pos = Param(np.zeros(()), name=f"enc[{self.modality_id}].pos.live{stage}")
        self.live_pos_stage = stage

    def compress_and_stack(self, rank: int) -> None:
        if self.live_pos is None:
            raise LedgerError(f"encoder {self.modality_id!r}: no live component")
        for w in self.weights:
            w.compress_and_stack(rank)
        self.pos_deltas[self.live_pos_stage] = float(self.live_pos.data)
        self.live_pos = None
        self.live_pos_stage = None

    def freeze_base(self, rank: int | None = None) -> None:
        for w in self.weights:
            w.freeze_base(rank)

    def pos_scale(self, tau: int) -> Tensor:
        deltas = [v for s, v in sorted(self.pos_deltas.items()) if s <= tau]
        s: Tensor = self.pos
        if deltas:
            total = self.pos.data.copy()
            for v in deltas:
                total = total + v
            s = Tensor(total)
        if self.live_pos is not None and self.live_pos_stage == tau:
            s = s + self.live_pos
        return s

    def params(self) -> dict[str, Param]:
        out = {}
        for w in self.weights:
            out.update(w.params())
        out[self.pos.name] = self.pos
        if self.live_pos is not None:
            out[self.live_pos.name] = self.live_pos
        return out


def encode(enc: Encoder, x, tau: int) -> Tensor:
    """Encode ``(..., L, d_in)`` values; absent modalities must be skipped by the caller."""
    x = ad.tensor(x)
    if x.shape[-1] != enc.d_in:
        raise ValueError(f"encoder {enc.modality_id!r} expects dim {enc.d_in}, got {x.shape[-1]}")
    L = x.shape[-2]
    if L == 0:
        raise ValueError("cannot encode an empty (absent) modality sequence")
    p = enc.inp.apply(x, tau)
    p = p + enc.pos_scale(tau) * sinusoidal(L, enc.d)
    q = enc.q.apply(p, tau)
    k = enc.k.apply(p, tau)
    v = enc.v.apply(p, tau)
    scores = ad.matmul(q, ad.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(enc.d))
    attn = ad.softmax(scores, axis=-1)
    return p + ad.matmul(attn, v)
