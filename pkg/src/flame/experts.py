"""Stackable weights (compress-and-stack ledger) and temporal experts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import autodiff as ad
from .numerics.autodiff import Param, Tensor
from .numerics.linalg import SvdFactors, truncated_svd


class LedgerError(RuntimeError):
    """Cursor or stage bookkeeping was used out of contract."""


@dataclass(frozen=True)
class Slice:
    stage: int
    factors: SvdFactors
    bias: np.ndarray | None  # exact per-stage bias delta

    def stored_scalars(self) -> int:
        n = self.factors.stored_scalars()
        return n + (0 if self.bias is None else self.bias.size)


class StackableWeight:
    """A ``(p, q)`` weight stored as a frozen base plus per-stage rank-truncated slices.

    ``base`` is trainable only while its owner trains it densely (pretraining,
    or a baseline that fine-tunes in place). During a continual stage the only
    trainable parts are ``live`` / ``live_bias``; ``adapters`` holds LoRA-style
    factor pairs keyed by stage for the LoRA baseline.
    """

    def __init__(self, name: str, shape: tuple[int, int], has_bias: bool = True,
                 origin: int = 0, init: np.ndarray | None = None) -> None:
        self.name = name
        self.shape = tuple(shape)
        self.origin = origin
        data = np.zeros(self.shape) if init is None else np.array(init, dtype=np.float64)
        if data.shape != self.shape:
            raise ValueError(f"{name}: init shape {data.shape} != {self.shape}")
        self.base = Param(data, name=f"{name}.base")
        self.base_bias = Param(np.zeros(self.shape[0]), name=f"{name}.base_bias") if has_bias else None
        self.slices: list[Slice] = []
        self.live: Param | None = None
        self.live_bias: Param | None = None
        self.live_stage: int | None = None
        self.adapters: dict[int, tuple[Param, Param]] = {}
        self.horizon = origin  # last stage the ledger covers

    @property
    def has_bias(self) -> bool:
        return self.base_bias is not None

    @property
    def last_stage(self) -> int:
        if self.live_stage is not None:
            return max(self.horizon, self.live_stage)
        return self.horizon

    # ------------------------------------------------------------ ledger operations

    def attach_live(self, stage: int) -> None:
        if self.live is not None:
            raise LedgerError(f"{self.name}: live component already attached for stage {self.live_stage}")
        if stage <= max([self.origin] + [s.stage for s in self.slices]):
            raise LedgerError(f"{self.name}: stage {stage} is not after the frozen stack")
        self.live = Param(np.zeros(self.shape), name=f"{self.name}.live{stage}")
        self.live_bias = (Param(np.zeros(self.shape[0]), name=f"{self.name}.live_bias{stage}")
                          if self.has_bias else None)
        self.live_stage = stage

    def compress_and_stack(self, rank: int) -> Slice:
        if self.live is None:
            raise LedgerError(f"{self.name}: no live component to compress")
        factors = truncated_svd(self.live.data, min(rank, min(self.shape)))
        bias = None if self.live_bias is None else self.live_bias.data.copy()
        sl = Slice(self.live_stage, factors, bias)
        self.slices.append(sl)
        self.horizon = max(self.horizon, sl.stage)
        self.live = self.live_bias = None
        self.live_stage = None
        return sl

    def freeze_base(self, rank: int | None = None) -> None:
        """Stage-0 compress-and-init: optionally truncate the dense base to ``rank``."""
        if rank is not None and rank < min(self.shape):
            self.base.data = truncated_svd(self.base.data, rank).expand()

    def attach_adapter(self, stage: int, rank: int, rng: np.random.Generator) -> None:
        p, q = self.shape
        a = Param(rng.standard_normal((p, rank)) / np.sqrt(rank), name=f"{self.name}.lora_a{stage}")
        b = Param(np.zeros((rank, q)), name=f"{self.name}.lora_b{stage}")
        self.adapters[stage] = (a, b)
        self.horizon = max(self.horizon, stage)

    # ------------------------------------------------------------ resolution

    def _check_cursor(self, tau: int) -> None:
        if tau < self.origin:
            raise LedgerError(f"{self.name}: cursor {tau} precedes origin stage {self.origin}")
        if tau > self.last_stage:
            raise LedgerError(f"{self.name}: cursor {tau} beyond ledger (last stage {self.last_stage})")

    def frozen_weight(self, tau: int) -> np.ndarray:
        self._check_cursor(tau)
        w = self.base.data.copy()
        for sl in self.slices:
            if sl.stage <= tau:
                w = w + sl.factors.expand()
        return w

    def frozen_bias(self, tau: int) -> np.ndarray | None:
        if not self.has_bias:
            return None
        b = self.base_bias.data.copy()
        for sl in self.slices:
            if sl.stage <= tau:
                b = b + sl.bias
        return b

    def effective_weight(self, tau: int) -> np.ndarray:
        """``W0 + sum of slices with stage <= tau`` (+ live/adapter parts owned by ``tau``)."""
        w = self.frozen_weight(tau)
        if self.live is not None and self.live_stage == tau:
            w = w + self.live.data
        if tau in self.adapters:
            a, b = self.adapters[tau]
            w = w + a.data @ b.data
        return w

    def effective_bias(self, tau: int) -> np.ndarray | None:
        b = self.frozen_bias(tau)
        if b is not None and self.live_bias is not None and self.live_stage == tau:
            b = b + self.live_bias.data
        return b

    def weight(self, tau: int) -> Tensor:
        """Differentiable effective weight at cursor ``tau``."""
        self._check_cursor(tau)
        if not any(sl.stage <= tau for sl in self.slices):
            w: Tensor = self.base
        else:
            w = Tensor(self.frozen_weight(tau))
        if self.live is not None and self.live_stage == tau:
            w = w + self.live
        if tau in self.adapters:
            a, b = self.adapters[tau]
            w = w + a @ b
        return w

    def bias(self, tau: int) -> Tensor | None:
        if not self.has_bias:
            return None
        if not any(sl.stage <= tau for sl in self.slices):
            b: Tensor = self.base_bias
        else:
            b = Tensor(self.frozen_bias(tau))
        if self.live_bias is not None and self.live_stage == tau:
            b = b + self.live_bias
        return b

    def apply(self, x: Tensor, tau: int) -> Tensor:
        """``x @ W(tau)^T + b(tau)`` over the last axis."""
        y = ad.matmul(x, ad.transpose(self.weight(tau)))
        b = self.bias(tau)
        return y if b is None else y + b

    # ------------------------------------------------------------ accounting

    def params(self) -> dict[str, Param]:
        out = {self.base.name: self.base}
        if self.base_bias is not None:
            out[self.base_bias.name] = self.base_bias
        if self.live is not None:
            out[self.live.name] = self.live
            if self.live_bias is not None:
                out[self.live_bias.name] = self.live_bias
        for a, b in self.adapters.values():
            out[a.name] = a
            out[b.name] = b
        return out

    def slice_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for sl in self.slices:
            key = f"{self.name}.slice{sl.stage}"
            out[key + ".u"] = sl.factors.u
            out[key + ".sigma"] = sl.factors.sigma
            out[key + ".vt"] = sl.factors.vt
            if sl.bias is not None:
                out[key + ".bias"] = sl.bias
        return out

    def base_scalars(self) -> int:
        return self.base.data.size + (0 if self.base_bias is None else self.base_bias.data.size)

    def slice_scalars(self, stage: int) -> int:
        return sum(sl.stored_scalars() for sl in self.slices if sl.stage == stage)

    def adapter_scalars(self, stage: int) -> int:
        if stage not in self.adapters:
            return 0
        a, b = self.adapters[stage]
        return a.data.size + b.data.size


class Expert:
    """Same-padded temporal convolution followed by a position-wise two-layer MLP."""

    def __init__(self, index: int, d: int, d_h: int, kappa: int, rng: np.random.Generator | None,
                 gain: float = 1.0) -> None:
        if kappa < 1 or kappa % 2 == 0:
            raise ValueError("conv kernel size must be a positive odd integer")
        self.index, self.d, self.d_h, self.kappa = index, d, d_h, kappa

        def init(shape):
            if rng is None:
                return np.zeros(shape)
            return rng.standard_normal(shape) * (gain / np.sqrt(shape[1]))

        self.conv = StackableWeight(f"expert{index}.conv", (d, d * kappa), init=init((d, d * kappa)))
        self.mlp1 = StackableWeight(f"expert{index}.mlp1", (d_h, d), init=init((d_h, d)))
        self.mlp2 = StackableWeight(f"expert{index}.mlp2", (d, d_h), init=init((d, d_h)))

    @property
    def weights(self) -> tuple[StackableWeight, ...]:
        return (self.conv, self.mlp1, self.mlp2)


def conv_windows(z: Tensor, kappa: int) -> Tensor:
    """Stack the ``kappa`` same-padded time shifts of ``(..., L, d)`` into ``(..., L, kappa*d)``."""
    half = kappa // 2
    L = z.shape[-2]
    if kappa == 1:
        return z
    zp = ad.pad_time(z, half, half)
    return ad.concat([zp[..., j:j + L, :] for j in range(kappa)], axis=-1)


def expert_forward(e: Expert, z: Tensor, tau: int, trace: dict | None = None) -> Tensor:
    """``mlp2(gelu(mlp1(gelu(conv(z)))))`` on ``(..., L, d)``; length preserving.

    ``trace`` (optional) collects the immediate input tokens of each sublayer,
    keyed ``(expert index, sublayer)``.
    """
    z = ad.tensor(z)
    win = conv_windows(z, e.kappa)
    h0 = ad.gelu(e.conv.apply(win, tau))
    h1 = ad.gelu(e.mlp1.apply(h0, tau))
    out = e.mlp2.apply(h1, tau)
    if trace is not None:
        for key, t in (("conv", win), ("mlp1", h0), ("mlp2", h1)):
            trace.setdefault((e.index, key), []).append(t.data.reshape(-1, t.shape[-1]))
    return out
