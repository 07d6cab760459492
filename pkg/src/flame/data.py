"""Flexi-modal data model, synthetic task generator, IDX ingestion and batching."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .numerics.rng import stream

OBJECTIVES = ("binary", "multiclass", "multilabel")


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ModalitySequence:
    modality_id: str
    values: np.ndarray       # (L, d)
    timestamps: np.ndarray   # (L,)
    present: bool = True

    def __post_init__(self):
        if self.values.ndim != 2 or self.timestamps.shape != (self.values.shape[0],):
            raise ValueError("values must be (L, d) with one timestamp per step")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("modality values must be finite")
        if np.any(np.diff(self.timestamps) < 0):
            raise ValueError("timestamps must be nondecreasing")
        if not self.present and self.values.shape[0] != 0:
            raise ValueError("an absent modality has length 0")

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @classmethod
    def absent(cls, modality_id: str, dim: int) -> "ModalitySequence":
        return cls(modality_id, np.zeros((0, dim)), np.zeros(0), present=False)


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    modalities: tuple[str, ...]
    objective: str = "binary"
    n_classes: int = 2
    beta: int = 1  # +1 spread, -1 concentrate

    def __post_init__(self):
        if not self.modalities:
            raise ValueError(f"task {self.task_id!r} needs at least one modality")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.beta not in (1, -1):
            raise ValueError("beta must be +1 or -1")

    @property
    def n_outputs(self) -> int:
        return 1 if self.objective == "binary" else self.n_classes


@dataclass(frozen=True)
class Sample:
    inputs: dict[str, ModalitySequence]
    label: np.ndarray  # scalar int for binary/multiclass, 0/1 vector for multilabel


@dataclass
class Dataset:
    task: TaskSpec
    samples: list[Sample]
    latents: np.ndarray | None = None  # (n, features) ground-truth sample codes, synthetic only

    def __len__(self) -> int:
        return len(self.samples)

    def labels(self) -> np.ndarray:
        return np.stack([np.asarray(s.label) for s in self.samples])

    def modality_dims(self) -> dict[str, int]:
        dims = {}
        for s in self.samples:
            for m, x in s.inputs.items():
                dims.setdefault(m, x.dim)
        return dims

    def subset(self, idx: Sequence[int]) -> "Dataset":
        lat = None if self.latents is None else self.latents[np.asarray(idx, dtype=int)]
        return Dataset(self.task, [self.samples[i] for i in idx], lat)


# ------------------------------------------------------------------ synthetic tasks

@dataclass(frozen=True)
class ModalityGen:
    """Generator parameters for one modality.

    ``latent_key`` names the latent generator: modalities (in any task) that
    share a key share the mixing matrix, so tasks built on them are learnable
    from shared structure.
    """

    modality_id: str
    dim: int
    rank: int
    length: int | tuple[int, int] = 16
    noise: float = 0.01
    latent_key: str | None = None
    missing_rate: float = 0.0


@dataclass(frozen=True)
class SyntheticTaskParams:
    task_id: str
    modalities: tuple[ModalityGen, ...]
    n_samples: int = 256
    objective: str = "binary"
    n_classes: int = 2
    label_key: str | None = None
    beta: int = 1
    drift: float = 0.5


def _mixing_matrix(seed: int, gen: ModalityGen) -> np.ndarray:
    key = gen.latent_key or gen.modality_id
    rng = stream(seed, "mixing", key, gen.dim, gen.rank)
    return rng.standard_normal((gen.dim, gen.rank)) / np.sqrt(gen.rank)


def make_synthetic_task(params: SyntheticTaskParams, seed: int) -> tuple[TaskSpec, Dataset]:
    """Low-rank latent trajectories plus noise, labelled by a random linear threshold.

    Each sample draws, per modality, a code ``a`` and a drift ``b`` in
    ``R^rank``; at sorted uniform timestamps ``u_t`` the latent is
    ``a + drift * b * u_t`` and the observation is ``A @ latent + noise``.
    Labels are a fixed random linear(-threshold) function of the stacked codes.
    """
    for g in params.modalities:
        if not 1 <= g.rank <= g.dim:
            raise ValueError(f"intrinsic rank {g.rank} must lie in [1, dim={g.dim}] for {g.modality_id!r}")
    spec = TaskSpec(params.task_id, tuple(g.modality_id for g in params.modalities),
                    params.objective, params.n_classes, params.beta)
    mix = {g.modality_id: _mixing_matrix(seed, g) for g in params.modalities}
    rng = stream(seed, "samples", params.task_id)
    n = params.n_samples
    codes = []
    per_sample: list[dict[str, ModalitySequence]] = [dict() for _ in range(n)]
    for g in params.modalities:
        a = rng.standard_normal((n, g.rank))
        b = rng.standard_normal((n, g.rank))
        codes.append(a)
        lo, hi = (g.length, g.length) if isinstance(g.length, int) else g.length
        lengths = rng.integers(lo, hi + 1, size=n)
        missing = rng.random(n) < g.missing_rate
        for i in range(n):
            L = int(lengths[i])
            u = np.sort(rng.random(L))
            lat = a[i] + params.drift * np.outer(u, b[i])
            x = lat @ mix[g.modality_id].T
            if g.noise > 0:
                x = x + g.noise * rng.standard_normal(x.shape)
            per_sample[i][g.modality_id] = ModalitySequence(g.modality_id, x, u)
        for i in np.flatnonzero(missing):
            per_sample[i][g.modality_id] = ModalitySequence.absent(g.modality_id, g.dim)
    # every sample keeps at least one present modality
    for i in range(n):
        if not any(x.present for x in per_sample[i].values()):
            g = params.modalities[0]
            L = g.length if isinstance(g.length, int) else g.length[0]
            u = np.linspace(0.0, 1.0, L)
            lat = codes[0][i] + np.zeros((L, g.rank))
            per_sample[i][g.modality_id] = ModalitySequence(g.modality_id, lat @ mix[g.modality_id].T, u)
    feats = np.concatenate(codes, axis=1)
    lrng = stream(seed, "label-rule", params.label_key or params.task_id)
    k = 1 if params.objective == "binary" else params.n_classes
    w = lrng.standard_normal((feats.shape[1], k))
    scores = feats @ w
    if params.objective == "binary":
        labels = (scores[:, 0] > 0).astype(np.int64)
    elif params.objective == "multiclass":
        labels = np.argmax(scores, axis=1).astype(np.int64)
    else:
        labels = (scores > 0).astype(np.int64)
    samples = [Sample(per_sample[i], labels[i]) for i in range(n)]
    return spec, Dataset(spec, samples, feats)


# ------------------------------------------------------------------ IDX / MNIST

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


def load_idx(path) -> np.ndarray:
    """Read an IDX file: images scaled to [0, 1] as float, labels as int64."""
    raw = Path(path).read_bytes()
    return parse_idx(raw)


def parse_idx(raw: bytes) -> np.ndarray:
    if len(raw) < 4:
        raise DataFormatError("truncated IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise DataFormatError(f"bad IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise DataFormatError("truncated IDX dimension header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:head])
    count = int(np.prod(dims))
    if len(raw) - head < count:
        raise DataFormatError(f"IDX payload has {len(raw) - head} bytes, expected {count}")
    data = np.frombuffer(raw, dtype=np.uint8, count=count, offset=head).reshape(dims)
    if magic == IDX_LABELS:
        return data.astype(np.int64)
    return data.astype(np.float64) / 255.0


def write_idx(path, array: np.ndarray) -> None:
    """Write unsigned-byte IDX: 1-D arrays as labels, 3-D arrays as images."""
    a = np.asarray(array)
    if a.ndim not in (1, 3):
        raise ValueError("IDX writer handles label vectors or image stacks only")
    if a.dtype != np.uint8:
        if np.any(a < 0) or np.any(a > 255):
            raise ValueError("IDX values must fit in unsigned bytes")
        a = a.astype(np.uint8)
    magic = IDX_LABELS if a.ndim == 1 else IDX_IMAGES
    header = struct.pack(">I", magic) + struct.pack(">" + "I" * a.ndim, *a.shape)
    Path(path).write_bytes(header + a.tobytes())


def mnist_task(images_path, labels_path, task_id: str = "mnist", limit: int | None = None,
               classes: Sequence[int] | None = None) -> tuple[TaskSpec, Dataset]:
    """Two-modality task: image rows as a sequence, plus the column-sum sequence.

    ``classes`` restricts to a label subset, relabelled 0..k-1 (binary when k == 2).
    """
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if images.ndim != 3 or labels.ndim != 1 or images.shape[0] != labels.shape[0]:
        raise DataFormatError("image/label files do not match")
    idx = np.arange(images.shape[0])
    if classes is not None:
        idx = idx[np.isin(labels, classes)]
        remap = {c: i for i, c in enumerate(classes)}
        labels = np.array([remap.get(int(v), -1) for v in labels])
    if limit is not None:
        idx = idx[:limit]
    n_cls = len(classes) if classes is not None else 10
    objective = "binary" if n_cls == 2 else "multiclass"
    spec = TaskSpec(task_id, ("rows", "colsum"), objective, n_cls)
    R, C = images.shape[1:]
    samples = []
    for i in idx:
        img = images[i]
        rows = ModalitySequence("rows", img.copy(), np.arange(R, dtype=np.float64))
        col = ModalitySequence("colsum", img.sum(axis=0)[:, None] / R, np.arange(C, dtype=np.float64))
        samples.append(Sample({"rows": rows, "colsum": col}, np.int64(labels[i])))
    return spec, Dataset(spec, samples)


# ------------------------------------------------------------------ batching

def batch_iter(dataset: Dataset, batch_size: int, seed: int, epoch: int = 0) -> Iterator[list[int]]:
    """Index batches in a permutation fixed by ``(seed, epoch)``; the short tail is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    if n == 0:
        return
    order = stream(seed, "batches", dataset.task.task_id, epoch).permutation(n)
    for start in range(0, n, batch_size):
        yield [int(i) for i in order[start:start + batch_size]]


# ------------------------------------------------------------------ continual stream

@dataclass(frozen=True)
class StageSpec:
    tasks: tuple[str, ...]
    rank: int = 4
    epochs: int = 100


@dataclass(frozen=True)
class StreamConfig:
    stages: tuple[StageSpec, ...] = field(default_factory=tuple)

    def __post_init__(self):
        seen: set[str] = set()
        for st in self.stages:
            if st.rank < 1:
                raise ValueError("reserved rank must be >= 1")
            for t in st.tasks:
                if t in seen:
                    raise ValueError(f"task {t!r} appears in more than one stage")
                seen.add(t)
