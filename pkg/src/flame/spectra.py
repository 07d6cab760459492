"""Functional-energy diagnostics for expert weights under their routed-input covariance."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import Dataset
from .numerics.autodiff import no_tape
from .numerics.linalg import as_matrix, op_norm, projector_distance, svd, sym_eig, truncated_svd
from .numerics.rng import stream

SUBLAYERS = ("conv", "mlp1", "mlp2")
LENSES = ("input", "weight", "data_aware")


class HypothesisFailed(ValueError):
    """The covariance does not have the claimed effective rank; the bound is not applicable."""


class EmptyDispatch(LookupError):
    """The router never sent any token to this expert."""


class UndefinedRatio(ArithmeticError):
    """A ratio whose denominator (functional energy) is zero."""


class StepSizeError(ValueError):
    """Explicit Euler step too large for stable gradient descent."""


class IdentityViolation(ArithmeticError):
    """The two energy decompositions disagree beyond tolerance."""


# ------------------------------------------------------------------ covariance

def second_moment(tokens) -> np.ndarray:
    """``mean_t z_t z_t^T`` over the rows of ``tokens``."""
    z = as_matrix(tokens)
    if z.shape[0] == 0:
        raise EmptyDispatch("no tokens to average")
    c = z.T @ z / z.shape[0]
    return 0.5 * (c + c.T)


def routed_inputs(model, datasets: Sequence[Dataset], cursor: int | None = None,
                  batch_size: int = 64) -> dict[tuple[int, str], np.ndarray]:
    """Immediate input tokens of every expert sublayer, restricted to dispatched samples.

    Keys are ``(expert index, sublayer)``; each value stacks one row per token.
    Experts that received nothing are absent from the result.
    """
    trace: dict = {}
    with no_tape():
        for ds in datasets:
            for start in range(0, len(ds), batch_size):
                model.forward(ds.samples[start:start + batch_size], ds.task.task_id, cursor, trace=trace)
    return {k: np.concatenate(v, axis=0) for k, v in trace.items()}


def routed_covariance(model, datasets: Sequence[Dataset], expert_id: int, cursor: int | None = None,
                      sublayer: str = "conv") -> np.ndarray:
    if sublayer not in SUBLAYERS:
        raise ValueError(f"unknown sublayer {sublayer!r}")
    if not datasets or all(len(ds) == 0 for ds in datasets):
        raise ValueError("covariance needs data")
    tokens = routed_inputs(model, datasets, cursor).get((expert_id, sublayer))
    if tokens is None:
        raise EmptyDispatch(f"expert {expert_id} was never selected")
    return second_moment(tokens)


# ------------------------------------------------------------------ energy decompositions

@dataclass
class EnergySpectrum:
    weight_sq: np.ndarray     # sigma_k^2, nonincreasing
    input_eigs: np.ndarray    # lambda_j, nonincreasing
    data_aware: np.ndarray    # E_k = sigma_k^2 v_k^T C v_k, in weight-SVD order
    input_energy: np.ndarray  # lambda_j ||W q_j||^2, in eigen order
    total: float              # tr(W C W^T)

    def lens(self, name: str) -> np.ndarray:
        return {"input": self.input_eigs, "weight": self.weight_sq, "data_aware": self.data_aware}[name]


def _check_pair(w, c) -> tuple[np.ndarray, np.ndarray]:
    w, c = as_matrix(w), as_matrix(c)
    if c.shape != (w.shape[1], w.shape[1]):
        raise ValueError(f"covariance shape {c.shape} does not match weight columns {w.shape[1]}")
    return w, c


def energy_spectrum(w, c, rtol: float = 1e-6) -> EnergySpectrum:
    """Both decompositions of ``tr(W C W^T)``; raises if they disagree beyond ``rtol``."""
    w, c = _check_pair(w, c)
    f = svd(w)
    eig = sym_eig(c)
    cv = f.vt @ c
    data_aware = f.sigma ** 2 * np.einsum("kj,kj->k", cv, f.vt)
    wq = w @ eig.vectors
    input_energy = eig.values * np.sum(wq * wq, axis=0)
    e_weight, e_input = float(data_aware.sum()), float(input_energy.sum())
    scale = max(abs(e_weight), abs(e_input))
    if scale > 0 and abs(e_weight - e_input) > rtol * scale:
        raise IdentityViolation(f"energy decompositions disagree: {e_weight!r} vs {e_input!r}")
    return EnergySpectrum(f.sigma ** 2, eig.values, data_aware, input_energy, e_weight)


def cumulative(energies, descending: bool = True) -> np.ndarray | None:
    """Cumulative fractions of ``energies`` (top-first when ``descending``); None when the total is 0."""
    e = np.asarray(energies, dtype=np.float64)
    e = np.clip(e, 0.0, None)
    if descending:
        e = np.sort(e)[::-1]
    total = e.sum()
    if total <= 0:
        return None
    cum = np.minimum(np.cumsum(e) / total, 1.0)
    cum[-1] = 1.0
    return np.maximum.accumulate(cum)


def rank_at(cum: np.ndarray | None, fraction: float) -> int | None:
    if cum is None:
        return None
    return int(np.searchsorted(cum, fraction - 1e-12) + 1)


# ------------------------------------------------------------------ tail bound

def covariance_tail(c, r_star: int) -> float:
    lam = sym_eig(as_matrix(c)).values
    return float(np.clip(lam[r_star:], 0.0, None).sum())


def tail_bound_check(w, c, r_star: int, epsilon: float) -> float:
    """Margin ``eps * ||W||_op^2 * tr(C) - sum_{j > r*} lambda_j ||W q_j||^2``.

    The eigen-tail hypothesis is checked first and reported separately as
    :class:`HypothesisFailed`.
    """
    w, c = _check_pair(w, c)
    if not 0 <= r_star <= c.shape[0]:
        raise ValueError(f"r_star={r_star} outside [0, {c.shape[0]}]")
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    eig = sym_eig(c)
    lam = np.clip(eig.values, 0.0, None)
    tr = float(lam.sum())
    tail = float(lam[r_star:].sum())
    if tail > epsilon * tr + 1e-12 * max(tr, 1.0):
        raise HypothesisFailed(f"eigen tail {tail!r} exceeds epsilon * tr(C) = {epsilon * tr!r}")
    wq = w @ eig.vectors[:, r_star:]
    lhs = float(np.sum(lam[r_star:] * np.sum(wq * wq, axis=0)))
    rhs = epsilon * op_norm(w) ** 2 * tr
    return rhs - lhs


# ------------------------------------------------------------------ gradient-flow alignment

def flow_closed_form(w_star, c, t: float) -> np.ndarray:
    """``W*(I - exp(-C t))`` with the exponential taken in C's eigenbasis."""
    w_star, c = _check_pair(w_star, c)
    eig = sym_eig(c)
    q = eig.vectors
    decay = np.exp(-eig.values * t)
    return w_star @ (np.eye(c.shape[0]) - (q * decay) @ q.T)


@dataclass
class FlowResult:
    times: np.ndarray
    errors: np.ndarray              # ||W_sim(t) - closed form(t)||_F
    simulated: list[np.ndarray]
    alignment: float | None = None  # worst right-singular-vector / eigenvector projector distance at the last time
    subspace_errors: np.ndarray | None = None
    subspace_bounds: np.ndarray | None = None


def alignment_distance(w, c) -> float:
    """Worst, over W's right singular vectors, of the distance to the nearest eigenvector projector of C."""
    f = svd(as_matrix(w))
    q = sym_eig(as_matrix(c)).vectors
    worst = 0.0
    for v in f.vt:
        best = min(projector_distance(v[:, None], q[:, [j]]) for j in range(q.shape[1]))
        worst = max(worst, best)
    return worst


def alignment_flow(w_star, c, times: Sequence[float], eta: float = 1e-3, top: int | None = None) -> FlowResult:
    """Zero-init explicit-Euler gradient descent on ``0.5 tr((W - W*) C (W - W*)^T)``.

    Each interval between requested times is split into equal steps no longer
    than ``eta``. ``top`` (optional) also reports the error restricted to C's
    leading ``top`` eigenvectors against ``exp(-2 lambda_top t) ||W*||_F^2``.
    """
    w_star, c = _check_pair(w_star, c)
    lam1 = float(sym_eig(c).values[0]) if c.size else 0.0
    if eta <= 0 or (lam1 > 0 and eta >= 1.0 / lam1):
        raise StepSizeError(f"step {eta} must be positive and below 1/lambda_1 = {1.0 / lam1 if lam1 else math.inf}")
    ts = np.asarray(times, dtype=np.float64)
    if np.any(ts < 0) or np.any(np.diff(ts) < 0):
        raise ValueError("times must be non-negative and nondecreasing")
    w = np.zeros_like(w_star)
    now = 0.0
    sims, errs = [], []
    for t in ts:
        gap = t - now
        if gap > 0:
            n = int(math.ceil(gap / eta - 1e-9))
            h = gap / n
            for _ in range(n):
                w = w - h * ((w - w_star) @ c)
        now = t
        sims.append(w.copy())
        errs.append(float(np.linalg.norm(w - flow_closed_form(w_star, c, t))))
    result = FlowResult(ts, np.array(errs), sims)
    if sims:
        result.alignment = alignment_distance(sims[-1], c)
    if top is not None:
        eig = sym_eig(c)
        qj = eig.vectors[:, :top]
        lam_j = eig.values[top - 1]
        norm2 = float(np.sum(w_star * w_star))
        result.subspace_errors = np.array([float(np.sum(((s - w_star) @ qj) ** 2)) for s in sims])
        result.subspace_bounds = np.exp(-2.0 * lam_j * ts) * norm2
    return result


# ------------------------------------------------------------------ truncation

@dataclass
class TruncationResult:
    error: float
    bound: float
    epsilon: float

    @property
    def holds(self) -> bool:
        return self.error <= self.bound + 1e-12 * max(1.0, self.bound)


def truncation_residual(w, k_rank: int) -> np.ndarray:
    w = as_matrix(w)
    if k_rank >= min(w.shape):
        return np.zeros_like(w)
    if k_rank <= 0:
        return w.copy()
    return w - truncated_svd(w, k_rank).expand()


def truncation_error(w, k_rank: int, c, epsilon: float | None = None) -> TruncationResult:
    """Functional error ``tr(R C R^T)`` of dropping W's singular directions beyond ``k_rank``.

    The bound is ``eps ||W||_op^2 tr(C)``; ``eps`` defaults to C's relative
    eigen-tail beyond ``k_rank``.
    """
    w, c = _check_pair(w, c)
    r = truncation_residual(w, k_rank)
    err = float(np.trace(r @ c @ r.T))
    lam = np.clip(sym_eig(c).values, 0.0, None)
    tr = float(lam.sum())
    if epsilon is None:
        epsilon = float(lam[k_rank:].sum() / tr) if tr > 0 else 0.0
    return TruncationResult(max(err, 0.0), epsilon * op_norm(w) ** 2 * tr, epsilon)


# ------------------------------------------------------------------ sample complexity

def gaussian_sampler(c) -> Callable[[np.random.Generator, int], np.ndarray]:
    """Mean-zero Gaussian tokens with covariance ``c``."""
    eig = sym_eig(as_matrix(c))
    root = eig.vectors * np.sqrt(np.clip(eig.values, 0.0, None))

    def draw(rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.standard_normal((n, root.shape[1])) @ root.T

    return draw


@dataclass
class SampleComplexity:
    n_grid: np.ndarray
    mean_errors: np.ndarray
    slope: float | None     # None when the population value is exactly zero
    population: float
    errors: np.ndarray      # (len(n_grid), trials)

    @property
    def trivial(self) -> bool:
        return self.slope is None


def sample_complexity_curve(w, k_rank: int, c, n_grid: Sequence[int], trials: int, seed: int = 0,
                            sampler: Callable[[np.random.Generator, int], np.ndarray] | None = None
                            ) -> SampleComplexity:
    """Monte-Carlo ``|T_hat_n - T|`` for the truncation error ``T`` and its log-log slope in ``n``."""
    w, c = _check_pair(w, c)
    r = truncation_residual(w, k_rank)
    pop = float(np.trace(r @ c @ r.T))
    draw = sampler or gaussian_sampler(c)
    grid = np.asarray(n_grid, dtype=np.int64)
    errs = np.zeros((grid.size, trials))
    for i, n in enumerate(grid):
        for k in range(trials):
            z = draw(stream(seed, "sample-complexity", int(n), k), int(n))
            rz = z @ r.T
            errs[i, k] = abs(float(np.mean(np.sum(rz * rz, axis=1))) - pop)
    means = errs.mean(axis=1)
    if pop == 0.0 and not np.any(means):
        return SampleComplexity(grid, means, None, pop, errs)
    slope = float(np.polyfit(np.log(grid), np.log(means), 1)[0])
    return SampleComplexity(grid, means, slope, pop, errs)


# ------------------------------------------------------------------ misalignment

def kappa_misalignment(w, c) -> float:
    """``||W||_op^2 tr(C) / tr(W C W^T)``."""
    w, c = _check_pair(w, c)
    energy = float(np.trace(w @ c @ w.T))
    scale = op_norm(w) ** 2 * float(np.trace(c))
    if energy <= 1e-14 * max(scale, 1e-300) or energy <= 0:
        raise UndefinedRatio("functional energy is zero")
    return scale / energy


# ------------------------------------------------------------------ model report

@dataclass
class SpectralReport:
    expert: int
    sublayer: str
    spectrum: EnergySpectrum | None                 # None when never dispatched
    curves: dict[str, np.ndarray | None] = field(default_factory=dict)
    rank90: dict[str, int | None] = field(default_factory=dict)
    rank99: dict[str, int | None] = field(default_factory=dict)
    tail_margin: float | None = None
    kappa: float | None = None

    @property
    def dispatched(self) -> bool:
        return self.spectrum is not None


def sublayer_report(expert: int, sublayer: str, w: np.ndarray, c: np.ndarray | None) -> SpectralReport:
    if c is None:
        return SpectralReport(expert, sublayer, None)
    spec = energy_spectrum(w, c)
    rep = SpectralReport(expert, sublayer, spec)
    for lens in LENSES:
        cum = cumulative(spec.lens(lens))
        rep.curves[lens] = cum
        rep.rank90[lens] = rank_at(cum, 0.90)
        rep.rank99[lens] = rank_at(cum, 0.99)
    r_star = rep.rank90["input"]
    if r_star is not None:
        lam = np.clip(spec.input_eigs, 0.0, None)
        eps = float(lam[r_star:].sum() / lam.sum())
        rep.tail_margin = tail_bound_check(w, c, r_star, eps)
    try:
        rep.kappa = kappa_misalignment(w, c)
    except UndefinedRatio:
        rep.kappa = None
    return rep


def spectral_report(model, datasets: Sequence[Dataset], cursor: int | None = None,
                    sublayers: Sequence[str] = SUBLAYERS) -> list[SpectralReport]:
    """Three-lens spectra for every expert sublayer under its own routed inputs."""
    tokens = routed_inputs(model, datasets, cursor)
    tau = cursor if cursor is not None else min(model.cursor[ds.task.task_id] for ds in datasets)
    reports = []
    for e in model.experts:
        for name in sublayers:
            sw = getattr(e, name)
            z = tokens.get((e.index, name))
            c = None if z is None else second_moment(z)
            reports.append(sublayer_report(e.index, name, sw.effective_weight(tau), c))
    return reports


SPECTRAL_COLUMNS = ("expert", "sublayer", "lens", "rank", "energy", "cumulative_fraction",
                    "rank_at_90", "rank_at_99", "tail_margin", "kappa", "status")


def report_rows(reports: Sequence[SpectralReport]) -> list[dict]:
    """Per-rank rows (sorted top-first within each lens) followed by one summary row per lens."""
    rows = []
    for rep in reports:
        base = {"expert": rep.expert, "sublayer": rep.sublayer}
        if rep.spectrum is None:
            rows.append({**base, "lens": "", "status": "empty_dispatch"})
            continue
        for lens in LENSES:
            e = np.sort(np.clip(rep.spectrum.lens(lens), 0.0, None))[::-1]
            cum = rep.curves[lens]
            status = "ok" if cum is not None else "zero_energy"
            for k, val in enumerate(e, start=1):
                rows.append({**base, "lens": lens, "rank": k, "energy": float(val),
                             "cumulative_fraction": None if cum is None else float(cum[k - 1]), "status": status})
        for lens in LENSES:
            rows.append({**base, "lens": lens, "rank": "summary", "energy": float(rep.spectrum.lens(lens).sum()),
                         "rank_at_90": rep.rank90[lens], "rank_at_99": rep.rank99[lens],
                         "tail_margin": rep.tail_margin, "kappa": rep.kappa,
                         "status": "ok" if rep.curves[lens] is not None else "zero_energy"})
    return rows
