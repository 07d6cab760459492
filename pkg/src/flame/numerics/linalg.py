"""Dense linear algebra: one-sided Jacobi SVD and cyclic Jacobi eigensolver.

Both solvers use the round-robin (tournament) pair ordering so that each round
applies ``n // 2`` disjoint plane rotations as a single vectorized update.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class NumericInputError(ValueError):
    """Input matrix is non-finite, asymmetric or otherwise unusable."""


@dataclass(frozen=True)
class SvdFactors:
    u: np.ndarray      # (rows, r), orthonormal columns
    sigma: np.ndarray  # (r,), nonincreasing
    vt: np.ndarray     # (r, cols), orthonormal rows

    @property
    def rank(self) -> int:
        return int(self.sigma.shape[0])

    def expand(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.vt

    def stored_scalars(self) -> int:
        p, r = self.u.shape
        return r * (p + self.vt.shape[1] + 1)


@dataclass(frozen=True)
class EigenFactors:
    values: np.ndarray   # (d,), nonincreasing
    vectors: np.ndarray  # (d, d), column j pairs with values[j]


def as_matrix(w) -> np.ndarray:
    a = np.asarray(w, dtype=np.float64)
    if a.ndim != 2:
        raise NumericInputError(f"expected a 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericInputError("matrix has non-finite entries")
    return a


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pairings covering every (i, j), i < j, once over ``n - 1`` rounds (n even)."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        p = np.array(players[: n // 2])
        q = np.array(players[n // 2:][::-1])
        lo, hi = np.minimum(p, q), np.maximum(p, q)
        rounds.append((lo, hi))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _complete_basis(u: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace columns not in ``keep`` with an orthonormal completion (modified Gram-Schmidt)."""
    m, k = u.shape
    out = u.copy()
    basis = [out[:, j] for j in range(k) if keep[j]]
    candidates = iter(np.eye(m))
    for j in range(k):
        if keep[j]:
            continue
        for e in candidates:
            v = e.copy()
            for _ in range(2):
                for b in basis:
                    v -= (b @ v) * b
            nv = np.linalg.norm(v)
            if nv > 1e-8:
                v /= nv
                out[:, j] = v
                basis.append(v)
                break
    return out


def _jacobi_svd_tall(a: np.ndarray, tol: float, max_sweeps: int):
    m, n = a.shape
    n_even = n + (n % 2)
    work = np.zeros((m, n_even))
    work[:, :n] = a
    v = np.eye(n_even)
    rounds = _round_robin(n_even)
    for _ in range(max_sweeps):
        rotated = False
        for p, q in rounds:
            up, uq = work[:, p], work[:, q]
            alpha = np.einsum("ij,ij->j", up, up)
            beta = np.einsum("ij,ij->j", uq, uq)
            gamma = np.einsum("ij,ij->j", up, uq)
            scale = np.sqrt(alpha * beta)
            act = np.abs(gamma) > tol * scale
            if not act.any():
                continue
            rotated = True
            g = np.where(act, gamma, 1.0)
            with np.errstate(over="ignore"):  # huge zeta means a vanishing rotation, t -> 0
                zeta = (beta - alpha) / (2.0 * g)
                t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c = np.where(act, c, 1.0)
            s = np.where(act, s, 0.0)
            work[:, p], work[:, q] = c * up - s * uq, s * up + c * uq
            vp, vq = v[:, p], v[:, q]
            v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            break
    work, v = work[:, :n], v[:n, :n]
    sigma = np.linalg.norm(work, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    work, v = work[:, order], v[:, order]
    keep = sigma > sigma[0] * 1e-13 if n and sigma[0] > 0 else np.zeros(n, dtype=bool)
    u = np.zeros_like(work)
    u[:, keep] = work[:, keep] / sigma[keep]
    sigma = np.where(keep, sigma, 0.0)
    if not keep.all():
        u = _complete_basis(u, keep)
    return u, sigma, v.T


def svd(w, tol: float = 1e-15, max_sweeps: int = 80) -> SvdFactors:
    """Thin SVD ``w = U diag(sigma) Vt`` with ``min(rows, cols)`` triplets."""
    a = as_matrix(w)
    if a.shape[0] >= a.shape[1]:
        u, s, vt = _jacobi_svd_tall(a, tol, max_sweeps)
        return SvdFactors(u, s, vt)
    u, s, vt = _jacobi_svd_tall(a.T, tol, max_sweeps)
    return SvdFactors(vt.T, s, u.T)


def truncated_svd(w, r: int) -> SvdFactors:
    """Top-``r`` singular triplets of ``w``."""
    a = as_matrix(w)
    if not 1 <= r <= min(a.shape):
        raise ValueError(f"rank r={r} outside [1, {min(a.shape)}]")
    f = svd(a)
    return SvdFactors(f.u[:, :r].copy(), f.sigma[:r].copy(), f.vt[:r].copy())


def sym_eig(c, sym_tol: float = 1e-9, tol: float = 1e-15, max_sweeps: int = 80) -> EigenFactors:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Eigenvalues are returned in nonincreasing order; values in ``(-1e-9, 0)``
    are clamped to zero.
    """
    a = as_matrix(c)
    d = a.shape[0]
    if a.shape[1] != d:
        raise NumericInputError(f"expected a square matrix, got {a.shape}")
    if d and np.max(np.abs(a - a.T)) > sym_tol * max(1.0, np.max(np.abs(a))):
        raise NumericInputError("matrix is not symmetric within tolerance")
    a = 0.5 * (a + a.T)
    n = d + (d % 2)
    work = np.zeros((n, n))
    work[:d, :d] = a
    vec = np.eye(n)
    rounds = _round_robin(n) if n > 1 else []
    for _ in range(max_sweeps):
        diag = np.abs(np.diag(work))
        rotated = False
        for p, q in rounds:
            apq = work[p, q]
            thresh = tol * np.sqrt(diag[p] * diag[q])
            act = (np.abs(apq) > thresh) & (apq != 0)
            if not act.any():
                continue
            rotated = True
            g = np.where(act, apq, 1.0)
            with np.errstate(over="ignore"):
                tau = (work[q, q] - work[p, p]) / (2.0 * g)
                t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau) + np.sqrt(1.0 + tau * tau))
            cth = 1.0 / np.sqrt(1.0 + t * t)
            sth = cth * t
            cth = np.where(act, cth, 1.0)
            sth = np.where(act, sth, 0.0)
            cp, cq = work[:, p].copy(), work[:, q].copy()
            work[:, p], work[:, q] = cth * cp - sth * cq, sth * cp + cth * cq
            rp, rq = work[p, :].copy(), work[q, :].copy()
            work[p, :] = cth[:, None] * rp - sth[:, None] * rq
            work[q, :] = sth[:, None] * rp + cth[:, None] * rq
            work[p, q] = 0.0
            work[q, p] = 0.0
            vp, vq = vec[:, p].copy(), vec[:, q].copy()
            vec[:, p], vec[:, q] = cth * vp - sth * vq, sth * vp + cth * vq
            diag = np.abs(np.diag(work))
        if not rotated:
            break
    values = np.diag(work)[:d].copy()
    vec = vec[:d, :d]
    order = np.argsort(-values, kind="stable")
    values, vec = values[order], vec[:, order]
    values[(values < 0) & (values > -1e-9)] = 0.0
    return EigenFactors(values, vec)


def op_norm(w) -> float:
    a = as_matrix(w)
    if a.size == 0:
        return 0.0
    return float(svd(a).sigma[0])


def projector_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Spectral-norm distance between orthogonal projectors onto span(a) and span(b)."""
    pa = a @ a.T
    pb = b @ b.T
    return op_norm(pa - pb)
