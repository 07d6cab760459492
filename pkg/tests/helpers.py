"""Shared test utilities: central finite differences against the tape."""

from __future__ import annotations

import numpy as np

from flame.numerics import autodiff as ad


def numeric_grad(fn, params, step=1e-5):
    """Central differences of ``fn()`` (a scalar Tensor) w.r.t. each Param's data."""
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            with ad.no_tape():
                up = float(fn().data)
            flat[i] = orig - step
            with ad.no_tape():
                down = float(fn().data)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
        grads.append(g)
    return grads


def rel_error(a, b, floor=1e-7):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def gradcheck(fn, params, step=1e-5):
    """Largest per-parameter relative error between tape and finite-difference gradients."""
    with ad.Tape() as tape:
        loss = fn()
    analytic = ad.backward(tape, loss, params)
    numeric = numeric_grad(fn, params, step)
    return max(rel_error(analytic[p], n) for p, n in zip(params, numeric))


# criterion number -> (passed, detail); printed in the terminal summary by conftest
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)
    print(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
