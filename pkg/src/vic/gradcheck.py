"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from vic.tensor import Tensor, no_grad


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def numeric_grad(f: Callable[[], Tensor], x: Tensor) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (mutated in place)."""
    flat = x.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            h = 1e-5 * max(1.0, abs(float(orig)))
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(x.shape)


def grad_check_many(f: Callable[[], Tensor], inputs: Sequence[Tensor]) -> float:
    """Max relative error between backprop and finite differences over all ``inputs``.

    ``f`` closes over ``inputs``; each must be float64 with ``requires_grad``.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("gradient checks run in float64")
        t.grad = None
    loss = f()
    loss.backward()
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, _rel_err(analytic, numeric_grad(f, t)))
    return worst


def grad_check(f: Callable[[Tensor], Tensor], point, rel_tol: float | None = None) -> float:
    """Check ``f`` at ``point`` and return the max relative gradient error.

    If ``rel_tol`` is given, an ``AssertionError`` is raised when the error exceeds it.
    """
    x = Tensor(np.asarray(point.data if isinstance(point, Tensor) else point, dtype=np.float64), requires_grad=True)
    err = grad_check_many(lambda: f(x), [x])
    if rel_tol is not None and err >= rel_tol:
        raise AssertionError(f"gradient check failed: max relative error {err:.3e} >= {rel_tol:.1e}")
    return err
