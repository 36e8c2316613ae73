"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, precision


def numerical_grad(f: Callable[[], Tensor], x: Tensor, step: float = 1e-5, entries=None) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x.data`` in place one entry at a time.

    ``entries`` (flat indices) restricts the differencing to a subset; other
    entries of the result stay zero.
    """
    g = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    for i in range(flat.size) if entries is None else entries:
        orig = flat[i]
        flat[i] = orig + step
        up = f().data.item()
        flat[i] = orig - step
        down = f().data.item()
        flat[i] = orig
        g.reshape(-1)[i] = (up - down) / (2 * step)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a|| + ||n||, 1e-12): scale-free, robust to near-zero entries."""
    a, n = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a) + np.linalg.norm(n), 1e-12))


def check_gradients(f: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-5,
                    max_entries: int | None = None, rng=None) -> list:
    """Relative error per input between backprop and central differences (64-bit).

    ``f`` must rebuild the scalar loss from the current values of ``inputs``
    on every call.  Inputs must be float64 leaves with ``requires_grad``.
    With ``max_entries``, each input is compared on that many randomly
    chosen entries (drawn from ``rng``) instead of all of them.
    """
    for x in inputs:
        if x.dtype != np.float64:
            raise TypeError("gradient checks run in 64-bit mode; got " + str(x.dtype))
        x.zero_grad()
    with precision("float64"):
        f().backward()
        analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]
        errors = []
        for a, x in zip(analytic, inputs):
            if max_entries is None or x.data.size <= max_entries:
                errors.append(relative_error(a, numerical_grad(f, x, step)))
                continue
            idx = np.random.default_rng(rng).choice(x.data.size, max_entries, replace=False)
            n = numerical_grad(f, x, step, idx).reshape(-1)[idx]
            errors.append(relative_error(a.reshape(-1)[idx], n))
        return errors
