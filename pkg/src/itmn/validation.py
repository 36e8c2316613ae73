"""Input checks shared by the estimator API and the command-line tools."""

from __future__ import annotations

import numbers

import numpy as np

from .synthdata import Dataset, ImagePair


def check_pairs(X, resolution: int | None = None, allow_empty: bool = False) -> list:
    """Return ``X`` as a list of :class:`ImagePair`, validating types and shapes.

    Accepts a :class:`Dataset`, any sequence of image pairs, or a
    ``(visual, thermal)`` tuple of stacked arrays ``[N, H, W, 3]`` and
    ``[N, H, W]`` (uint8), which is wrapped with empty ground truth.
    """
    if isinstance(X, Dataset):
        pairs = list(X.pairs)
    elif isinstance(X, tuple) and len(X) == 2 and all(isinstance(a, np.ndarray) for a in X):
        pairs = _pairs_from_arrays(*X)
    else:
        try:
            pairs = list(X)
        except TypeError as exc:
            raise TypeError(f"expected a sequence of ImagePair, got {type(X).__name__}") from exc
    if not pairs and not allow_empty:
        raise ValueError("no image pairs given")
    for i, p in enumerate(pairs):
        if not isinstance(p, ImagePair):
            raise TypeError(f"element {i} is {type(p).__name__}, not ImagePair")
        if p.visual.dtype != np.uint8 or p.thermal.dtype != np.uint8:
            raise ValueError(f"pair {i}: images must be uint8")
        if p.visual.ndim != 3 or p.visual.shape[2] != 3 or p.thermal.ndim != 2:
            raise ValueError(f"pair {i}: expected visual HxWx3 and thermal HxW, got {p.visual.shape} and {p.thermal.shape}")
        h, w = p.thermal.shape
        if h != w:
            raise ValueError(f"pair {i}: images must be square, got {h}x{w}")
        if resolution is not None and h != resolution:
            raise ValueError(f"pair {i}: resolution {h} does not match the model input size {resolution}")
    return pairs


def _pairs_from_arrays(visual: np.ndarray, thermal: np.ndarray) -> list:
    from .synthdata import SceneParams

    if visual.ndim != 4 or thermal.ndim != 3 or visual.shape[:3] != thermal.shape:
        raise ValueError(f"expected visual [N, H, W, 3] and thermal [N, H, W], got {visual.shape} and {thermal.shape}")
    # Unknown scene parameters: the neutral placeholder only feeds split tags.
    params = SceneParams(seed=0, lam=0.5, tau=0.5, count=0)
    return [ImagePair(v, t, np.zeros((0, 4)), params) for v, t in zip(visual, thermal)]


def check_nonnegative_int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < 0:
        raise ValueError(f"{name} must be a non-negative integer, got {value!r}")
    return int(value)


def check_choice(value, choices, name: str):
    if value not in choices:
        raise ValueError(f"{name} must be one of {list(choices)}, got {value!r}")
    return value
