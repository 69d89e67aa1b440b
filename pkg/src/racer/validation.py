"""Input validation helpers shared by the estimator-facing code."""

from __future__ import annotations

import numbers

import numpy as np


def check_alpha(alpha) -> float:
    """Return ``alpha`` as a float, raising ``ValueError`` unless 0 <= alpha < 1."""
    if isinstance(alpha, bool) or not isinstance(alpha, numbers.Real):
        raise TypeError(f"alpha must be a real number, got {type(alpha).__name__}")
    alpha = float(alpha)
    if not (0.0 <= alpha < 1.0):
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")
    return alpha


def check_finite(x, name: str = "array") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_probs(probs, atol: float = 1e-9) -> np.ndarray:
    """Validate a probability vector along its last axis."""
    p = check_finite(probs, "probs")
    if p.ndim < 1 or p.shape[-1] == 0:
        raise ValueError("probs must be a non-empty vector")
    if np.any(p < 0.0):
        raise ValueError("probs must be nonnegative")
    total = p.sum(axis=-1)
    if np.any(np.abs(total - 1.0) > atol):
        raise ValueError(f"probs must sum to 1 (got {total})")
    return p


def check_atoms(atoms) -> np.ndarray:
    z = check_finite(atoms, "atoms")
    if z.ndim != 1 or z.size == 0:
        raise ValueError("atoms must be a non-empty 1-D array")
    if np.any(np.diff(z) <= 0.0):
        raise ValueError("atoms must be strictly increasing")
    return z


def check_vector(x, dim: int, name: str = "x") -> np.ndarray:
    arr = check_finite(x, name)
    if arr.shape[-1] != dim:
        raise ValueError(f"{name} has trailing dimension {arr.shape[-1]}, expected {dim}")
    return arr


def check_random_state(seed) -> np.random.Generator:
    """Turn ``seed`` into a ``numpy.random.Generator``."""
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None or isinstance(seed, (numbers.Integral, np.random.SeedSequence)):
        return np.random.default_rng(seed)
    raise TypeError(f"cannot build a Generator from {seed!r}")
