"""Central finite-difference utilities used to validate analytic backward
passes.  Run these at float64: the probes perturb arrays in place and
re-evaluate a scalar projection of the forward output, which is the
standard trick for checking d(sum(out * proj))/d(x).
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .tensor import Rng


def central_diff(f: Callable[[], float], x: np.ndarray,
                 coords: Iterable[tuple], delta: float = 1e-5) -> np.ndarray:
    """d f / d x[coord] for each coord, by central differences on x in place."""
    out = []
    for idx in coords:
        orig = x[idx]
        x[idx] = orig + delta
        hi = f()
        x[idx] = orig - delta
        lo = f()
        x[idx] = orig
        out.append((hi - lo) / (2.0 * delta))
    return np.array(out, dtype=np.float64)


def all_coords(x: np.ndarray) -> list:
    return list(np.ndindex(*x.shape))


def sample_coords(x: np.ndarray, count: int, seed: int = 0) -> list:
    """Deterministic coordinate subsample for large parameter tensors."""
    coords = all_coords(x)
    if count >= len(coords):
        return coords
    perm = Rng(seed).permutation(len(coords))
    return [coords[int(i)] for i in perm[:count]]


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray,
                  floor: float = 1e-6) -> float:
    """max over coords of |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_grad(f: Callable[[], float], x: np.ndarray, analytic: np.ndarray,
               delta: float = 1e-5, coords: Optional[Sequence[tuple]] = None,
               floor: float = 1e-6) -> float:
    """Max relative error between analytic grad and central differences."""
    if coords is None:
        coords = all_coords(x)
    numeric = central_diff(f, x, coords, delta)
    picked = np.array([analytic[idx] for idx in coords], dtype=np.float64)
    return max_rel_error(picked, numeric, floor)
