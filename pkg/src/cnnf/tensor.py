"""Dense 4-D tensors and the deterministic random source behind them.

Activations, gradients and image batches all live in one canonical memory
layout: a C-contiguous numpy array of shape (n, h, w, c) -- batch
outermost, then rows, columns, channels.  Element (i, y, x, k) therefore
sits at flat offset ((i*h + y)*w + x)*c + k.  float32 is the working
precision; gradient-check paths run the same code at float64.  Arrays are
treated as immutable once they cross a module boundary.

All randomness comes from a counter-based SplitMix64 stream.  The
algorithm is pinned here so random artifacts are reproducible across
platforms and can be regenerated independently:

    raw_i = mix64(seed + (i + 1) * 0x9E3779B97F4A7C15)      i = 0, 1, ...

    mix64(z): z ^= z >> 30;  z *= 0xBF58476D1CE4E5B9
              z ^= z >> 27;  z *= 0x94D049BB133111EB
              z ^= z >> 31                     (all arithmetic mod 2**64)

    uniform_i in [0, 1)   = (raw_i >> 11) * 2**-53
    normal pairs (z0, z1) = Box-Muller over consecutive raws:
        u1 = ((raw_{2j} >> 11) + 1) * 2**-53       in (0, 1]
        u2 = (raw_{2j+1} >> 11) * 2**-53           in [0, 1)
        r  = sqrt(-2 ln u1)
        z0 = r cos(2 pi u2),  z1 = r sin(2 pi u2)
    shuffle: Fisher-Yates from the top, j = raw % (i + 1)

Substreams are derived as mix64(seed ^ fnv1a64(label)) where fnv1a64 is
the 64-bit FNV-1a hash of the UTF-8 label; see derive_seed.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from .errors import InvalidArgumentError, ShapeError

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3

# fill_gaussian works in blocks of this many elements to bound the
# transient float64 buffers when initializing the large fc weights.
_CHUNK = 1 << 20

MAX_ELEMENTS = 1 << 48


class Shape4(NamedTuple):
    """Shape of a 4-D tensor: batch, height, width, channels."""

    n: int
    h: int
    w: int
    c: int

    def count(self) -> int:
        return self.n * self.h * self.w * self.c


def _check_shape(shape: Shape4) -> Shape4:
    shape = Shape4(*(int(d) for d in shape))
    if min(shape) < 1:
        raise ShapeError(f"all dims must be >= 1, got {tuple(shape)}")
    if shape.count() > MAX_ELEMENTS:
        raise ShapeError(f"element count {shape.count()} overflows the supported range")
    return shape


def zeros(shape: Shape4, dtype=np.float32) -> np.ndarray:
    """All-zero tensor of the given shape."""
    shape = _check_shape(shape)
    return np.zeros(tuple(shape), dtype=dtype)


def reshape(t: np.ndarray, shape: Shape4) -> np.ndarray:
    """Reinterpret the flat buffer under a new shape; no element moves."""
    shape = _check_shape(shape)
    if t.size != shape.count():
        raise ShapeError(f"cannot reshape {t.size} elements into {tuple(shape)}")
    return np.ascontiguousarray(t).reshape(tuple(shape))


def _mix64(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(30))
    z = z * np.uint64(0xBF58476D1CE4E5B9)
    z = z ^ (z >> np.uint64(27))
    z = z * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _mix64_int(z: int) -> int:
    z &= _MASK64
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & _MASK64
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def derive_seed(seed: int, label: str) -> int:
    """Independent substream seed for (seed, label); fixed across runs."""
    h = _FNV_OFFSET
    for b in label.encode("utf-8"):
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return _mix64_int((int(seed) & _MASK64) ^ h)


class Rng:
    """Counter-based SplitMix64 stream (algorithm in the module docstring)."""

    def __init__(self, seed: int):
        self._seed = int(seed) & _MASK64
        self._counter = 0

    def raw(self, count: int) -> np.ndarray:
        """Next `count` raw 64-bit outputs (in-place ops: this path is hot)."""
        z = np.arange(self._counter + 1, self._counter + count + 1, dtype=np.uint64)
        self._counter += count
        with np.errstate(over="ignore"):
            z *= np.uint64(_GAMMA)
            z += np.uint64(self._seed)
            tmp = z >> np.uint64(30)
            z ^= tmp
            z *= np.uint64(0xBF58476D1CE4E5B9)
            np.right_shift(z, np.uint64(27), out=tmp)
            z ^= tmp
            z *= np.uint64(0x94D049BB133111EB)
            np.right_shift(z, np.uint64(31), out=tmp)
            z ^= tmp
        return z

    def uniforms(self, count: int) -> np.ndarray:
        """float64 samples in [0, 1)."""
        u = (self.raw(count) >> np.uint64(11)).astype(np.float64)
        u *= 2.0**-53
        return u

    def normals(self, count: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """float64 normal samples via Box-Muller on consecutive raw pairs."""
        pairs = (count + 1) // 2
        u = (self.raw(2 * pairs) >> np.uint64(11)).astype(np.float64)
        u *= 2.0**-53
        r = u[0::2] + 2.0**-53  # in (0, 1]
        np.log(r, out=r)
        r *= -2.0
        np.sqrt(r, out=r)
        theta = u[1::2] * (2.0 * math.pi)
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = np.cos(theta) * r
        out[1::2] = np.sin(theta, out=theta) * r
        if std != 1.0:
            out *= std
        if mean != 0.0:
            out += mean
        return out[:count]

    def randint_below(self, bound: int) -> int:
        """One integer in [0, bound) via modulo draw (bound << 2**64)."""
        if bound <= 0:
            raise InvalidArgumentError("bound must be positive")
        return int(self.raw(1)[0] % np.uint64(bound))

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        perm = np.arange(n, dtype=np.int64)
        if n > 1:
            draws = self.raw(n - 1)
            for i in range(n - 1, 0, -1):
                j = int(draws[n - 1 - i] % np.uint64(i + 1))
                perm[i], perm[j] = perm[j], perm[i]
        return perm


def gaussian_array(shape: tuple, mean: float, variance: float, seed: int,
                   dtype=np.float32) -> np.ndarray:
    """Seeded i.i.d. normal array of arbitrary shape (helper for fill_gaussian)."""
    if variance < 0:
        raise InvalidArgumentError(f"variance must be >= 0, got {variance}")
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    if variance == 0:
        return np.full(shape, mean, dtype=dtype)
    std = math.sqrt(variance)
    rng = Rng(seed)
    out = np.empty(count, dtype=dtype)
    for start in range(0, count, _CHUNK):
        stop = min(start + _CHUNK, count)
        out[start:stop] = rng.normals(stop - start, mean, std)
    return out.reshape(shape)


def fill_gaussian(shape: Shape4, mean: float, variance: float, seed: int,
                  dtype=np.float32) -> np.ndarray:
    """Tensor of i.i.d. N(mean, variance) samples; same seed, same bits."""
    shape = _check_shape(shape)
    return gaussian_array(tuple(shape), mean, variance, seed, dtype)
