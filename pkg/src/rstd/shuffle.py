"""Seeded, invertible, uniformly distributed permutations on flat tensor indices.

The random relocation operator applied to a reconstructed kernel is a fixed
permutation of its flat (row-major) index space.  Permutations are built with
the Durstenfeld in-place variant of Fisher-Yates, which produces every
permutation of ``n`` elements with equal probability given a uniform integer
source.

Randomness discipline
---------------------
All randomness flows from explicit 64-bit seeds.  ``permutation_from_seed``
draws from numpy's PCG64 generator (seeded through ``SeedSequence``), so the
same ``(seed, n)`` pair regenerates the same permutation bit-exactly.  Derived
seeds follow two documented rules:

* per-layer permutation seed  = ``root_seed XOR layer_index``
* other derived streams (repetitions, epoch shuffles, layer init) use
  ``mix_seed``, the SplitMix64 finalizer applied to ``seed + GOLDEN * (k+1)``.

File format
-----------
``permutation_to_bytes`` emits: magic ``b"RSPM"``, version as u16
little-endian (currently 1), ``n`` as u64 little-endian, then ``n`` u64
little-endian forward indices.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .tensor import DenseTensor

_MAGIC = b"RSPM"
_VERSION = 1
_HEADER = struct.Struct("<4sHQ")

# SplitMix64 constants (Steele, Lea & Flood's splittable generator finalizer).
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_U64 = (1 << 64) - 1


def mix_seed(seed: int, k: int) -> int:
    """Derive the k-th child seed from ``seed`` (SplitMix64 finalizer)."""
    z = (int(seed) + _GOLDEN * (int(k) + 1)) & _U64
    z = ((z ^ (z >> 30)) * _MIX1) & _U64
    z = ((z ^ (z >> 27)) * _MIX2) & _U64
    return z ^ (z >> 31)


def layer_permutation_seed(root_seed: int, layer_index: int) -> int:
    """Permutation seed for one layer: root XOR layer index."""
    return (int(root_seed) ^ int(layer_index)) & _U64


@dataclass(frozen=True)
class Permutation:
    """A bijection on [0, n) with its inverse and the seed that produced it.

    ``forward[k]`` is the destination of flat index ``k``;
    ``inverse[forward[k]] == k``.  ``seed`` is None for permutations not built
    from a seed (e.g. parsed from a file without provenance).
    """

    forward: np.ndarray
    inverse: np.ndarray
    n: int
    seed: int | None = None

    def __post_init__(self):
        if self.forward.shape != (self.n,) or self.inverse.shape != (self.n,):
            raise ValueError("forward/inverse length must equal n")


def _invert(forward: np.ndarray) -> np.ndarray:
    inverse = np.empty_like(forward)
    inverse[forward] = np.arange(forward.size, dtype=forward.dtype)
    return inverse


def fisher_yates_permutation(n: int, rng, seed: int | None = None) -> Permutation:
    """Durstenfeld construction: for i = n-1 .. 1 swap i with j ~ U[0, i].

    ``rng`` must provide numpy-Generator-style
    ``integers(low, high, endpoint=True)`` draws; each step consumes exactly
    one draw on the inclusive range [0, i].
    """
    if n < 1:
        raise ValueError(f"permutation domain size must be >= 1, got {n}")
    forward = np.arange(n, dtype=np.int64)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i, endpoint=True))
        forward[i], forward[j] = forward[j], forward[i]
    return Permutation(forward=forward, inverse=_invert(forward), n=n, seed=seed)


def permutation_from_seed(n: int, seed: int) -> Permutation:
    """Seeded permutation; same (seed, n) always reproduces the same result."""
    rng = np.random.default_rng(int(seed) & _U64)
    return fisher_yates_permutation(n, rng, seed=int(seed) & _U64)


def identity_permutation(n: int) -> Permutation:
    fwd = np.arange(n, dtype=np.int64)
    return Permutation(forward=fwd, inverse=fwd.copy(), n=n, seed=None)


def apply_shuffle(p: Permutation, t: DenseTensor) -> DenseTensor:
    """Relocate flat element k to flat position ``forward[k]``; shape kept."""
    if p.n != t.size:
        raise ValueError(f"permutation domain {p.n} != tensor element count {t.size}")
    return np.take(t.reshape(-1), p.inverse).reshape(t.shape)


def apply_inverse_shuffle(p: Permutation, t: DenseTensor) -> DenseTensor:
    """Exact inverse of :func:`apply_shuffle`.

    Because a permutation is linear, this is also how upstream gradients are
    routed back through a shuffle.
    """
    if p.n != t.size:
        raise ValueError(f"permutation domain {p.n} != tensor element count {t.size}")
    return np.take(t.reshape(-1), p.forward).reshape(t.shape)


def permutation_to_bytes(p: Permutation) -> bytes:
    header = _HEADER.pack(_MAGIC, _VERSION, p.n)
    return header + p.forward.astype("<u8").tobytes()


def permutation_from_bytes(data: bytes) -> Permutation:
    if len(data) < _HEADER.size:
        raise ValueError(f"truncated permutation header: {len(data)} bytes")
    magic, version, n = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {_MAGIC!r}")
    if version != _VERSION:
        raise ValueError(f"unsupported permutation format version {version}")
    payload = data[_HEADER.size:]
    if len(payload) != 8 * n:
        raise ValueError(f"payload holds {len(payload)} bytes, expected {8 * n}")
    forward = np.frombuffer(payload, dtype="<u8").astype(np.int64)
    if not np.array_equal(np.sort(forward), np.arange(n, dtype=np.int64)):
        raise ValueError("payload is not a bijection on [0, n)")
    return Permutation(forward=forward, inverse=_invert(forward), n=int(n), seed=None)


def save_permutation(path, p: Permutation) -> None:
    with open(path, "wb") as fh:
        fh.write(permutation_to_bytes(p))


def load_permutation(path) -> Permutation:
    with open(path, "rb") as fh:
        return permutation_from_bytes(fh.read())
