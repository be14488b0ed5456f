"""Dense N-dimensional tensors and the contraction primitives shared by all layers.

A tensor here is a plain C-order (row-major) numpy array treated as an
immutable value: every operation returns a fresh array and never writes to its
inputs.  Two dtype classes are supported, ``float32`` (the training default)
and ``float64`` (used by the numerical oracles in the test suite).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

# Type alias used throughout the package; a DenseTensor is a C-contiguous
# real-valued ndarray.
DenseTensor = np.ndarray

FLOAT_DTYPES = (np.float32, np.float64)


def tensor_new(shape: Sequence[int], data: Sequence[float], dtype=np.float64) -> DenseTensor:
    """Build a tensor from a shape and a flat row-major value list.

    Raises ValueError if ``len(data)`` does not equal the product of ``shape``
    or any dimension is < 1.
    """
    shape = tuple(int(d) for d in shape)
    if len(shape) == 0:
        raise ValueError("tensor must have at least one mode")
    if any(d < 1 for d in shape):
        raise ValueError(f"all mode dimensions must be >= 1, got {shape}")
    if np.dtype(dtype) not in (np.dtype(d) for d in FLOAT_DTYPES):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    flat = np.asarray(data, dtype=dtype).reshape(-1)
    expected = int(np.prod(shape))
    if flat.size != expected:
        raise ValueError(
            f"data length {flat.size} does not match product of shape {shape} = {expected}"
        )
    return flat.reshape(shape).copy()


def permute_modes(t: DenseTensor, perm: Sequence[int]) -> DenseTensor:
    """Reorder tensor modes: output mode k is input mode ``perm[k]``."""
    perm = tuple(int(p) for p in perm)
    if sorted(perm) != list(range(t.ndim)):
        raise ValueError(f"perm {perm} is not a bijection on 0..{t.ndim - 1}")
    return np.ascontiguousarray(np.transpose(t, perm))


def contract(
    a: DenseTensor,
    b: DenseTensor,
    modes_a: Sequence[int],
    modes_b: Sequence[int],
) -> DenseTensor:
    """Contract ``a`` and ``b`` over the paired mode lists.

    Output modes are the free modes of ``a`` in order, followed by the free
    modes of ``b`` in order.  Contracting every mode yields a 0-d array.
    """
    modes_a = tuple(int(m) for m in modes_a)
    modes_b = tuple(int(m) for m in modes_b)
    if len(modes_a) != len(modes_b):
        raise ValueError(
            f"mode lists differ in length: {len(modes_a)} vs {len(modes_b)}"
        )
    if len(set(modes_a)) != len(modes_a) or len(set(modes_b)) != len(modes_b):
        raise ValueError("contraction mode lists must not repeat modes")
    for ma, mb in zip(modes_a, modes_b):
        if not (0 <= ma < a.ndim and 0 <= mb < b.ndim):
            raise ValueError(f"mode pair ({ma}, {mb}) out of range for orders "
                             f"({a.ndim}, {b.ndim})")
        if a.shape[ma] != b.shape[mb]:
            raise ValueError(
                f"dimension mismatch on contracted pair: mode {ma} of a has dim "
                f"{a.shape[ma]} but mode {mb} of b has dim {b.shape[mb]}"
            )
    out = np.tensordot(a, b, axes=(modes_a, modes_b))
    # ascontiguousarray would promote a fully contracted 0-d result to 1-d
    return out if out.ndim == 0 else np.ascontiguousarray(out)
