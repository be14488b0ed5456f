"""Binary checkpoint format for network parameters and running statistics.

Layout: magic ``b"RSTD"``, version u16 little-endian (currently 1), entry
count u32, then per entry: name length u16 + UTF-8 name, order u8, dims as
u32 list, and the payload as little-endian 4-byte reals.  Values are always
stored in 32-bit precision, so float64 networks round on save.

A checkpoint restores values into a network of the same architecture; the
permutations of shuffled layers are referenced by their seeds in the
experiment config (and saved alongside as permutation files by the CLI), not
embedded here.
"""

from __future__ import annotations

import struct

import numpy as np

_MAGIC = b"RSTD"
_VERSION = 1
_HEADER = struct.Struct("<4sHI")


class CheckpointError(ValueError):
    pass


def checkpoint_to_bytes(network) -> bytes:
    entries = network.state_entries()
    chunks = [_HEADER.pack(_MAGIC, _VERSION, len(entries))]
    for name, arr in entries.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def parse_checkpoint(data: bytes) -> dict[str, np.ndarray]:
    """Decode a checkpoint into name -> float32 array; errors carry the byte
    offset at which parsing failed."""
    if len(data) < _HEADER.size:
        raise CheckpointError(f"truncated header at offset {len(data)}")
    magic, version, count = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise CheckpointError(f"bad magic {magic!r} at offset 0")
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    off = _HEADER.size

    def need(nbytes, what):
        nonlocal off
        if off + nbytes > len(data):
            raise CheckpointError(f"truncated {what} at offset {off}")
        off += nbytes
        return data[off - nbytes:off]

    for _ in range(count):
        (name_len,) = struct.unpack("<H", need(2, "name length"))
        name = need(name_len, "name").decode("utf-8")
        (order,) = struct.unpack("<B", need(1, "order"))
        dims = struct.unpack(f"<{order}I", need(4 * order, "dims"))
        n = int(np.prod(dims)) if order else 1
        payload = need(4 * n, f"payload of {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if off != len(data):
        raise CheckpointError(f"{len(data) - off} trailing bytes at offset {off}")
    return out


def load_checkpoint_into(network, data: bytes) -> None:
    """Restore parameter and running-stat values into a matching network."""
    parsed = parse_checkpoint(data)
    entries = network.state_entries()
    missing = sorted(set(entries) - set(parsed))
    extra = sorted(set(parsed) - set(entries))
    if missing or extra:
        raise CheckpointError(
            f"checkpoint does not match network: missing {missing}, extra {extra}"
        )
    for name, arr in entries.items():
        value = parsed[name]
        if value.shape != arr.shape:
            raise CheckpointError(
                f"{name}: checkpoint shape {value.shape} != network shape {arr.shape}"
            )
        np.copyto(arr, value.astype(arr.dtype))


def save_checkpoint(path, network) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_to_bytes(network))


def load_checkpoint(path, network) -> None:
    with open(path, "rb") as fh:
        load_checkpoint_into(network, fh.read())
