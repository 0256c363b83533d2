"""Seeded, stateless randomness.

All noise in the pipeline is produced here from explicit 64-bit seeds;
nothing draws from ambient process state.  ``derive_seed`` mixes a root
seed with string/int tags so that independent streams (per training step,
per image, per purpose) never collide by construction.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .tensor import Tensor

_MASK = (1 << 64) - 1
_MAX_ELEMENTS = 1 << 31


def derive_seed(root: int, *tags: int | str) -> int:
    """Deterministically mix a root seed with a sequence of tags."""
    h = hashlib.blake2b(digest_size=8)
    h.update(int(root & _MASK).to_bytes(8, "little"))
    for tag in tags:
        if isinstance(tag, str):
            h.update(b"s" + tag.encode("utf-8") + b"\x00")
        else:
            h.update(b"i" + int(tag & _MASK).to_bytes(8, "little"))
    return int.from_bytes(h.digest(), "little")


def _validate_shape(shape) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    total = 1
    for s in shape:
        if s <= 0:
            raise ValueError(f"extents must be positive, got {shape}")
        total *= s
        if total > _MAX_ELEMENTS:
            raise ValueError(f"shape {shape} exceeds element budget {_MAX_ELEMENTS}")
    return shape


def seeded_normal_array(shape, seed: int, dtype=np.float32) -> np.ndarray:
    """I.i.d. standard normal samples, bitwise-deterministic in (shape, seed)."""
    shape = _validate_shape(shape)
    gen = np.random.Generator(np.random.PCG64(seed & _MASK))
    return gen.standard_normal(size=shape, dtype=dtype)


def seeded_normal(shape, seed: int, dtype=np.float32) -> Tensor:
    return Tensor(seeded_normal_array(shape, seed, dtype=dtype))


def seeded_uniform_ints(n: int, low: int, high: int, seed: int) -> np.ndarray:
    """``n`` integers uniform on [low, high), deterministic in seed."""
    if n <= 0:
        raise ValueError("n must be positive")
    gen = np.random.Generator(np.random.PCG64(seed & _MASK))
    return gen.integers(low, high, size=n, dtype=np.int64)


def seeded_permutation(n: int, seed: int) -> np.ndarray:
    gen = np.random.Generator(np.random.PCG64(seed & _MASK))
    return gen.permutation(n)
