"""Small shared helpers: tolerant grid arithmetic and seed derivation."""

from __future__ import annotations

import math
import zlib

import numpy as np

# Seed-derivation domains, so independent random streams never collide.
DOMAIN_SCAN = 1
DOMAIN_AUGMENT = 2
DOMAIN_TRAIN = 3
DOMAIN_INIT = 4


def floor_ratio(numerator: float, denominator: float) -> int:
    """floor(numerator / denominator) robust to float representation noise.

    Grid arithmetic here constantly divides quantities that are exact
    multiples in real numbers (1.8 / 0.05, 0.08r / 0.02r, ...); the quotient
    is rounded to 9 decimals before flooring so such cases never fall one
    short.
    """
    if denominator <= 0:
        raise ValueError("denominator must be positive")
    return int(math.floor(round(numerator / denominator, 9)))


def stable_u32(text: str) -> int:
    """Deterministic 32-bit hash of a string (process-independent)."""
    return zlib.crc32(text.encode("utf-8")) & 0xFFFFFFFF


def derived_rng(*entropy: int) -> np.random.Generator:
    """Generator seeded from a tuple of integers, reproducible everywhere."""
    return np.random.default_rng(np.random.SeedSequence(entropy))


_ALLOCATOR_CONFIGURED = False


def configure_allocator() -> None:
    """Keep large freed buffers on the glibc heap for reuse.

    The training loop allocates and frees multi-hundred-MB tensors every
    step; with default malloc settings each one is a fresh mmap whose pages
    fault in again on every use, which costs more than the arithmetic.
    Raising the mmap threshold and disabling trim makes those buffers come
    from (and return to) the reusable heap. No-op where glibc is absent.
    """
    global _ALLOCATOR_CONFIGURED
    if _ALLOCATOR_CONFIGURED:
        return
    _ALLOCATOR_CONFIGURED = True
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass
