"""Deterministic seed derivation.

Every stochastic component takes explicit seeds and derives its own RNG
through these helpers, so repeated runs are bit-identical and no code path
touches the global numpy or torch RNG state.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def stable_int(*parts) -> int:
    """Collapse ints/strings into a stable 64-bit integer via SHA-256."""
    h = hashlib.sha256()
    for part in parts:
        h.update(repr(part).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest()[:8], "little")


def derive_rng(*parts) -> np.random.Generator:
    return np.random.default_rng(stable_int(*parts))


def derive_torch_generator(*parts) -> torch.Generator:
    gen = torch.Generator(device="cpu")
    gen.manual_seed(stable_int(*parts) & ((1 << 63) - 1))
    return gen
