"""Deterministic seed derivation.

All randomness in the package flows through named substreams derived from a
single root seed ("data", "attack", "init", "fracat", ...). Streams are
derived statelessly by hashing (root, name, indices), so any draw can be
reproduced later from its coordinates alone -- this is what makes checkpoint
resume and attack replay bitwise-exact.
"""

import hashlib
import struct

import numpy as np
import torch

_SEED_MASK = (1 << 63) - 1


def derive_seed(root_seed: int, stream: str, *indices: int) -> int:
    """Derive a 63-bit seed for a named substream of the root seed."""
    h = hashlib.sha256()
    h.update(b"atgan-rng\x00")
    h.update(str(int(root_seed)).encode())
    h.update(b"\x00")
    h.update(stream.encode())
    for index in indices:
        h.update(struct.pack("<q", int(index)))
    return int.from_bytes(h.digest()[:8], "little") & _SEED_MASK


def torch_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(seed) & _SEED_MASK)
    return gen


def numpy_generator(seed: int) -> np.random.Generator:
    return np.random.default_rng(int(seed) & _SEED_MASK)
