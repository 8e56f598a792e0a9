"""Deterministic seed derivation.

Every source of randomness in the package draws from a Generator obtained via
`derive_rng(root, *keys)`. Keys are ints or short strings; strings are hashed
with SHA-256 so the mixing is stable across processes and platforms. Because
streams are derived from (root, context) rather than consumed sequentially,
adding or removing one consumer never shifts the randomness seen by another,
which is what makes resume-from-checkpoint and branch-equivalence checks
bit-exact.
"""

import hashlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_seedseq(*keys) -> np.random.SeedSequence:
    if not keys:
        raise ValueError("derive_seedseq needs at least one key")
    return np.random.SeedSequence([_key_to_int(k) for k in keys])


def derive_rng(*keys) -> np.random.Generator:
    """PCG64 generator keyed by the given (seed, context...) tuple."""
    return np.random.Generator(np.random.PCG64(derive_seedseq(*keys)))


def derive_seed(*keys) -> int:
    """A single derived 63-bit integer seed, for APIs that take plain ints."""
    return int(derive_seedseq(*keys).generate_state(1, np.uint64)[0] >> 1)
