"""Counter-based random streams keyed by stable identifiers."""

import hashlib

import numpy as np


def stable_key(*parts) -> int:
    """Map any tuple of str/int parts to a 64-bit integer, independent of PYTHONHASHSEED."""
    text = "\x1f".join(str(p) for p in parts)
    return int.from_bytes(hashlib.md5(text.encode("utf-8")).digest()[:8], "little")


def rng_for(*parts) -> np.random.Generator:
    """Philox generator keyed by ``parts``; the same key always yields the same stream."""
    entropy = [stable_key(*parts)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
