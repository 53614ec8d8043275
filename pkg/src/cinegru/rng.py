"""Named, counter-based random streams.

Every consumer of randomness asks for a stream by ``(seed, *names)``. The
names are hashed together with the 64-bit seed into a Philox key, so two
streams with different names never share state and the order in which
streams are created does not matter.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_key(seed: int, *names) -> int:
    """Hash a seed and a name path into a 128-bit integer."""
    h = hashlib.blake2b(digest_size=16)
    h.update(int(seed & _MASK64).to_bytes(8, "little"))
    for name in names:
        h.update(b"\x1f")
        h.update(str(name).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


def derive_seed(seed: int, *names) -> int:
    """A child 64-bit seed, e.g. one per series id."""
    return derive_key(seed, *names) & _MASK64


def stream(seed: int, *names) -> np.random.Generator:
    """Return an independent generator for ``(seed, *names)``."""
    return np.random.Generator(np.random.Philox(key=derive_key(seed, *names)))
