"""Deterministic, stream-keyed random generators.

Every stochastic choice in the simulator draws from a counter-based Philox
generator keyed by a hash of the consuming site's identifiers (seed, purpose
string, client id, round index, ...). Independent components therefore never
share RNG state, and any draw can be reproduced in isolation.
"""

from __future__ import annotations

import hashlib

import numpy as np


def key_from(*parts) -> int:
    """Collapse identifiers into a stable 128-bit Philox key."""
    text = "|".join(repr(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:16], "big")


def rng_for(*parts) -> np.random.Generator:
    """Fresh generator for the stream identified by ``parts``."""
    return np.random.Generator(np.random.Philox(key=key_from(*parts)))
