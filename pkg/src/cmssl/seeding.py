"""Named random substreams derived from a single root seed."""

import hashlib

import numpy as np


def substream(seed, *names) -> int:
    """Stable 63-bit seed for the stream ``seed/names[0]/names[1]/...``."""
    key = "/".join([str(int(seed))] + [str(n) for n in names]).encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little") >> 1


def rng_for(seed, *names) -> np.random.Generator:
    return np.random.default_rng(substream(seed, *names))
