"""Stable seed derivation.

Every stage seed is a pure function of the master seed and a tuple of string
or integer keys, so one integer reproduces an entire run and concurrent
execution draws the same streams as serial execution.
"""

import hashlib

import numpy as np


def derive_seed(master, *keys):
    """Return a 63-bit seed from ``(master, *keys)`` via BLAKE2b."""
    payload = "\x1f".join([str(int(master))] + [str(k) for k in keys])
    digest = hashlib.blake2b(payload.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def rng_for(master, *keys):
    return np.random.default_rng(derive_seed(master, *keys))
