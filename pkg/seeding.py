"""Seed stream splitting.

Every random stream in an experiment is derived from one root seed and a
path of keys, e.g. ``make_rng(seed, "collect", iteration, task_id)``.
String keys are mapped to a 32-bit counter with the first four bytes of
their SHA-256 digest; integer keys are used as-is. The key path becomes the
``spawn_key`` of a numpy ``SeedSequence``, so adding a new stream never
shifts the numbers drawn by an existing one.
"""
import hashlib

import numpy as np


def _key_to_int(key):
    if isinstance(key, (bool, np.bool_)):
        return int(key)
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"seed keys must be non-negative, got {key}")
        return int(key)
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def derive_seed_sequence(root_seed, *keys):
    return np.random.SeedSequence(int(root_seed), spawn_key=tuple(_key_to_int(k) for k in keys))


def derive_seed(root_seed, *keys):
    """Derive a 32-bit integer seed for a sub-stream"""
    return int(derive_seed_sequence(root_seed, *keys).generate_state(1)[0])


def make_rng(root_seed, *keys):
    """Generator for the stream at ``keys`` below ``root_seed``"""
    return np.random.Generator(np.random.PCG64(derive_seed_sequence(root_seed, *keys)))
