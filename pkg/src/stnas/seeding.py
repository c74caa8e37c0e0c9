"""Seed splitting.

Every stochastic choice draws from a generator keyed by ``(master_seed, *keys)``.
The keys are hashed with CRC-32 of their ``str`` form and used as the
``spawn_key`` of a :class:`numpy.random.SeedSequence`, so the derived stream
depends only on the master seed and the key path, never on call order.
"""

import zlib

import numpy as np


def _key_hash(key) -> int:
    return zlib.crc32(str(key).encode("utf-8"))


def derive_seed(master: int, *keys) -> int:
    ss = np.random.SeedSequence(entropy=int(master), spawn_key=tuple(_key_hash(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def rng_for(master: int, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *keys))
