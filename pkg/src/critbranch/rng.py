"""Counter-based random streams.

Every replicate owns a Philox generator whose 128-bit key is built from the
master seed, a stream label and the replicate index. Streams are therefore
independent of scheduling: replicate ``r`` of stream ``"branch/n=400"`` gets
the same numbers whether it runs first, last, serially or on a worker thread.
"""

import hashlib
import os

import numpy as np

SEED_ENV = "BB_SEED"
DEFAULT_SEED = 20110811
_MASK64 = (1 << 64) - 1


def resolve_seed(seed=None):
    """Return ``seed`` if given, else ``$BB_SEED``, else the package default."""
    if seed is not None:
        return int(seed) & _MASK64
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        return int(env) & _MASK64
    return DEFAULT_SEED


def stream_key(seed, label):
    digest = hashlib.blake2b(
        f"{int(seed) & _MASK64}:{label}".encode(), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little")


def replicate_generator(seed, replicate, label="default"):
    """Generator for one replicate; key = (hash(seed, label), replicate)."""
    if replicate < 0:
        raise ValueError("replicate index must be nonnegative")
    key = stream_key(seed, label) | ((int(replicate) & _MASK64) << 64)
    return np.random.Generator(np.random.Philox(key=key))
