"""Counter-based seed derivation.

Every random stream is keyed by ``(master_seed, stream, counter...)``, so a
client's minibatch order in round t does not depend on which other clients
ran before it, and sequential and parallel execution agree.
"""
import zlib

import numpy as np

STREAMS = ("init", "cl", "client", "participation", "partition", "data", "trial", "probe", "split")


def stream_id(stream: str) -> int:
    # crc32 keeps the mapping stable across interpreter runs (hash() is salted)
    return zlib.crc32(stream.encode("utf-8"))


def derive_rng(seed: int, stream: str, *counters: int) -> np.random.Generator:
    key = (stream_id(stream),) + tuple(int(c) for c in counters)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.default_rng(ss)


def derive_seed(seed: int, stream: str, *counters: int) -> int:
    return int(derive_rng(seed, stream, *counters).integers(0, 2**63 - 1))
