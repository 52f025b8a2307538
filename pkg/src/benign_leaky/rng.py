"""Counter-based random streams.

Every random draw in the package goes through :func:`stream`, which builds a
``numpy.random.Generator`` on the Philox4x64 counter-based bit generator.  The
stream for a given purpose is identified by ``(seed, *keys)``; keys are folded
into the ``SeedSequence`` spawn key so distinct purposes never overlap and a
stream can be recreated on any worker.
"""
import zlib

import numpy as np

# fixed purpose codes keep streams stable across releases
PURPOSES = {
    "labels": 1,
    "noise": 2,
    "init": 3,
    "mc": 4,
    "probes": 5,
    "dual_start": 6,
}


def _key(k):
    if isinstance(k, str):
        code = PURPOSES.get(k)
        if code is None:
            code = zlib.crc32(k.encode("utf8")) | (1 << 32)
        return code
    k = int(k)
    if k < 0:
        raise ValueError("stream keys must be non-negative")
    return k


def stream(seed, *keys):
    """Generator for the sub-stream ``keys`` of master ``seed``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(*parts):
    """Hash integers into a 64-bit seed (used for trial seeds)."""
    ss = np.random.SeedSequence([int(p) for p in parts])
    return int(ss.generate_state(1, dtype=np.uint64)[0])
