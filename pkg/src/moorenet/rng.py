"""Named, counter-based random streams.

Every stochastic call site asks for its own stream by name, so adding a new
consumer never shifts the numbers another consumer sees.
"""

import zlib

import numpy as np


def _words(name):
    return [zlib.crc32(str(part).encode()) for part in name]


def stream(seed, *name):
    """Philox generator keyed by ``seed`` and a path of names/indices."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *_words(name)])
    return np.random.Generator(np.random.Philox(ss))
