"""Named, counter-addressable random streams.

Every consumer of randomness asks for a stream by name plus optional integer
counters (epoch, batch, trial, ...).  Streams with different names or counters
never share state, so enabling one stochastic component cannot shift the draws
seen by another.
"""

import zlib

import numpy as np


def stream(seed, name, *counters):
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng([int(seed), key, *(int(c) for c in counters)])
