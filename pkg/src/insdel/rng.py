"""Named, splittable random streams.

Every stochastic choice takes an explicit ``np.random.Generator``. Streams are
derived from a root seed plus a path of names, so adding a new consumer never
shifts the numbers an existing one sees.
"""

import zlib

import numpy as np


def _key(name) -> int:
    if isinstance(name, (int, np.integer)) and name >= 0:
        return int(name)
    return zlib.crc32(str(name).encode("utf-8"))


def stream(seed: int, *names) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(_key, names)])))
