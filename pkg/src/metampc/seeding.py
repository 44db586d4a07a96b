"""Named, independent random streams derived from one run seed."""

import zlib

import numpy as np


def _key(name) -> int:
    if isinstance(name, (int, np.integer)):
        return int(name)
    return zlib.crc32(str(name).encode("utf-8"))


def stream(seed: int, *names) -> np.random.Generator:
    """
    Generator for the child stream identified by names.

    The stream depends only on (seed, names), so adding or removing another
    stream never changes this one. Example: stream(7, "race", "tires_03", 12).
    """
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(n) for n in names))
    return np.random.default_rng(sequence)
