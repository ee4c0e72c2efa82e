"""Role-tagged random streams derived from one run seed."""
import zlib

import numpy as np


def stream(seed: int, role: str) -> np.random.Generator:
    """Independent generator for ``role``; same (seed, role) -> same stream."""
    tag = zlib.crc32(role.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag]))
