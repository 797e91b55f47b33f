"""Counter-based random streams shared by the simulation modules.

Every consumer addresses an independent Philox stream by (seed, index,
lane), so ensembles reproduce bitwise no matter how work is scheduled or
chunked, as long as each stream is consumed in a fixed order.
"""

from __future__ import annotations

import numpy as np

__all__ = ["philox_stream"]


def philox_stream(seed: int, index: int, lane: int) -> np.random.Generator:
    seq = np.random.SeedSequence(entropy=int(seed),
                                 spawn_key=(int(index), int(lane)))
    return np.random.Generator(np.random.Philox(seq))
