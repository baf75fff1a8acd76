"""Splittable, counter-based random streams.

Every random draw in a simulation comes from a stream keyed by
``(seed, module, *indices)``. Streams for different keys are statistically
independent and each one is reproducible on its own, so chunks may be
generated in any order or in parallel without changing results.
"""

import numpy as np

# Stable integer ids; changing one changes every simulated run
MODULE_IDS = {
    "source": 1,
    "channel_local": 2,
    "channel_remote": 3,
    "detector_local": 4,
    "detector_remote": 5,
    "dark_local": 6,
    "dark_remote": 7,
    "birefringence": 8,
}


def substream(seed: int, module: str | int, *keys: int) -> np.random.Generator:
    """Return the generator for ``(seed, module, *keys)``.

    Args:
        seed: Run seed, a non-negative integer
        module: Module name from ``MODULE_IDS`` or a raw integer id
        *keys: Further non-negative indices (block, chunk, ...)

    Returns:
        A Philox-backed numpy Generator
    """
    module_id = MODULE_IDS[module] if isinstance(module, str) else int(module)
    entropy = [int(seed), module_id, *(int(k) for k in keys)]
    if any(v < 0 for v in entropy):
        raise ValueError(f"seed and stream keys must be non-negative, got {entropy}")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
