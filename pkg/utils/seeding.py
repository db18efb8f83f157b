"""
Seed handling. One root seed fans out into per-stage seeds so stages can be
rerun in isolation with the same randomness they get inside run-all.
"""

import random
import zlib
from typing import Optional

import numpy as np
import torch


def derive_seed(root_seed: int, stage: str) -> int:
    """Stable 32-bit seed for (root_seed, stage name)."""
    stage_key = zlib.crc32(stage.encode("utf-8"))
    sequence = np.random.SeedSequence([int(root_seed), stage_key])
    return int(sequence.generate_state(1, dtype=np.uint32)[0])


def seed_everything(seed: int, num_threads: Optional[int] = None) -> torch.Generator:
    """Seed python, numpy and torch and request deterministic kernels.

    Returns a seeded torch Generator.
    """
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    if num_threads:
        torch.set_num_threads(num_threads)
    generator = torch.Generator()
    generator.manual_seed(seed)
    return generator
