"""
Random stream splitting.

Every random draw in a run comes from a torch.Generator seeded by
derive_seed(master_seed, *path), where path names the consumer, for example
("aux", meta_step, task_index, sample_index). Streams are stateless: the
same path always yields the same numbers, so resumed and parallel runs replay
the uninterrupted serial run exactly.
"""

from typing import Union

import numpy as np
import torch

PathPart = Union[int, str]

_STRING_SALT = 0x9E3779B1


def _encode_part(part: PathPart) -> int:
    if isinstance(part, str):
        # stable across processes, unlike hash()
        value = 0
        for byte in part.encode("utf-8"):
            value = (value * 131 + byte) % (2**32)
        return value ^ _STRING_SALT
    if part < 0:
        raise ValueError(f"stream path parts must be non-negative, got {part}")
    return int(part)


def derive_seed(master_seed: int, *path: PathPart) -> int:
    """64-bit seed for the stream identified by (master_seed, *path)"""
    entropy = [_encode_part(master_seed)] + [_encode_part(p) for p in path]
    state = np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint32)
    return (int(state[0]) << 32 | int(state[1])) & 0x7FFF_FFFF_FFFF_FFFF


def stream(master_seed: int, *path: PathPart) -> torch.Generator:
    """Fresh CPU generator for the given stream path"""
    gen = torch.Generator(device="cpu")
    gen.manual_seed(derive_seed(master_seed, *path))
    return gen


def numpy_stream(master_seed: int, *path: PathPart) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master_seed, *path))
