"""Seed fan-out and deterministic torch setup."""
import numpy as np
import torch

from .synth import derive_seed

__all__ = ["derive_seed", "seed_everything", "torch_generator"]


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed % (2**63))
    torch.use_deterministic_algorithms(True)
    np.random.seed(seed % (2**32))


def torch_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(seed % (2**63))
    return g
