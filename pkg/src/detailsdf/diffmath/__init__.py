"""Dense float64 reverse-mode differentiation, Adam and checkpoints."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .optim import Adam, AdamState, adam_step
from .rng import make_rng, split
from .tape import *  # noqa: F401,F403
from .tape import __all__ as _tape_all

__all__ = list(_tape_all) + [
    "Adam",
    "AdamState",
    "adam_step",
    "CheckpointError",
    "load_checkpoint",
    "save_checkpoint",
    "make_rng",
    "split",
]
