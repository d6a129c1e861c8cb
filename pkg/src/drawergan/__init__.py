"""Multi-domain image translation with a drawer-conditioned generator, on numpy."""

from .data import SyntheticDataset, default_domains
from .kernels import BACKEND
from .model import (
    Discriminator,
    DiscriminatorConfig,
    Generator,
    GeneratorConfig,
    count_parameters,
    drawer_pack,
    drawer_unpack,
)
from .tensor import Tensor
from .training import TrainConfig, Trainer, load_config, train

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "Discriminator",
    "DiscriminatorConfig",
    "Generator",
    "GeneratorConfig",
    "SyntheticDataset",
    "Tensor",
    "TrainConfig",
    "Trainer",
    "count_parameters",
    "default_domains",
    "drawer_pack",
    "drawer_unpack",
    "load_config",
    "train",
]
