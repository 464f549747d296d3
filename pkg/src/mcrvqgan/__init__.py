"""MRI to tau-PET slice synthesis with a multi-scale, residual, attention-augmented VQGAN."""

from .config import Config, load_config, tiny_config
from .errors import (CheckpointError, ConfigError, DataError, DivergenceError, FormatError,
                     MetadataError, RangeError, ShapeError)
from .networks import Classifier, Discriminator, Generator, build_ablation_variant, count_parameters

__version__ = "0.1.0"
