"""Phrase-grounded style transfer for single-domain generalized detection."""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DivergedError,
    InvalidInputError,
    ParseError,
    PGSTError,
    ShapeError,
)
from .featstats import ChannelStyle, channel_stats, pgst_apply
from .groundnet import GroundingModel, ModelConfig, load_checkpoint, save_checkpoint
from .prompts import Prompt, Vocabulary, domain_prompt, source_prompt
from .styleengine import StyleBank, StyleFitConfig, fit_style
from .trainer import TrainConfig, finetune_with_pgst, infer, train_source_aug

__all__ = [
    "ChannelStyle",
    "ConfigError",
    "DivergedError",
    "GroundingModel",
    "InvalidInputError",
    "ModelConfig",
    "ParseError",
    "PGSTError",
    "Prompt",
    "ShapeError",
    "StyleBank",
    "StyleFitConfig",
    "TrainConfig",
    "Vocabulary",
    "channel_stats",
    "domain_prompt",
    "finetune_with_pgst",
    "fit_style",
    "infer",
    "load_checkpoint",
    "pgst_apply",
    "save_checkpoint",
    "source_prompt",
    "train_source_aug",
]
