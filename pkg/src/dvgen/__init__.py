"""Diverse video generation with Gaussian-process latent dynamics, at desk scale."""
from .dvg import DvgConfig, DvgModel, GenerationTrace, TrainConfig, TriggerConfig, generate, joint_loss, train
from .estimator import DiverseVideoGenerator
from .exact_gp import ExactGPRegressor
from .svgp import SVGPRegressor
from .synthdata import WalkerConfig, generate_episode

__version__ = "0.1.0"

__all__ = [
    "DiverseVideoGenerator", "DvgConfig", "DvgModel", "ExactGPRegressor", "GenerationTrace",
    "SVGPRegressor", "TrainConfig", "TriggerConfig", "WalkerConfig", "generate", "generate_episode",
    "joint_loss", "train",
]
