"""Inverse rendering of transparent objects.

An analytic Snell/Fresnel renderer produces ground truth; a neural SDF and a
ray bending network are fitted to reproduce novel views and relighting.
"""

from .envmap import EnvironmentMap
from .estimator import TransparentObjectEstimator
from .model import MattingModel
from .optics import AIR_IOR, IorPair, TotalInternalReflection
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AIR_IOR",
    "EnvironmentMap",
    "IorPair",
    "MattingModel",
    "TotalInternalReflection",
    "TrainConfig",
    "TransparentObjectEstimator",
    "train",
    "__version__",
]
