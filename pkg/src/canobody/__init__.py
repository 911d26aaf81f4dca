"""Two-layer implicit clothed-body modeling with blend skinning,
implicit rendering, and cloth-invariant re-identification, built on a
small tape autodiff core and verified against an analytic capsule world.
"""

__version__ = "0.1.0"

from .body import ImplicitBodyModel, LatentCodes
from .config import MarchConfig, ModelConfig, TrainConfig
from .nn import AdamState, Mlp, adam_step
from .skinning import SkeletonRig, SkinningModel
from .tape import Tensor, backward

__all__ = [
    "AdamState", "ImplicitBodyModel", "LatentCodes", "MarchConfig", "Mlp",
    "ModelConfig", "SkeletonRig", "SkinningModel", "Tensor", "TrainConfig",
    "adam_step", "backward",
]
