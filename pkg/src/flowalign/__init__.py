"""Flow-guided deformable alignment for video super-resolution."""

__version__ = "0.1.0"

from .model import (FlowGuidedSR, FrameWindow, ModelConfig, paper_preset,
                    toy_preset)
from .tensor import Tensor, no_grad

__all__ = ["FlowGuidedSR", "FrameWindow", "ModelConfig", "Tensor", "no_grad",
           "paper_preset", "toy_preset", "__version__"]
