"""Desk-scale ViT-CoMer: plain ViT plus a convolutional pyramid branch with
multi-receptive-field convs and bidirectional deformable-attention fusion."""
from .autodiff import Tape, Tensor
from .model import CoMer, CoMerConfig, param_count

__all__ = ["CoMer", "CoMerConfig", "Tape", "Tensor", "param_count"]
__version__ = "0.1.0"
