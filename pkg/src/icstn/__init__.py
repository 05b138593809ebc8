"""Compositional and inverse compositional spatial transformer networks in NumPy."""

from .arch import NetworkSpec, Variant, count_params, parse_arch
from .classic import InverseCompositionalLK, LucasKanade, SupervisedDescent
from .data import PerturbConfig, load_mnist, load_planar_config
from .estimators import STNAligner, STNClassifier
from .exceptions import ConfigurationError, DataFormatError, DegenerateWarpError, IllConditionedError
from .networks import AlignmentPipeline
from .sampler import FrameSpec, bilinear_backward, bilinear_sample, make_grid, warp_image
from .warp import WarpFamily, compose, compose_jacobians, fit_warp_to_corners, from_matrix, invert, to_matrix

__all__ = [
    "AlignmentPipeline",
    "ConfigurationError",
    "DataFormatError",
    "DegenerateWarpError",
    "FrameSpec",
    "IllConditionedError",
    "InverseCompositionalLK",
    "LucasKanade",
    "NetworkSpec",
    "PerturbConfig",
    "STNAligner",
    "STNClassifier",
    "SupervisedDescent",
    "Variant",
    "WarpFamily",
    "bilinear_backward",
    "bilinear_sample",
    "compose",
    "compose_jacobians",
    "count_params",
    "fit_warp_to_corners",
    "from_matrix",
    "invert",
    "load_mnist",
    "load_planar_config",
    "make_grid",
    "parse_arch",
    "to_matrix",
    "warp_image",
]
