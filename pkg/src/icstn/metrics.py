"""Alignment error measures."""

import numpy as np

from .sampler import FrameSpec
from .warp import CANONICAL_CORNERS, warp_corners


def corner_error(p, family, frame: FrameSpec, p_target=None) -> np.ndarray:
    """Mean distance (source pixels) between the four box corners under two warps.

    ``p_target`` defaults to the identity, i.e. the reference box itself.
    """
    est = frame.to_pixels(warp_corners(p, CANONICAL_CORNERS, family))
    if p_target is None:
        ref = frame.to_pixels(CANONICAL_CORNERS)
    else:
        ref = frame.to_pixels(warp_corners(p_target, CANONICAL_CORNERS, family))
    return np.linalg.norm(est - ref, axis=-1).mean(axis=-1)


def warp_param_error(p, p_target=None) -> np.ndarray:
    """L2 norm of the residual warp-parameter vector."""
    p = np.asarray(p)
    diff = p if p_target is None else p - np.asarray(p_target)
    return np.linalg.norm(diff, axis=-1)
