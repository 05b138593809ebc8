"""Differentiable bilinear warping of images.

Warps act on canonical coordinates: the output lattice spans ``[-1, 1]^2``
with ``-1`` at the centre of the first pixel and ``+1`` at the centre of the
last one (x to the right, y down). A :class:`FrameSpec` then maps canonical
coordinates into pixel coordinates of the *source* image, which is what lets
a warp reach pixels outside the region it was defined on.

Samples falling outside the source are zero-filled and receive no gradient.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .exceptions import DegenerateWarpError
from .warp import WarpFamily, apply_matrix, fit_warp_to_corners, to_matrix


@dataclass(frozen=True)
class FrameSpec:
    """Homogeneous map from canonical coordinates to source pixel coordinates."""

    matrix: np.ndarray

    @classmethod
    def for_image(cls, height: int, width: int) -> "FrameSpec":
        """Frame whose canonical square covers a whole ``height x width`` image."""
        return cls.crop(0.0, 0.0, width, height)

    @classmethod
    def crop(cls, x0: float, y0: float, width: float, height: float) -> "FrameSpec":
        """Axis-aligned window whose first pixel centre is ``(x0, y0)``.

        ``width``/``height`` count pixels, so the last pixel centre sits at
        ``x0 + width - 1``.
        """
        sx, sy = (width - 1) / 2.0, (height - 1) / 2.0
        m = np.array([[sx, 0.0, x0 + sx], [0.0, sy, y0 + sy], [0.0, 0.0, 1.0]])
        return cls(m)

    @classmethod
    def from_box(cls, corners) -> "FrameSpec":
        """Frame mapping the canonical square onto a (possibly skewed) quad.

        ``corners`` are pixel coordinates ordered top-left, top-right,
        bottom-right, bottom-left.
        """
        from .warp import CANONICAL_CORNERS

        p = fit_warp_to_corners(CANONICAL_CORNERS, corners, WarpFamily.HOMOGRAPHY)
        return cls(to_matrix(p, WarpFamily.HOMOGRAPHY))

    def to_pixels(self, points) -> np.ndarray:
        return apply_matrix(self.matrix, points)

    def to_canonical(self, points) -> np.ndarray:
        return apply_matrix(np.linalg.inv(self.matrix), points)


@dataclass
class SampleGrid:
    """Where every output site samples the source.

    ``g`` maps homogeneous canonical lattice points to homogeneous source
    pixels (``frame.matrix @ M(p)``); per-site coordinates are derived on
    demand.
    """

    g: np.ndarray  # (..., 3, 3)
    p: np.ndarray
    family: WarpFamily
    frame: FrameSpec
    out_size: tuple
    src_shape: tuple | None = None

    @functools.cached_property
    def _sites(self):
        h, w = self.out_size
        g3 = np.ascontiguousarray(self.g.reshape(-1, 3, 3))
        homog = np.empty((g3.shape[0], h * w, 3), dtype=g3.dtype)
        coords = np.empty((g3.shape[0], h * w, 2), dtype=g3.dtype)
        _kernels.coords_kernel(g3, canonical_lattice(h, w, g3.dtype), homog, coords)
        lead = self.g.shape[:-2]
        return homog.reshape(lead + (h * w, 3)), coords.reshape(lead + (h, w, 2))

    @property
    def homog(self) -> np.ndarray:
        """``(..., H*W, 3)`` un-normalized source coordinates."""
        return self._sites[0]

    @property
    def coords(self) -> np.ndarray:
        """``(..., H, W, 2)`` source pixel coordinates ``(x, y)``."""
        return self._sites[1]

    @property
    def in_bounds_mask(self) -> np.ndarray:
        c = self.coords
        if self.src_shape is None:
            return np.ones(c.shape[:-1], dtype=bool)
        hs, ws = self.src_shape
        x, y = c[..., 0], c[..., 1]
        return (x >= 0) & (x <= ws - 1) & (y >= 0) & (y <= hs - 1)


@functools.lru_cache(maxsize=32)
def _lattice(height: int, width: int, dtype_name: str) -> np.ndarray:
    ys = np.linspace(-1.0, 1.0, height) if height > 1 else np.zeros(1)
    xs = np.linspace(-1.0, 1.0, width) if width > 1 else np.zeros(1)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel(), np.ones(gx.size)], -1)
    pts = pts.astype(dtype_name)
    pts.setflags(write=False)
    return pts


def canonical_lattice(height: int, width: int, dtype=np.float64) -> np.ndarray:
    """Homogeneous canonical coordinates ``(H*W, 3)`` of an output lattice."""
    return _lattice(int(height), int(width), np.dtype(dtype).name)


def make_grid(p, family, out_size, frame: FrameSpec, src_shape=None) -> SampleGrid:
    """Sampling grid for warp ``p`` (``(d,)`` or ``(B, d)``).

    ``src_shape`` is ``(Hs, Ws)`` of the image the grid will be used on and
    is only needed for ``in_bounds_mask``; without it every site is marked
    in bounds.
    """
    family = WarpFamily.coerce(family)
    p = np.asarray(p)
    dtype = np.result_type(p, np.float32)
    h, w = (int(v) for v in out_size)
    if h < 1 or w < 1:
        raise ValueError(f"output size must be positive, got {out_size}")
    g = np.asarray(frame.matrix, dtype=dtype) @ to_matrix(p.astype(dtype), family)
    # the denominator is affine in (u, v), so its extremes over [-1, 1]^2 sit at the corners
    den = g[..., 2, :] @ np.array([[-1, 1, 1, -1], [-1, -1, 1, 1], [1, 1, 1, 1]], dtype=dtype)
    same_sign = np.all(den > 0, axis=-1) | np.all(den < 0, axis=-1)
    if not np.all(np.isfinite(g)) or not np.all(same_sign) or np.any(np.abs(den) < 1e-12):
        raise DegenerateWarpError("warp sends part of the output lattice to infinity")
    return SampleGrid(g, p, family, frame, (h, w), None if src_shape is None else tuple(src_shape))


@dataclass
class _SampleCache:
    src: np.ndarray  # (Bs, C, Hs, Ws) as sampled
    src_batched: bool
    grid: SampleGrid
    site_grads: np.ndarray  # (B, C, P, 3) derivative of each sample w.r.t. its homogeneous point


def _as_batched_src(src):
    src = np.asarray(src)
    if src.ndim == 3:
        return src[None], False
    if src.ndim == 4:
        return src, True
    raise ValueError(f"source must be (C, H, W) or (B, C, H, W), got {src.shape}")


def bilinear_sample(src, grid: SampleGrid, return_cache: bool = False):
    """Bilinearly sample ``src`` through ``grid``.

    ``src`` is ``(C, Hs, Ws)`` (shared by every grid in the batch) or
    ``(B, C, Hs, Ws)``. Returns ``(C, H, W)`` for an unbatched grid and
    ``(B, C, H, W)`` otherwise.
    """
    src4, src_batched = _as_batched_src(src)
    bs, c, hs, ws = src4.shape
    if hs < 2 or ws < 2:
        raise ValueError("source image must be at least 2x2")
    unbatched = grid.g.ndim == 2
    h, w = grid.out_size
    dtype = np.result_type(src4, grid.g)
    g3 = np.ascontiguousarray(grid.g.reshape(-1, 3, 3), dtype=dtype)
    b = g3.shape[0]
    if bs not in (1, b):
        raise ValueError(f"source batch {bs} does not match grid batch {b}")
    src4 = np.ascontiguousarray(src4, dtype=dtype)
    out = np.empty((b, c, h * w), dtype=dtype)
    site_grads = np.empty((b, c, h * w, 3) if return_cache else (1, 1, 1, 3), dtype=dtype)
    _kernels.sample_kernel(src4, g3, canonical_lattice(h, w, dtype), out, site_grads, return_cache)
    out = out.reshape(b, c, h, w)
    if unbatched:
        out = out[0]
    if return_cache:
        return out, _SampleCache(src4, src_batched, grid, site_grads)
    return out


def _points_jacobian(grid: SampleGrid):
    """d(pixel x, pixel y)/dp for every site: ``(B, P, 2, d)``."""
    homog = grid.homog if grid.homog.ndim == 3 else grid.homog[None]
    h, w = grid.out_size
    lat = canonical_lattice(h, w, homog.dtype)
    f = np.asarray(grid.frame.matrix, dtype=homog.dtype)
    n2 = homog[..., 2]
    px = homog[..., 0] / n2
    py = homog[..., 1] / n2
    # d(px, py)/dn for n = G x~
    dpx_dn = np.stack([1 / n2, np.zeros_like(n2), -px / n2], -1)
    dpy_dn = np.stack([np.zeros_like(n2), 1 / n2, -py / n2], -1)
    rows, cols = grid.family.positions
    # dn/dp_k = F[:, r_k] * x~[c_k]
    fr = f[:, list(rows)]  # (3, d)
    xc = lat[:, list(cols)]  # (P, d)
    jx = (dpx_dn @ fr) * xc
    jy = (dpy_dn @ fr) * xc
    return np.stack([jx, jy], -2)


def grid_jacobian(grid: SampleGrid) -> np.ndarray:
    """Per-site derivative of source pixel coordinates w.r.t. the warp parameters."""
    jac = _points_jacobian(grid)
    h, w = grid.out_size
    shape = grid.coords.shape[:-3] + (h, w, 2, grid.family.dim)
    return jac.reshape(shape)


def bilinear_backward(grad_out, cache: _SampleCache, need_src: bool = True, need_p: bool = True):
    """Backpropagate through :func:`bilinear_sample`.

    Returns ``(grad_src, grad_p)``; either is ``None`` when not requested.
    ``grad_src`` has the shape of the sampled source; a shared source
    accumulates gradient from every batch element. ``grad_p`` has the shape
    of ``grid.p``.
    """
    grid = cache.grid
    src = cache.src
    dtype = src.dtype
    h, w = grid.out_size
    g3 = np.ascontiguousarray(grid.g.reshape(-1, 3, 3), dtype=dtype)
    b = g3.shape[0]
    lat = canonical_lattice(h, w, dtype)
    g = np.ascontiguousarray(np.asarray(grad_out, dtype=dtype).reshape(b, src.shape[1], h * w))
    out_src = out_p = None
    if need_src:
        grad_src = np.zeros(src.shape, dtype=dtype)
        _kernels.backward_src_kernel(g3, lat, g, grad_src)
        out_src = grad_src if cache.src_batched else grad_src[0]
    if need_p:
        grad_g = np.empty((b, 3, 3), dtype=dtype)
        _kernels.backward_g_kernel(cache.site_grads, lat, g, grad_g)
        # G = F M(p): dL/dM = F^T dL/dG, read off at the parameter positions
        grad_m = np.asarray(grid.frame.matrix, dtype=dtype).T @ grad_g
        rows, cols = grid.family.positions
        out_p = grad_m[:, rows, cols]
        if grid.g.ndim == 2:
            out_p = out_p[0]
    return out_src, out_p


def warp_image(src, p, family, frame: FrameSpec | None = None, out_size=None, return_cache=False):
    """Sample ``src`` through warp ``p``; the one-call grid+sampler combination.

    Defaults: ``frame`` covers the whole source and the output has the
    source's spatial size.
    """
    src4, _ = _as_batched_src(src)
    hs, ws = src4.shape[-2:]
    if frame is None:
        frame = FrameSpec.for_image(hs, ws)
    if out_size is None:
        out_size = (hs, ws)
    grid = make_grid(p, family, out_size, frame, src_shape=(hs, ws))
    return bilinear_sample(src, grid, return_cache=return_cache)
