"""Warp parameter algebra for translation, affine and homography warps.

Parameters are flat vectors ``p`` whose matrix form is the identity plus
``p`` scattered into fixed positions of a 3x3 homogeneous matrix::

    affine      [[1+p1, p2, p3], [p4, 1+p5, p6], [0, 0, 1]]
    homography  [[1+p1, p2, p3], [p4, 1+p5, p6], [p7, p8, 1]]
    translation [[1, 0, p1], [0, 1, p2], [0, 0, 1]]

so ``p = 0`` is the identity for every family. All functions broadcast over
leading batch dimensions: ``p`` may be ``(d,)`` or ``(..., d)``.

Composition follows the update-on-the-left order,
``M(compose(p_in, dp)) = M(dp) @ M(p_in)``.
"""

from __future__ import annotations

import enum

import numpy as np

from .exceptions import DegenerateWarpError, IllConditionedError

_EPS_DEN = 1e-12


class WarpFamily(enum.Enum):
    TRANSLATION = "translation"
    AFFINE = "affine"
    HOMOGRAPHY = "homography"

    @property
    def dim(self) -> int:
        return {"translation": 2, "affine": 6, "homography": 8}[self.value]

    @property
    def positions(self) -> tuple[tuple[int, ...], tuple[int, ...]]:
        """(rows, cols) of each parameter inside the 3x3 matrix."""
        return _POSITIONS[self.value]

    @classmethod
    def coerce(cls, value: "WarpFamily | str") -> "WarpFamily":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(
                f"unknown warp family {value!r}; expected one of "
                f"{[f.value for f in cls]}"
            ) from None

    @classmethod
    def from_dim(cls, d: int) -> "WarpFamily":
        for fam in cls:
            if fam.dim == d:
                return fam
        raise ValueError(f"no warp family has {d} parameters")


_POSITIONS = {
    "translation": ((0, 1), (2, 2)),
    "affine": ((0, 0, 0, 1, 1, 1), (0, 1, 2, 0, 1, 2)),
    "homography": ((0, 0, 0, 1, 1, 1, 2, 2), (0, 1, 2, 0, 1, 2, 0, 1)),
}


def _as_float(a) -> np.ndarray:
    a = np.asarray(a)
    return a if np.issubdtype(a.dtype, np.floating) else a.astype(np.float64)


def _check_params(p, family: WarpFamily) -> np.ndarray:
    p = _as_float(p)
    if p.shape[-1:] != (family.dim,):
        raise ValueError(
            f"{family.value} warp expects {family.dim} parameters, "
            f"got trailing shape {p.shape[-1:]}"
        )
    return p


def identity(family, batch_shape=(), dtype=np.float64) -> np.ndarray:
    family = WarpFamily.coerce(family)
    return np.zeros(tuple(batch_shape) + (family.dim,), dtype=dtype)


def _scatter(p, family: WarpFamily) -> np.ndarray:
    d = np.zeros(p.shape[:-1] + (3, 3), dtype=p.dtype)
    rows, cols = family.positions
    d[..., rows, cols] = p
    return d


def to_matrix(p, family) -> np.ndarray:
    """Map parameters ``(..., d)`` to homogeneous matrices ``(..., 3, 3)``."""
    family = WarpFamily.coerce(family)
    p = _check_params(p, family)
    m = np.zeros(p.shape[:-1] + (3, 3), dtype=p.dtype)
    m[..., [0, 1, 2], [0, 1, 2]] = 1
    rows, cols = family.positions
    m[..., rows, cols] += p
    return m


def from_matrix(m, family) -> np.ndarray:
    """Inverse of :func:`to_matrix`.

    Homographies are first normalized so that ``m[2, 2] == 1``; affine and
    translation inputs must already have a ``(0, 0, 1)`` bottom row.
    """
    family = WarpFamily.coerce(family)
    m = _as_float(m)
    if m.shape[-2:] != (3, 3):
        raise ValueError(f"expected (..., 3, 3) matrices, got {m.shape}")
    if family is WarpFamily.HOMOGRAPHY:
        s = m[..., 2, 2]
        if np.any(np.abs(s) < _EPS_DEN) or not np.all(np.isfinite(m)):
            raise DegenerateWarpError(
                "homography cannot be normalized: m[2, 2] is zero or non-finite"
            )
        m = m / s[..., None, None]
    else:
        last = m[..., 2, :]
        if np.any(np.abs(last - np.array([0.0, 0.0, 1.0])) > 1e-9):
            raise DegenerateWarpError(
                f"{family.value} matrix must have bottom row (0, 0, 1)"
            )
    rows, cols = family.positions
    eye = np.eye(3, dtype=m.dtype)
    return m[..., rows, cols] - eye[rows, cols]


def compose(p_in, dp, family) -> np.ndarray:
    """Parameters of ``M(dp) @ M(p_in)`` (``p_in`` first, then ``dp``)."""
    family = WarpFamily.coerce(family)
    p_in = _check_params(p_in, family)
    dp = _check_params(dp, family)
    # work with M = I + D so that composing with p = 0 is exact: M(dp) M(p_in) = I + E
    rows, cols = family.positions
    d_in = _scatter(p_in, family)
    d_dp = _scatter(dp, family)
    e = d_in + d_dp + d_dp @ d_in
    s = 1 + e[..., 2, 2]
    if np.any(np.abs(s) < _EPS_DEN) or not np.all(np.isfinite(e)):
        raise DegenerateWarpError("composed homography cannot be normalized")
    # (I + E) / s - I, read at the parameter positions
    diag = (np.asarray(rows) == np.asarray(cols)).astype(e.dtype)
    return (e[..., rows, cols] - e[..., 2, 2, None] * diag) / s[..., None]


def invert(p, family) -> np.ndarray:
    family = WarpFamily.coerce(family)
    m = to_matrix(p, family)
    det = np.linalg.det(m)
    if np.any(np.abs(det) < _EPS_DEN) or not np.all(np.isfinite(det)):
        raise DegenerateWarpError("warp matrix is singular and cannot be inverted")
    minv = np.linalg.inv(m)
    if family is not WarpFamily.HOMOGRAPHY:
        # the inverse of an affine matrix is affine; drop round-off in the last row
        minv[..., 2, :] = (0.0, 0.0, 1.0)
    return from_matrix(minv, family)


def compose_jacobians(p_in, dp, family) -> tuple[np.ndarray, np.ndarray]:
    """Jacobians of ``compose(p_in, dp)`` w.r.t. ``p_in`` and ``dp``.

    Returns ``(J_pin, J_dp)``, each ``(..., d, d)`` with
    ``J[..., i, j] = d p_out[i] / d q[j]``.
    """
    family = WarpFamily.coerce(family)
    p_in = _check_params(p_in, family)
    dp = _check_params(dp, family)
    p_in, dp = np.broadcast_arrays(p_in, dp)
    if family is WarpFamily.TRANSLATION:
        eye = np.broadcast_to(np.eye(2, dtype=p_in.dtype), p_in.shape + (2,))
        return eye.copy(), eye.copy()
    if family is WarpFamily.AFFINE:
        return _affine_compose_jacobians(p_in, dp)
    return compose_jacobians_generic(p_in, dp, family)


def _affine_compose_jacobians(p_in, dp):
    batch = p_in.shape[:-1]
    eye3 = np.eye(3, dtype=p_in.dtype)
    # dp_out/dp_in = I + kron([[dp1, dp2], [dp4, dp5]], I3)
    blocks = np.stack(
        [np.stack([dp[..., 0], dp[..., 1]], -1), np.stack([dp[..., 3], dp[..., 4]], -1)],
        -2,
    )
    j_pin = np.einsum("...ab,ij->...aibj", blocks, eye3).reshape(batch + (6, 6))
    j_pin += np.eye(6, dtype=p_in.dtype)

    # dp_out/d(dp) = I + blockdiag(Q, Q), Q = [[p1, p4, 0], [p2, p5, 0], [p3, p6, 0]]
    q = np.zeros(batch + (3, 3), dtype=p_in.dtype)
    q[..., :, 0] = p_in[..., 0:3]
    q[..., :, 1] = p_in[..., 3:6]
    j_dp = np.zeros(batch + (6, 6), dtype=p_in.dtype)
    j_dp[..., 0:3, 0:3] = q
    j_dp[..., 3:6, 3:6] = q
    j_dp += np.eye(6, dtype=p_in.dtype)
    return j_pin, j_dp


def compose_jacobians_generic(p_in, dp, family) -> tuple[np.ndarray, np.ndarray]:
    """Quotient-rule Jacobians of the normalized product ``M(dp) @ M(p_in)``.

    Valid for every family; used directly for homographies and as a
    cross-check of the closed-form affine expressions.
    """
    family = WarpFamily.coerce(family)
    a = to_matrix(dp, family)
    b = to_matrix(p_in, family)
    n = a @ b
    s = n[..., 2, 2]
    rows, cols = family.positions
    d = family.dim
    nsel = n[..., rows, cols]
    batch = n.shape[:-2]
    j_pin = np.empty(batch + (d, d), dtype=n.dtype)
    j_dp = np.empty(batch + (d, d), dtype=n.dtype)
    for k, (r, c) in enumerate(zip(rows, cols)):
        # d/d dp_k: E_k @ B only fills row r with B[c, :]
        dn = np.zeros_like(n)
        dn[..., r, :] = b[..., c, :]
        j_dp[..., :, k] = (
            dn[..., rows, cols] / s[..., None]
            - nsel * (dn[..., 2, 2] / s**2)[..., None]
        )
        # d/d p_in_k: A @ E_k only fills column c with A[:, r]
        dn = np.zeros_like(n)
        dn[..., :, c] = a[..., :, r]
        j_pin[..., :, k] = (
            dn[..., rows, cols] / s[..., None]
            - nsel * (dn[..., 2, 2] / s**2)[..., None]
        )
    return j_pin, j_dp


def apply_matrix(m, points) -> np.ndarray:
    """Apply homogeneous matrices ``(..., 3, 3)`` to points ``(..., n, 2)``."""
    points = np.asarray(points)
    ones = np.ones(points.shape[:-1] + (1,), dtype=points.dtype)
    h = np.concatenate([points, ones], -1) @ np.swapaxes(m, -1, -2)
    den = h[..., 2:3]
    if np.any(np.abs(den) < _EPS_DEN):
        raise DegenerateWarpError("point mapped to infinity (zero homogeneous scale)")
    return h[..., :2] / den


def warp_corners(p, corners, family) -> np.ndarray:
    """Map corner points ``(..., 4, 2)`` through ``M(p)`` with perspective divide."""
    family = WarpFamily.coerce(family)
    return apply_matrix(to_matrix(p, family), corners)


def fit_warp_to_corners(src, dst, family, return_residual=False):
    """Fit warp parameters mapping ``src`` corners onto ``dst`` corners.

    Translation and affine warps are least-squares fits over the four
    correspondences; a homography is the exact 4-point DLT with the
    bottom-right entry fixed to 1. With ``return_residual`` the RMS
    corner residual of the fit is returned as well.
    """
    family = WarpFamily.coerce(family)
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape[-2:] != (4, 2) or dst.shape[-2:] != (4, 2):
        raise ValueError("corners must have shape (..., 4, 2)")
    src, dst = np.broadcast_arrays(src, dst)
    x, y = src[..., 0], src[..., 1]
    u, v = dst[..., 0], dst[..., 1]
    zeros = np.zeros_like(x)
    ones = np.ones_like(x)

    if family is WarpFamily.TRANSLATION:
        p = (dst - src).mean(axis=-2)
    elif family is WarpFamily.AFFINE:
        # unknowns are p directly: u - x = p1 x + p2 y + p3, v - y = p4 x + p5 y + p6
        rows_u = np.stack([x, y, ones, zeros, zeros, zeros], -1)
        rows_v = np.stack([zeros, zeros, zeros, x, y, ones], -1)
        a = np.concatenate([rows_u, rows_v], -2)
        rhs = np.concatenate([u - x, v - y], -1)
        ata = np.swapaxes(a, -1, -2) @ a
        cond = np.linalg.cond(ata)
        if np.any(~np.isfinite(cond)) or np.any(cond > 1e12):
            raise IllConditionedError("corner configuration is degenerate for an affine fit")
        p = np.linalg.solve(ata, (np.swapaxes(a, -1, -2) @ rhs[..., None]))[..., 0]
    else:
        rows_u = np.stack([x, y, ones, zeros, zeros, zeros, -x * u, -y * u], -1)
        rows_v = np.stack([zeros, zeros, zeros, x, y, ones, -x * v, -y * v], -1)
        a = np.concatenate([rows_u, rows_v], -2)
        rhs = np.concatenate([u, v], -1)
        cond = np.linalg.cond(a)
        if np.any(~np.isfinite(cond)) or np.any(cond > 1e12):
            raise IllConditionedError(
                "corner configuration is degenerate for a homography (collinear points?)"
            )
        h = np.linalg.solve(a, rhs[..., None])[..., 0]
        p = h - np.array([1, 0, 0, 0, 1, 0, 0, 0], dtype=h.dtype)
    if return_residual:
        fitted = warp_corners(p, src, family)
        resid = np.sqrt(np.mean(np.sum((fitted - dst) ** 2, -1), -1))
        return p, resid
    return p


CANONICAL_CORNERS = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])
