"""Compiled inner loops for the sampler.

Sites are generated on the fly from ``g (B, 3, 3)``, the map from canonical
lattice coordinates ``lat (P, 3)`` to homogeneous source pixels, so no
per-site coordinate array is ever materialized. Sources are
``(Bs, C, Hs, Ws)`` with ``Bs`` either 1 (shared) or ``B``.
"""

import numba


@numba.njit(cache=True, error_model="numpy")
def coords_kernel(g, lat, homog, coords):
    nb, npts = homog.shape[0], homog.shape[1]
    for b in range(nb):
        for i in range(npts):
            u, v = lat[i, 0], lat[i, 1]
            n0 = g[b, 0, 0] * u + g[b, 0, 1] * v + g[b, 0, 2]
            n1 = g[b, 1, 0] * u + g[b, 1, 1] * v + g[b, 1, 2]
            n2 = g[b, 2, 0] * u + g[b, 2, 1] * v + g[b, 2, 2]
            homog[b, i, 0] = n0
            homog[b, i, 1] = n1
            homog[b, i, 2] = n2
            x, y, _ = _site(g, b, u, v)  # same arithmetic as the sampler, so masks agree exactly
            coords[b, i, 0] = x
            coords[b, i, 1] = y


@numba.njit(cache=True, error_model="numpy")
def _site(g, b, u, v):
    # affine rows skip the per-site division
    if g[b, 2, 0] == 0.0 and g[b, 2, 1] == 0.0:
        r = 1.0 / g[b, 2, 2]
    else:
        r = 1.0 / (g[b, 2, 0] * u + g[b, 2, 1] * v + g[b, 2, 2])
    x = (g[b, 0, 0] * u + g[b, 0, 1] * v + g[b, 0, 2]) * r
    y = (g[b, 1, 0] * u + g[b, 1, 1] * v + g[b, 1, 2]) * r
    return x, y, r


@numba.njit(cache=True, error_model="numpy")
def _cell(x, y, hs, ws):
    # callers guarantee 0 <= x <= ws - 1 and 0 <= y <= hs - 1, so truncation is floor
    x0 = min(int(x), ws - 2)
    y0 = min(int(y), hs - 2)
    return x0, y0, x - x0, y - y0


@numba.njit(cache=True, error_model="numpy")
def sample_kernel(src, g, lat, out, site_grads, want_grads):
    """Bilinear samples; with ``want_grads`` also ``dI/dn`` per site into ``site_grads (B, C, P, 3)``.

    ``n`` is the homogeneous source point, so ``dI/dn = r (Ix, Iy, -(Ix x + Iy y))``
    with ``r = 1 / n_2``; the warp backward pass then needs no resampling.
    """
    bs, nc, hs, ws = src.shape
    nb, npts = out.shape[0], out.shape[2]
    for b in range(nb):
        sb = b if bs > 1 else 0
        for c in range(nc):
            im = src[sb, c]
            o = out[b, c]
            for i in range(npts):
                x, y, r = _site(g, b, lat[i, 0], lat[i, 1])
                if not (x >= 0 and x <= ws - 1 and y >= 0 and y <= hs - 1):
                    o[i] = 0.0
                    if want_grads:
                        site_grads[b, c, i, 0] = 0.0
                        site_grads[b, c, i, 1] = 0.0
                        site_grads[b, c, i, 2] = 0.0
                    continue
                x0, y0, wx, wy = _cell(x, y, hs, ws)
                v00 = im[y0, x0]
                v01 = im[y0, x0 + 1]
                v10 = im[y0 + 1, x0]
                v11 = im[y0 + 1, x0 + 1]
                # convex form: weights of exactly 0 or 1 return the neighbour itself
                top = (1 - wx) * v00 + wx * v01
                bot = (1 - wx) * v10 + wx * v11
                o[i] = (1 - wy) * top + wy * bot
                if want_grads:
                    ix = (1 - wy) * (v01 - v00) + wy * (v11 - v10)
                    iy = bot - top
                    site_grads[b, c, i, 0] = ix * r
                    site_grads[b, c, i, 1] = iy * r
                    site_grads[b, c, i, 2] = -(ix * x + iy * y) * r


@numba.njit(cache=True, error_model="numpy")
def backward_src_kernel(g, lat, grad_out, grad_src):
    """Scatter ``grad_out`` onto the four bilinear neighbours of every in-bounds site."""
    bs, nc, hs, ws = grad_src.shape
    nb, npts = grad_out.shape[0], grad_out.shape[2]
    for b in range(nb):
        sb = b if bs > 1 else 0
        for c in range(nc):
            gs = grad_src[sb, c]
            go = grad_out[b, c]
            for i in range(npts):
                x, y, _ = _site(g, b, lat[i, 0], lat[i, 1])
                if not (x >= 0 and x <= ws - 1 and y >= 0 and y <= hs - 1):
                    continue
                x0, y0, wx, wy = _cell(x, y, hs, ws)
                d = go[i]
                gs[y0, x0] += d * (1 - wx) * (1 - wy)
                gs[y0, x0 + 1] += d * wx * (1 - wy)
                gs[y0 + 1, x0] += d * (1 - wx) * wy
                gs[y0 + 1, x0 + 1] += d * wx * wy


@numba.njit(cache=True, error_model="numpy")
def backward_g_kernel(site_grads, lat, grad_out, grad_g):
    """``dL/dG[b] = sum_i dL/dI_i * dI_i/dn_i (outer) lat_i`` per batch element."""
    nb, nc, npts = grad_out.shape
    for b in range(nb):
        a00 = a01 = a02 = a10 = a11 = a12 = a20 = a21 = a22 = 0.0
        for c in range(nc):
            go = grad_out[b, c]
            sg = site_grads[b, c]
            for i in range(npts):
                d = go[i]
                e0 = d * sg[i, 0]
                e1 = d * sg[i, 1]
                e2 = d * sg[i, 2]
                u, v = lat[i, 0], lat[i, 1]
                a00 += e0 * u
                a01 += e0 * v
                a02 += e0
                a10 += e1 * u
                a11 += e1 * v
                a12 += e1
                a20 += e2 * u
                a21 += e2 * v
                a22 += e2
        grad_g[b, 0, 0] = a00
        grad_g[b, 0, 1] = a01
        grad_g[b, 0, 2] = a02
        grad_g[b, 1, 0] = a10
        grad_g[b, 1, 1] = a11
        grad_g[b, 1, 2] = a12
        grad_g[b, 2, 0] = a20
        grad_g[b, 2, 1] = a21
        grad_g[b, 2, 2] = a22
