import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icstn.exceptions import DegenerateWarpError
from icstn.sampler import (
    FrameSpec,
    bilinear_backward,
    bilinear_sample,
    canonical_lattice,
    grid_jacobian,
    make_grid,
    warp_image,
)
from icstn.warp import WarpFamily, from_matrix, to_matrix


def bilinear_oracle(img, x, y):
    # scalar reference: zero outside, four-neighbour blend inside
    hs, ws = img.shape
    if not (0 <= x <= ws - 1 and 0 <= y <= hs - 1):
        return 0.0
    x0 = min(int(np.floor(x)), ws - 2)
    y0 = min(int(np.floor(y)), hs - 2)
    ax, ay = x - x0, y - y0
    return (
        img[y0, x0] * (1 - ax) * (1 - ay)
        + img[y0, x0 + 1] * ax * (1 - ay)
        + img[y0 + 1, x0] * (1 - ax) * ay
        + img[y0 + 1, x0 + 1] * ax * ay
    )


def blob(h, w, cx, cy, s):
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    return np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s**2))


def smooth_source(h, w):
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    return 0.5 + 0.4 * np.sin(xx / 7.0) * np.cos(yy / 9.0)


# grids
# -------------------------------------------------------------------------


def test_identity_grid_is_pixel_lattice():
    frame = FrameSpec.for_image(6, 9)
    grid = make_grid(np.zeros(6), "affine", (6, 9), frame, src_shape=(6, 9))
    yy, xx = np.mgrid[0:6, 0:9]
    assert np.allclose(grid.coords[..., 0], xx, atol=1e-14)
    assert np.allclose(grid.coords[..., 1], yy, atol=1e-14)
    assert grid.in_bounds_mask.all()


def test_translation_shifts_by_quarter_width():
    frame = FrameSpec.for_image(9, 9)
    grid = make_grid([0.5, 0.0], "translation", (9, 9), frame)
    ident = make_grid([0.0, 0.0], "translation", (9, 9), frame)
    # canonical 0.5 is a quarter of the 2-unit width; (9 - 1) / 4 = 2 pixels
    shift = grid.coords - ident.coords
    assert np.allclose(shift[..., 0], 2.0, atol=1e-14)
    assert np.allclose(shift[..., 1], 0.0, atol=1e-14)


def test_zoom_out_reaches_outside_crop():
    frame = FrameSpec.crop(25, 25, 50, 50)
    zoom = from_matrix(np.diag([2.0, 2.0, 1.0]), "affine")
    grid = make_grid(zoom, "affine", (50, 50), frame, src_shape=(100, 100))
    x, y = grid.coords[..., 0], grid.coords[..., 1]
    outside_crop = (x < 25) | (x > 74) | (y < 25) | (y > 74)
    assert outside_crop.mean() > 0.5
    assert grid.in_bounds_mask.mean() > 0.9


def test_frame_round_trip():
    frame = FrameSpec.crop(10.0, 5.0, 40, 30)
    corners = frame.to_pixels(np.array([[-1.0, -1.0], [1.0, 1.0]]))
    assert np.allclose(corners, [[10, 5], [49, 34]], atol=1e-14)
    assert np.allclose(frame.to_canonical(corners), [[-1, -1], [1, 1]], atol=1e-14)


def test_from_box_matches_crop():
    box = np.array([[38.0, 26.0], [87.0, 26.0], [87.0, 75.0], [38.0, 75.0]])
    a = FrameSpec.from_box(box).matrix
    b = FrameSpec.crop(38, 26, 50, 50).matrix
    assert np.allclose(a, b, atol=1e-12)


def test_degenerate_grid_raises():
    p = np.zeros(8)
    p[6] = 1.0  # denominator x + 1 vanishes on the left edge
    with pytest.raises(DegenerateWarpError):
        make_grid(p, "homography", (5, 5), FrameSpec.for_image(5, 5))
    with pytest.raises(ValueError):
        make_grid(np.zeros(6), "affine", (0, 5), FrameSpec.for_image(5, 5))


def test_canonical_lattice_corners():
    lat = canonical_lattice(3, 4)
    assert lat.shape == (12, 3)
    assert np.array_equal(lat[0], [-1, -1, 1])
    assert np.array_equal(lat[-1], [1, 1, 1])


# sampling
# -------------------------------------------------------------------------


def test_identity_warp_reproduces_source_exactly():
    rng = np.random.default_rng(0)
    # 2^k + 1 sides put every canonical lattice point on a binary fraction
    src = rng.random((2, 9, 17))
    for family in WarpFamily:
        assert np.array_equal(warp_image(src, np.zeros(family.dim), family), src)
    # other sides are exact up to the rounding of the lattice itself
    src = rng.random((2, 7, 11))
    for family in WarpFamily:
        assert np.max(np.abs(warp_image(src, np.zeros(family.dim), family) - src)) < 1e-12


def test_constant_image_stays_constant():
    rng = np.random.default_rng(1)
    src = np.full((1, 20, 20), 0.37)
    p = rng.normal(scale=0.05, size=8)
    out = warp_image(src, p, "homography", FrameSpec.crop(5, 5, 10, 10), (10, 10))
    assert np.allclose(out, 0.37, atol=1e-15)


def test_matches_scalar_oracle():
    rng = np.random.default_rng(2)
    img = rng.random((8, 8))
    p = np.array([0.1, -0.05, 0.2, 0.08, -0.1, -0.15, 0.02, -0.03])
    frame = FrameSpec.for_image(8, 8)
    grid = make_grid(p, "homography", (6, 7), frame, src_shape=(8, 8))
    out = bilinear_sample(img[None], grid)[0]
    for i in range(6):
        for j in range(7):
            x, y = grid.coords[i, j]
            assert abs(out[i, j] - bilinear_oracle(img, x, y)) < 1e-12


def test_integer_grid_sampling_exact():
    rng = np.random.default_rng(3)
    src = rng.random((1, 12, 12))
    # shift by exactly 2 pixels: canonical 2 * 2 / (12 - 1)
    out = warp_image(src, [4 / 11, 0.0], "translation")
    assert np.array_equal(out[0, :, :10], src[0, :, 2:])
    assert np.all(out[0, :, 10:] == 0)


def test_out_of_bounds_zero_filled():
    src = np.ones((1, 10, 10))
    out = warp_image(src, [1.0, 0.0], "translation")
    mask = make_grid([1.0, 0.0], "translation", (10, 10), FrameSpec.for_image(10, 10), (10, 10)).in_bounds_mask
    assert np.array_equal(out[0] == 1.0, mask)
    assert 0 < mask.mean() < 1


def test_batched_grid_matches_individual():
    rng = np.random.default_rng(4)
    src = rng.random((1, 15, 15))
    p = rng.normal(scale=0.1, size=(4, 6))
    frame = FrameSpec.for_image(15, 15)
    batched = warp_image(src, p, "affine", frame, (9, 9))
    for b in range(4):
        assert np.array_equal(batched[b], warp_image(src, p[b], "affine", frame, (9, 9)))
    per_image = warp_image(np.stack([src] * 4), p, "affine", frame, (9, 9))
    assert np.array_equal(per_image, batched)


@settings(max_examples=40, deadline=None)
@given(st.floats(-0.3, 0.3), st.floats(-0.3, 0.3), st.floats(0.7, 1.3))
def test_sampling_is_deterministic_and_finite(tx, ty, s):
    src = smooth_source(20, 20)[None]
    p = np.array([s - 1, 0.0, tx, 0.0, s - 1, ty])
    a = warp_image(src, p, "affine")
    assert np.all(np.isfinite(a))
    assert np.array_equal(a, warp_image(src, p, "affine"))


# backward
# -------------------------------------------------------------------------


def test_zero_grad_out_gives_zero():
    rng = np.random.default_rng(5)
    src = rng.random((1, 10, 10))
    _, cache = warp_image(src, rng.normal(scale=0.05, size=6), "affine", return_cache=True)
    gs, gp = bilinear_backward(np.zeros((1, 10, 10)), cache)
    assert not gs.any() and not gp.any()


def test_grad_src_hand_computed():
    # one output pixel sampling at source (x, y) = (1.25, 2.75)
    src = np.zeros((1, 5, 5))
    frame = FrameSpec(np.array([[0.0, 0.0, 1.25], [0.0, 0.0, 2.75], [0.0, 0.0, 1.0]]))
    grid = make_grid(np.zeros(6), "affine", (1, 1), frame, src_shape=(5, 5))
    _, cache = bilinear_sample(src, grid, return_cache=True)
    gs, _ = bilinear_backward(np.ones((1, 1, 1)), cache, need_p=False)
    expected = np.zeros((5, 5))
    expected[2, 1] = 0.75 * 0.25
    expected[2, 2] = 0.25 * 0.25
    expected[3, 1] = 0.75 * 0.75
    expected[3, 2] = 0.25 * 0.75
    assert np.allclose(gs[0], expected, atol=1e-15)
    assert sorted(expected[expected > 0]) == [0.0625, 0.1875, 0.1875, 0.5625]


def test_grad_src_matches_finite_differences():
    rng = np.random.default_rng(6)
    src = rng.random((2, 8, 8))
    p = rng.normal(scale=0.1, size=6)
    w = rng.normal(size=(2, 8, 8))
    _, cache = warp_image(src, p, "affine", return_cache=True)
    gs, _ = bilinear_backward(w, cache, need_p=False)
    # the sample is linear in src, so central differences are exact up to round-off
    h = 1e-6
    for idx in [(0, 3, 4), (1, 0, 0), (1, 7, 7), (0, 5, 2)]:
        e = np.zeros_like(src)
        e[idx] = h
        num = (np.sum(w * warp_image(src + e, p, "affine")) - np.sum(w * warp_image(src - e, p, "affine"))) / (2 * h)
        assert abs(num - gs[idx]) < 1e-8


@pytest.mark.parametrize("family", ["translation", "affine", "homography"])
def test_grad_p_matches_finite_differences(family):
    family = WarpFamily.coerce(family)
    rng = np.random.default_rng(7)
    src = blob(60, 60, 31.3, 28.7, 8.0)[None]
    frame = FrameSpec.crop(15, 15, 30, 30)
    w = rng.normal(size=(1, 30, 30))
    p = rng.normal(scale=0.05, size=family.dim)
    if family is WarpFamily.HOMOGRAPHY:
        p[6:] *= 0.2

    def loss(q):
        return np.sum(w * warp_image(src, q, family, frame, (30, 30)))

    _, cache = warp_image(src, p, family, frame, (30, 30), return_cache=True)
    _, gp = bilinear_backward(w, cache, need_src=False)
    h = 1e-6
    num = np.array([(loss(p + h * e) - loss(p - h * e)) / (2 * h) for e in np.eye(family.dim)])
    assert np.linalg.norm(gp - num) / np.linalg.norm(num) < 1e-4


def test_grad_p_agrees_with_grid_jacobian():
    # second route: image gradient at each site times d(coords)/dp
    rng = np.random.default_rng(8)
    src = blob(40, 40, 20.0, 19.0, 6.0)[None]
    p = rng.normal(scale=0.05, size=8)
    p[6:] *= 0.2
    frame = FrameSpec.crop(10, 10, 20, 20)
    w = rng.normal(size=(1, 20, 20))
    grid = make_grid(p, "homography", (20, 20), frame, src_shape=(40, 40))
    _, cache = bilinear_sample(src, grid, return_cache=True)
    _, gp = bilinear_backward(w, cache, need_src=False)
    jac = grid_jacobian(grid)
    ix = np.zeros((20, 20))
    iy = np.zeros((20, 20))
    for i in range(20):
        for j in range(20):
            x, y = grid.coords[i, j]
            x0, y0 = int(x), int(y)
            ax, ay = x - x0, y - y0
            im = src[0]
            ix[i, j] = (1 - ay) * (im[y0, x0 + 1] - im[y0, x0]) + ay * (im[y0 + 1, x0 + 1] - im[y0 + 1, x0])
            iy[i, j] = (1 - ax) * (im[y0 + 1, x0] - im[y0, x0]) + ax * (im[y0 + 1, x0 + 1] - im[y0, x0 + 1])
    expected = np.einsum("ij,ijk->k", w[0] * ix, jac[..., 0, :]) + np.einsum("ij,ijk->k", w[0] * iy, jac[..., 1, :])
    assert np.allclose(gp, expected, rtol=1e-10, atol=1e-12)


def test_grad_out_of_bounds_sites_is_zero():
    src = blob(10, 10, 5, 5, 2)[None]
    # shifted entirely off the source
    _, cache = warp_image(src, [5.0, 0.0], "translation", return_cache=True)
    gs, gp = bilinear_backward(np.ones((1, 10, 10)), cache)
    assert not gs.any() and not gp.any()


def test_batched_grad_p():
    rng = np.random.default_rng(9)
    src = blob(30, 30, 14, 15, 5)[None]
    p = rng.normal(scale=0.05, size=(3, 6))
    w = rng.normal(size=(3, 1, 30, 30))
    _, cache = warp_image(src, p, "affine", return_cache=True)
    gs, gp = bilinear_backward(w, cache)
    assert gp.shape == (3, 6)
    assert gs.shape == src.shape
    total = np.zeros_like(src)
    for b in range(3):
        _, c1 = warp_image(src, p[b], "affine", return_cache=True)
        s1, g1 = bilinear_backward(w[b], c1)
        assert np.allclose(g1, gp[b], rtol=1e-12, atol=1e-12)
        total += s1
    assert np.allclose(total, gs, atol=1e-12)


# geometry preservation
# -------------------------------------------------------------------------


def test_geometry_preserved_by_composing_parameters():
    src = smooth_source(100, 100)
    frame = FrameSpec.crop(25, 25, 50, 50)
    zoom = np.diag([1.5, 1.5, 1.0])
    # single sample of the full source with the composed warp
    path_a = warp_image(src[None], from_matrix(zoom, "affine"), "affine", frame, (50, 50))[0]
    # crop first, then zoom out the crop
    crop = warp_image(src[None], np.zeros(6), "affine", frame, (50, 50))
    path_b = warp_image(crop, from_matrix(zoom, "affine"), "affine")[0]

    assert np.mean(path_a == 0) < 0.01
    assert np.mean(path_b == 0) > 0.20
    # ground truth: the analytic image at the mapped points
    grid = make_grid(from_matrix(zoom, "affine"), "affine", (50, 50), frame)
    x, y = grid.coords[..., 0], grid.coords[..., 1]
    truth = 0.5 + 0.4 * np.sin(x / 7.0) * np.cos(y / 9.0)
    assert np.max(np.abs(path_a - truth)) < 0.02
    assert np.allclose(to_matrix(from_matrix(zoom, "affine"), "affine"), zoom)
