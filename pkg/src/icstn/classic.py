"""Classical alignment: Lucas-Kanade, inverse compositional LK, and SDM.

All three align a source image (through a :class:`FrameSpec`) to a template
defined at the identity warp, so the correct answer is always ``p = 0`` in
the canonical frame of the reference box.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .checkpoint import load_tensors, save_tensors
from .data import PerturbConfig, draw_perturbations
from .exceptions import IllConditionedError
from .metrics import corner_error
from .sampler import FrameSpec, bilinear_sample, grid_jacobian, make_grid
from .warp import WarpFamily, compose, invert

_COND_LIMIT = 1e12


def _as_chw(image):
    image = np.asarray(image, dtype=np.float64)
    return image[None] if image.ndim == 2 else image


def image_gradients(image):
    """Central differences (one-sided at the borders) along x and y, per channel."""
    image = _as_chw(image)
    gy, gx = np.gradient(image, axis=(1, 2))
    return gx, gy


def _steepest_descent(gx, gy, jac):
    # gx, gy: (C, H, W); jac: (H, W, 2, d) -> (C*H*W, d)
    sd = gx[..., None] * jac[None, :, :, 0, :] + gy[..., None] * jac[None, :, :, 1, :]
    return sd.reshape(-1, jac.shape[-1])


def steepest_descent_image(template, family) -> np.ndarray:
    """``dT(0)/dp``: template gradients times the warp Jacobian at the identity.

    Rows follow ``template.ravel()`` order for a ``(C, H, W)`` template.
    """
    family = WarpFamily.coerce(family)
    template = _as_chw(template)
    _, h, w = template.shape
    grid = make_grid(np.zeros(family.dim), family, (h, w), FrameSpec.for_image(h, w))
    gx, gy = image_gradients(template)
    return _steepest_descent(gx, gy, grid_jacobian(grid))


def _relative_ridge(ridge, scale):
    # constant features have no scale to be relative to; fall back to an absolute ridge
    return ridge * scale if scale > 0 else ridge


def _check_conditioning(a, ridge, what):
    # a positive ridge is the caller's regularization choice; only the bare system is policed
    if ridge > 0:
        return
    cond = np.linalg.cond(a)
    if not np.isfinite(cond) or cond > _COND_LIMIT:
        raise IllConditionedError(f"{what} is singular (cond={cond:.3g}); use ridge > 0")


def _solve_normal(a, rhs, ridge, what):
    """Solve ``(A^T A + ridge * mean(diag)) x = A^T rhs``."""
    h = a.T @ a
    if ridge > 0:
        h = h + _relative_ridge(ridge, np.mean(np.diag(h))) * np.eye(h.shape[0])
    _check_conditioning(h, ridge, what)
    return np.linalg.solve(h, a.T @ rhs)


@dataclass
class AlignTrace:
    residual_norms: list = field(default_factory=list)
    step_norms: list = field(default_factory=list)
    params: list = field(default_factory=list)

    @property
    def iterations(self) -> int:
        return len(self.step_norms)


def lk_align(source, template, p0, family, frame: FrameSpec | None = None, max_iters=50, tol=1e-4):
    """Forward-additive Lucas-Kanade.

    Every iteration samples the source and its gradient images at the
    current warp, rebuilds the steepest-descent image there and takes the
    Gauss-Newton step ``p <- p + dp``. Sites that fall outside the source are
    excluded from the fit.
    """
    family = WarpFamily.coerce(family)
    source = _as_chw(source)
    template = _as_chw(template)
    if source.shape[0] != template.shape[0]:
        raise ValueError("source and template must have the same number of channels")
    if frame is None:
        frame = FrameSpec.for_image(*source.shape[-2:])
    out_size = template.shape[-2:]
    gx_src, gy_src = image_gradients(source)
    stacked = np.concatenate([source, gx_src, gy_src], 0)
    c = source.shape[0]
    t = template.ravel()
    p = np.array(p0, dtype=np.float64)
    trace = AlignTrace()
    for _ in range(max_iters):
        grid = make_grid(p, family, out_size, frame, src_shape=source.shape[-2:])
        sampled = bilinear_sample(stacked, grid)
        warped, gx, gy = sampled[:c], sampled[c : 2 * c], sampled[2 * c :]
        sd = _steepest_descent(gx, gy, grid_jacobian(grid))
        mask = np.broadcast_to(grid.in_bounds_mask, warped.shape).ravel()
        err = t - warped.ravel()
        trace.residual_norms.append(float(np.linalg.norm(err[mask])))
        dp = _solve_normal(sd[mask], err[mask], 0.0, "Lucas-Kanade step")
        p = p + dp
        trace.params.append(p.copy())
        trace.step_norms.append(float(np.linalg.norm(dp)))
        if trace.step_norms[-1] < tol:
            break
    return p, trace


@dataclass(frozen=True)
class TemplateModel:
    template: np.ndarray  # (C, H, W)
    steepest_descent: np.ndarray  # (C*H*W, d)
    pseudo_inverse: np.ndarray  # (d, C*H*W)
    family: WarpFamily


def iclk_precompute(template, family, ridge=0.0) -> TemplateModel:
    """Fixed steepest-descent image and its (optionally ridge-damped) pseudo-inverse.

    ``ridge`` is relative to the mean diagonal of the normal matrix.
    """
    family = WarpFamily.coerce(family)
    template = np.array(_as_chw(template))
    sd = steepest_descent_image(template, family)
    h = sd.T @ sd
    if ridge > 0:
        h = h + _relative_ridge(ridge, np.mean(np.diag(h))) * np.eye(family.dim)
    _check_conditioning(h, ridge, "steepest-descent normal matrix")
    pinv = np.linalg.solve(h, sd.T)
    for arr in (template, sd, pinv):
        arr.setflags(write=False)
    return TemplateModel(template, sd, pinv, family)


def iclk_align(source, model: TemplateModel, p0, frame: FrameSpec | None = None, max_iters=50, tol=1e-4):
    """Inverse compositional LK: ``dp = pinv (I(p) - T)``, ``p <- compose(p, invert(dp))``."""
    source = _as_chw(source)
    family = model.family
    if frame is None:
        frame = FrameSpec.for_image(*source.shape[-2:])
    out_size = model.template.shape[-2:]
    t = model.template.ravel()
    p = np.array(p0, dtype=np.float64)
    trace = AlignTrace()
    for _ in range(max_iters):
        grid = make_grid(p, family, out_size, frame, src_shape=source.shape[-2:])
        err = bilinear_sample(source, grid).ravel() - t
        trace.residual_norms.append(float(np.linalg.norm(err)))
        dp = model.pseudo_inverse @ err
        p = compose(p, invert(dp, family), family)
        trace.params.append(p.copy())
        trace.step_norms.append(float(np.linalg.norm(dp)))
        if trace.step_norms[-1] < tol:
            break
    return p, trace


# -- supervised descent ---------------------------------------------------------


@dataclass(frozen=True)
class LinearRegressor:
    R: np.ndarray  # (d, D)
    b: np.ndarray  # (d,)

    def predict(self, features):
        return features @ self.R.T + self.b


@dataclass
class SdmCascade:
    stages: list
    family: WarpFamily
    out_size: tuple
    train_errors: list = field(default_factory=list)  # mean corner error before/after each stage


def ridge_fit(features, targets, ridge) -> LinearRegressor:
    """Least squares ``targets ~ R features + b`` with an unpenalized bias.

    ``ridge`` is relative to the mean diagonal of the centred Gram matrix;
    with ``ridge == 0`` a singular system raises :class:`IllConditionedError`.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    xm, ym = x.mean(0), y.mean(0)
    xc, yc = x - xm, y - ym
    n, dim = xc.shape
    if n >= dim:
        gram = xc.T @ xc
        lam = _relative_ridge(ridge, np.mean(np.diag(gram)))
        a = gram + lam * np.eye(dim)
        rhs = xc.T @ yc
    else:
        # kernel form: R^T = Xc^T (Xc Xc^T + lam I)^-1 Yc
        gram = xc @ xc.T
        lam = _relative_ridge(ridge, np.trace(gram) / dim)
        a = gram + lam * np.eye(n)
        rhs = yc
    _check_conditioning(a, ridge, "regression system")
    sol = np.linalg.solve(a, rhs)
    r = (sol if n >= dim else xc.T @ sol).T
    return LinearRegressor(r, ym - r @ xm)


def _features(source, p, family, frame, out_size):
    grid = make_grid(p, family, out_size, frame, src_shape=np.shape(source)[-2:])
    return bilinear_sample(source, grid).reshape(len(p), -1)


def sdm_apply(cascade: SdmCascade, source, p0, frame: FrameSpec, n_stages=None):
    """Run the first ``n_stages`` regressors (all by default) from ``p0``."""
    source = _as_chw(source)
    p = np.array(p0, dtype=np.float64)
    single = p.ndim == 1
    if single:
        p = p[None]
    for stage in cascade.stages[:n_stages]:
        dp = stage.predict(_features(source, p, cascade.family, frame, cascade.out_size))
        p = compose(p, invert(dp, cascade.family), cascade.family)
    return p[0] if single else p


def sdm_train(
    images,
    boxes,
    family,
    stages=3,
    perturb: PerturbConfig | None = None,
    ridge=1e-3,
    samples_per_image=1000,
    out_size=(50, 50),
) -> SdmCascade:
    """Train a cascade of linear regressors on Monte-Carlo displacements.

    Stage ``k`` is fit on fresh perturbations that were first pushed through
    stages ``1..k-1``; each regressor predicts the remaining displacement
    from raw pixels, which is then removed by inverse composition.
    """
    family = WarpFamily.coerce(family)
    if stages < 1:
        raise ValueError("stages must be >= 1")
    if perturb is None:
        perturb = PerturbConfig(family, 2.5)
    rng = np.random.default_rng(perturb.seed)
    cfg = PerturbConfig(family, perturb.sigma_corner, perturb.sigma_translation, perturb.seed)
    images = [_as_chw(im) for im in images]
    frames = [FrameSpec.from_box(box) for box in boxes]
    cascade = SdmCascade([], family, tuple(out_size))
    for k in range(stages):
        feats, targets, errs_before, p_all, owners = [], [], [], [], []
        for i, (src, frame, box) in enumerate(zip(images, frames, boxes)):
            p = draw_perturbations(box, cfg, rng, samples_per_image)
            if cascade.stages:
                p = sdm_apply(cascade, src, p, frame)
            feats.append(_features(src, p, family, frame, cascade.out_size))
            targets.append(p)  # ground truth is the identity: the displacement is p itself
            errs_before.append(corner_error(p, family, frame))
            p_all.append(p)
            owners.append(i)
        reg = ridge_fit(np.concatenate(feats), np.concatenate(targets), ridge)
        cascade.stages.append(reg)
        errs_after = []
        for p, f, i in zip(p_all, feats, owners):
            p_new = compose(p, invert(reg.predict(f), family), family)
            errs_after.append(corner_error(p_new, family, frames[i]))
        if k == 0:
            cascade.train_errors.append(float(np.mean(np.concatenate(errs_before))))
        cascade.train_errors.append(float(np.mean(np.concatenate(errs_after))))
    return cascade


def cascade_to_tensors(cascade: SdmCascade) -> dict:
    tensors = {
        "family_dim": np.array([cascade.family.dim], dtype=np.float64),
        "out_size": np.array(cascade.out_size, dtype=np.float64),
        "train_errors": np.array(cascade.train_errors, dtype=np.float64),
    }
    for k, stage in enumerate(cascade.stages):
        tensors[f"stage{k}.R"] = stage.R
        tensors[f"stage{k}.b"] = stage.b
    return tensors


def cascade_from_tensors(tensors: dict) -> SdmCascade:
    family = WarpFamily.from_dim(int(tensors["family_dim"][0]))
    stages = []
    while f"stage{len(stages)}.R" in tensors:
        k = len(stages)
        stages.append(LinearRegressor(tensors[f"stage{k}.R"], tensors[f"stage{k}.b"]))
    out_size = tuple(int(v) for v in tensors["out_size"])
    return SdmCascade(stages, family, out_size, list(tensors.get("train_errors", [])))


def save_cascade(path, cascade: SdmCascade):
    save_tensors(path, cascade_to_tensors(cascade))


def load_cascade(path) -> SdmCascade:
    return cascade_from_tensors(load_tensors(path))


def save_template_model(path, model: TemplateModel):
    save_tensors(
        path,
        {
            "family_dim": np.array([model.family.dim], dtype=np.float64),
            "template": model.template,
            "steepest_descent": model.steepest_descent,
            "pseudo_inverse": model.pseudo_inverse,
        },
    )


def load_template_model(path) -> TemplateModel:
    t = load_tensors(path)
    arrays = [t["template"], t["steepest_descent"], t["pseudo_inverse"]]
    for arr in arrays:
        arr.setflags(write=False)
    return TemplateModel(*arrays, WarpFamily.from_dim(int(t["family_dim"][0])))


# -- estimator wrappers -----------------------------------------------------------


class _TemplateAligner(BaseEstimator):
    def _fit_template(self, X, box):
        source = _as_chw(X)
        if box is None:
            h, w = source.shape[-2:]
            box = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)
        self.source_ = source
        self.box_ = np.asarray(box, dtype=np.float64)
        self.frame_ = FrameSpec.from_box(self.box_)
        grid = make_grid(np.zeros(WarpFamily.coerce(self.family).dim), self.family, tuple(self.out_size), self.frame_)
        self.template_ = bilinear_sample(source, grid)

    def predict(self, P0):
        """Aligned warps for initial warps ``P0`` of shape ``(n, d)``."""
        check_is_fitted(self, "template_")
        P0 = np.atleast_2d(np.asarray(P0, dtype=np.float64))
        return np.stack([self.align(p)[0] for p in P0])

    def score(self, P0):
        """Negative mean corner error in source pixels."""
        return -float(np.mean(corner_error(self.predict(P0), self.family, self.frame_)))


class LucasKanade(_TemplateAligner):
    """Forward-additive LK aligning warped crops of one image to its reference box."""

    def __init__(self, family="affine", out_size=(50, 50), max_iters=50, tol=1e-4):
        self.family = family
        self.out_size = out_size
        self.max_iters = max_iters
        self.tol = tol

    def fit(self, X, box=None):
        self._fit_template(X, box)
        return self

    def align(self, p0):
        return lk_align(self.source_, self.template_, p0, self.family, self.frame_, self.max_iters, self.tol)


class InverseCompositionalLK(_TemplateAligner):
    """IC-LK with a regressor precomputed once on the template."""

    def __init__(self, family="affine", out_size=(50, 50), max_iters=50, tol=1e-4, ridge=0.0):
        self.family = family
        self.out_size = out_size
        self.max_iters = max_iters
        self.tol = tol
        self.ridge = ridge

    def fit(self, X, box=None):
        self._fit_template(X, box)
        self.model_ = iclk_precompute(self.template_, self.family, self.ridge)
        return self

    def align(self, p0):
        return iclk_align(self.source_, self.model_, p0, self.frame_, self.max_iters, self.tol)


class SupervisedDescent(_TemplateAligner):
    """SDM cascade learned from perturbations of the reference box."""

    def __init__(self, family="affine", out_size=(50, 50), n_stages=3, sigma=2.5, n_samples=1000, ridge=1e-3, seed=0):
        self.family = family
        self.out_size = out_size
        self.n_stages = n_stages
        self.sigma = sigma
        self.n_samples = n_samples
        self.ridge = ridge
        self.seed = seed

    def fit(self, X, box=None):
        self._fit_template(X, box)
        cfg = PerturbConfig(self.family, self.sigma, self.sigma, self.seed)
        self.cascade_ = sdm_train(
            [self.source_], [self.box_], self.family, self.n_stages, cfg, self.ridge, self.n_samples, self.out_size
        )
        return self

    def align(self, p0):
        return sdm_apply(self.cascade_, self.source_, p0, self.frame_), None

    def predict(self, P0):
        check_is_fitted(self, "cascade_")
        return sdm_apply(self.cascade_, self.source_, np.atleast_2d(P0), self.frame_)
