"""scikit-learn style wrappers around :class:`AlignmentPipeline` training."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted
from threadpoolctl import threadpool_limits

from .arch import parse_arch
from .data import PerturbConfig, make_mnist_stream, make_planar_stream
from .metrics import corner_error
from .networks import AlignmentPipeline
from .nn import SgdConfig, sgd_step, softmax, softmax_cross_entropy
from .sampler import FrameSpec
from .warp import WarpFamily


def _as_nchw(X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"expected images of shape (n, H, W) or (n, C, H, W), got {X.shape}")
    return X


class STNClassifier(ClassifierMixin, BaseEstimator):
    """Classifier behind optional alignment modules, trained on randomly perturbed inputs.

    ``fit`` warps every minibatch by fresh corner noise of ``sigma`` pixels,
    so the training set should hold clean, centred images. ``predict`` takes
    images plus optional initial warps ``P0`` (identity when omitted).
    """

    def __init__(
        self,
        arch="[FC(8)]x4 -> conv(9x9,3)-FC(10)",
        variant=None,
        family="homography",
        sigma=3.5,
        sigma_t=None,
        iterations=1000,
        batch=100,
        lr_class=0.01,
        lr_geo=1e-4,
        seed=0,
    ):
        self.arch = arch
        self.variant = variant
        self.family = family
        self.sigma = sigma
        self.sigma_t = sigma_t
        self.iterations = iterations
        self.batch = batch
        self.lr_class = lr_class
        self.lr_geo = lr_geo
        self.seed = seed

    def fit(self, X, y):
        X = _as_nchw(X)
        self.classes_, codes = np.unique(np.asarray(y), return_inverse=True)
        spec = parse_arch(self.arch, self.family, self.variant, X.shape[1:])
        self.pipeline_ = AlignmentPipeline(spec, seed=self.seed)
        sgd = SgdConfig({"geo": self.lr_geo, "class": self.lr_class}, self.batch, self.iterations, self.seed)
        cfg = PerturbConfig(self.family, self.sigma, self.sigma_t, self.seed)
        stream = make_mnist_stream(X, codes, cfg, self.batch, n_batches=self.iterations)
        self.loss_curve_ = []
        with threadpool_limits(1):
            for b in stream:
                trace = self.pipeline_.forward(b.source, b.p_init, b.frame)
                loss, grad = softmax_cross_entropy(trace.logits, b.labels)
                if not np.isfinite(loss):
                    raise FloatingPointError("training diverged; lower the learning rates")
                self.pipeline_.backward(trace, grad_logits=grad)
                sgd_step(self.pipeline_.param_groups(), sgd)
                self.loss_curve_.append(loss)
        return self

    def _trace(self, X, P0):
        check_is_fitted(self, "pipeline_")
        X = _as_nchw(X)
        return self.pipeline_.forward(X, P0, FrameSpec.for_image(*X.shape[-2:]))

    def predict_proba(self, X, P0=None):
        return softmax(self._trace(X, P0).logits)

    def predict(self, X, P0=None):
        return self.classes_[np.argmax(self._trace(X, P0).logits, axis=1)]

    def transform(self, X, P0=None):
        """Aligned images as seen by the classifier."""
        return self._trace(X, P0).aligned


class STNAligner(BaseEstimator):
    """Geometric predictor trained to undo perturbations of one reference box.

    ``fit(source, box)`` trains on warps drawn around ``box``; ``predict(P0)``
    returns the refined warps, which should be close to the identity.
    """

    def __init__(
        self, arch="[FC(6)]x4", variant=None, family="affine", sigma=7.5, sigma_t=None,
        out_size=(50, 50), iterations=1000, batch=100, lr=1e-4, seed=0,
    ):  # fmt: skip
        self.arch = arch
        self.variant = variant
        self.family = family
        self.sigma = sigma
        self.sigma_t = sigma_t
        self.out_size = out_size
        self.iterations = iterations
        self.batch = batch
        self.lr = lr
        self.seed = seed

    def fit(self, X, box):
        source = np.asarray(X, dtype=np.float64)
        if source.ndim == 2:
            source = source[None]
        self.source_ = source
        self.frame_ = FrameSpec.from_box(box)
        spec = parse_arch(self.arch, self.family, self.variant, (source.shape[0], *self.out_size))
        self.pipeline_ = AlignmentPipeline(spec, seed=self.seed)
        sgd = SgdConfig({"geo": self.lr}, self.batch, self.iterations, self.seed)
        cfg = PerturbConfig(self.family, self.sigma, self.sigma_t, self.seed)
        stream = make_planar_stream(source, box, cfg, self.batch, self.out_size, self.iterations, render=False)
        self.loss_curve_ = []
        with threadpool_limits(1):
            for b in stream:
                trace = self.pipeline_.forward(source, b.p_init, self.frame_)
                p = trace.p_final
                self.pipeline_.backward(trace, grad_p_final=2.0 * p / len(p))
                sgd_step(self.pipeline_.param_groups(), sgd)
                self.loss_curve_.append(float(np.mean(np.sum(p**2, axis=1))))
        return self

    def predict(self, P0, warp_ops=None):
        check_is_fitted(self, "pipeline_")
        P0 = np.atleast_2d(np.asarray(P0, dtype=np.float64))
        if P0.shape[1] != WarpFamily.coerce(self.family).dim:
            raise ValueError(f"expected {WarpFamily.coerce(self.family).dim} warp parameters, got {P0.shape[1]}")
        return self.pipeline_.apply_more_warps(self.source_, P0, self.frame_, warp_ops)

    def score(self, P0):
        """Negative mean corner error in source pixels."""
        return -float(np.mean(corner_error(self.predict(P0), self.family, self.frame_)))
