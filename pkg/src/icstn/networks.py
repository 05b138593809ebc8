"""Alignment pipelines: plain CNN, chained STN, compositional STN and IC-STN.

All pipelines share the same calling convention: a source image (the full
canvas the perturbation was drawn on), an initial warp ``p_init`` per batch
element, and a :class:`FrameSpec` locating the canonical square inside the
source.

* ``cnn``   classifies ``I(p_init)`` directly.
* ``stn``   predicts ``p`` from ``I(p_init)`` and resamples *that image*; a
  chain of STNs resamples the previous output each time, so content outside
  the current crop is lost.
* ``cstn``  keeps ``p`` and resamples the original source at every step,
  ``p <- compose(p, f_k(I(p)))``; one predictor per step.
* ``icstn`` the same unrolled loop with a single shared predictor, which can
  be applied for more steps at test time than it was trained with.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .arch import NetworkSpec, Variant, parse_arch
from .exceptions import ConfigurationError, DataFormatError, DegenerateWarpError
from .nn import Conv2D, Dense, MaxPool2x2, ReLU, Sequential
from .sampler import FrameSpec, bilinear_backward, bilinear_sample, make_grid
from .warp import WarpFamily, compose, compose_jacobians, from_matrix, to_matrix


def build_layers(tokens, in_shape, rng, dtype, zero_last=False) -> Sequential:
    """Instantiate layers for a token list; ReLU after every layer but the last."""
    layers = []
    shape = tuple(in_shape)
    for i, tok in enumerate(tokens):
        last = i == len(tokens) - 1
        if tok.kind == "conv":
            layer = Conv2D(shape[0], tok.size, tok.kernel, rng=rng, zero=zero_last and last, dtype=dtype)
        elif tok.kind == "fc":
            layer = Dense(int(np.prod(shape)), tok.size, rng=rng, zero=zero_last and last, dtype=dtype)
        else:
            layer = MaxPool2x2()
        shape = layer.output_shape(shape)
        layers.append(layer)
        if tok.kind != "pool" and not last:
            layers.append(ReLU())
    return Sequential(layers)


@dataclass
class _Step:
    p: np.ndarray  # warp used to produce this step's image
    image: np.ndarray
    sample_cache: object
    pred_cache: list | None = None
    predictor: int | None = None
    dp: np.ndarray | None = None
    jac: tuple | None = None


@dataclass
class ForwardTrace:
    """Everything a forward pass produced; consumed by :meth:`AlignmentPipeline.backward`."""

    p_init: np.ndarray
    p_final: np.ndarray
    aligned: np.ndarray
    logits: np.ndarray | None
    steps: list = field(default_factory=list)
    final_cache: object = None
    classifier_cache: list | None = None

    @property
    def step_images(self) -> list:
        """Image seen at every step (initial perturbation first, aligned last)."""
        return [s.image for s in self.steps] + [self.aligned]


class AlignmentPipeline:
    """Geometric predictor(s) plus optional classifier built from a :class:`NetworkSpec`."""

    def __init__(self, spec: NetworkSpec, seed=0, dtype=np.float64):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.predictors = [
            build_layers(spec.predictor_layers, spec.input_shape, rng, self.dtype, zero_last=True)
            for _ in range(spec.n_predictors)
        ]
        self.classifier = (
            build_layers(spec.classifier_layers, spec.input_shape, rng, self.dtype)
            if spec.classifier_layers
            else None
        )

    @classmethod
    def from_arch(cls, text, family="homography", variant=None, input_shape=(1, 28, 28), seed=0, dtype=np.float64):
        return cls(parse_arch(text, family, variant, input_shape), seed=seed, dtype=dtype)

    # -- bookkeeping ---------------------------------------------------------

    @property
    def family(self) -> WarpFamily:
        return self.spec.family

    @property
    def out_size(self) -> tuple:
        return tuple(self.spec.input_shape[1:])

    def param_groups(self) -> dict:
        groups = {"geo": [p for seq in self.predictors for p in seq.params]}
        if self.classifier is not None:
            groups["class"] = self.classifier.params
        return groups

    def n_params(self) -> int:
        return sum(p.size for plist in self.param_groups().values() for p in plist)

    def zero_grad(self):
        for plist in self.param_groups().values():
            for p in plist:
                p.zero_grad()

    def _predictor_for_step(self, k: int) -> int:
        if self.spec.shared:
            return 0
        if k >= len(self.predictors):
            raise ConfigurationError(
                f"{self.spec.variant.value} pipeline has {len(self.predictors)} predictors; "
                f"cannot run step {k + 1}"
            )
        return k

    # -- forward -------------------------------------------------------------

    def _prepare(self, source, p_init, frame):
        source = np.asarray(source, dtype=self.dtype)
        if source.ndim == 3:
            source4 = source[None]
        else:
            source4 = source
        if p_init is None:
            p_init = np.zeros((source4.shape[0], self.family.dim), dtype=self.dtype)
        p_init = np.asarray(p_init, dtype=self.dtype)
        if p_init.ndim == 1:
            p_init = p_init[None]
        if frame is None:
            frame = FrameSpec.for_image(*source4.shape[-2:])
        return source, p_init, frame

    def _sample(self, source, p, frame):
        grid = make_grid(p, self.family, self.out_size, frame, src_shape=np.shape(source)[-2:])
        return bilinear_sample(source, grid, return_cache=True)

    def forward(self, source, p_init=None, frame: FrameSpec | None = None, warp_ops=None) -> ForwardTrace:
        """Run the pipeline on a batch.

        ``source`` is ``(C, Hs, Ws)`` shared by the batch or ``(B, C, Hs, Ws)``;
        ``p_init`` is ``(B, d)``. ``warp_ops`` overrides the number of
        recurrent steps (ICSTN only beyond the trained count).
        """
        source, p_init, frame = self._prepare(source, p_init, frame)
        variant = self.spec.variant
        k_steps = self.spec.warp_ops if warp_ops is None else int(warp_ops)
        if k_steps < 0:
            raise ConfigurationError("warp_ops must be >= 0")
        if variant is Variant.CNN:
            image, cache = self._sample(source, p_init, frame)
            trace = ForwardTrace(p_init, p_init, image, None, final_cache=cache)
        elif variant is Variant.STN:
            trace = self._forward_stn(source, p_init, frame, k_steps)
        else:
            trace = self._forward_compositional(source, p_init, frame, k_steps)
        if self.classifier is not None:
            trace.logits, trace.classifier_cache = self.classifier.forward(trace.aligned)
        return trace

    def _forward_compositional(self, source, p_init, frame, k_steps):
        p = p_init
        steps = []
        for k in range(k_steps):
            image, cache = self._sample(source, p, frame)
            idx = self._predictor_for_step(k)
            dp, pred_cache = self.predictors[idx].forward(image)
            try:
                p_next = compose(p, dp, self.family)
            except DegenerateWarpError as exc:
                raise DegenerateWarpError(f"warp became degenerate at step {k + 1}: {exc}") from exc
            jac = compose_jacobians(p, dp, self.family)
            steps.append(_Step(p, image, cache, pred_cache, idx, dp, jac))
            p = p_next
        image, cache = self._sample(source, p, frame)
        return ForwardTrace(p_init, p, image, None, steps, cache)

    def _forward_stn(self, source, p_init, frame, k_steps):
        image, cache = self._sample(source, p_init, frame)
        steps = [_Step(p_init, image, cache)]
        own = FrameSpec.for_image(*self.out_size)
        m_eff = to_matrix(p_init, self.family)
        for k in range(k_steps):
            idx = self._predictor_for_step(k)
            p_k, pred_cache = self.predictors[idx].forward(image)
            steps[-1].pred_cache, steps[-1].predictor, steps[-1].dp = pred_cache, idx, p_k
            image, cache = self._sample(image, p_k, own)
            steps.append(_Step(p_k, image, cache))
            # each resample acts in the previous output's frame: compose on the right
            m_eff = m_eff @ to_matrix(p_k, self.family)
        final = steps.pop()
        p_eff = from_matrix(m_eff, self.family)
        return ForwardTrace(p_init, p_eff, final.image, None, steps, final.sample_cache)

    # -- backward ------------------------------------------------------------

    def backward(self, trace: ForwardTrace, grad_logits=None, grad_p_final=None, grad_aligned=None):
        """Accumulate parameter gradients for a loss on logits and/or ``p_final``."""
        variant = self.spec.variant
        g_img = None if grad_aligned is None else np.asarray(grad_aligned, dtype=self.dtype)
        if grad_logits is not None:
            if self.classifier is None:
                raise ConfigurationError("pipeline has no classifier")
            g = self.classifier.backward(np.asarray(grad_logits, dtype=self.dtype), trace.classifier_cache)
            g_img = g if g_img is None else g_img + g
        if variant is Variant.CNN:
            return
        if variant is Variant.STN:
            if grad_p_final is not None:
                raise ConfigurationError("a loss on warp parameters is not supported for chained STNs")
            self._backward_stn(trace, g_img)
            return
        g_p = None
        if grad_p_final is not None:
            g_p = np.array(grad_p_final, dtype=self.dtype)
        if g_img is not None:
            _, gp = bilinear_backward(g_img, trace.final_cache, need_src=False)
            g_p = gp if g_p is None else g_p + gp
        if g_p is None:
            return
        for k in range(len(trace.steps) - 1, -1, -1):
            step = trace.steps[k]
            j_pin, j_dp = step.jac
            g_dp = np.einsum("bi,bij->bj", g_p, j_dp)
            g_p = np.einsum("bi,bij->bj", g_p, j_pin)
            need_img = k > 0  # the first image is sampled at the constant p_init
            g_im = self.predictors[step.predictor].backward(g_dp, step.pred_cache, need_input_grad=need_img)
            if need_img:
                _, gp = bilinear_backward(g_im, step.sample_cache, need_src=False)
                g_p = g_p + gp

    def _backward_stn(self, trace, g_img):
        if g_img is None:
            return
        steps = trace.steps
        for j in range(len(steps) - 1, -1, -1):
            # resample producing image j+1 from image j with the warp predicted from image j
            cache = trace.final_cache if j == len(steps) - 1 else steps[j + 1].sample_cache
            need_img = j > 0
            g_src, g_p = bilinear_backward(g_img, cache, need_src=need_img)
            step = steps[j]
            g_in = self.predictors[step.predictor].backward(g_p, step.pred_cache, need_input_grad=need_img)
            if not need_img:
                return
            g_img = g_src + g_in

    # -- convenience ---------------------------------------------------------

    def predict_warp(self, source, p_init=None, frame=None, warp_ops=None) -> np.ndarray:
        return self.forward(source, p_init, frame, warp_ops).p_final

    def apply_more_warps(self, source, p_init=None, frame=None, k=None) -> np.ndarray:
        """Final warp after running the recurrent predictor ``k`` times."""
        if self.spec.variant is not Variant.ICSTN and k is not None and k > self.spec.warp_ops:
            raise ConfigurationError("only an IC-STN can be applied more times than it was trained")
        source, p_init, frame = self._prepare(source, p_init, frame)
        if k is None:
            k = self.spec.warp_ops
        if k == 0:
            return p_init.copy()
        saved = self.classifier
        self.classifier = None
        try:
            return self.forward(source, p_init, frame, warp_ops=k).p_final
        finally:
            self.classifier = saved

    # -- persistence ---------------------------------------------------------

    def state_dict(self) -> dict:
        out = {}
        for i, seq in enumerate(self.predictors):
            for j, layer in enumerate(seq.layers):
                if layer.params is not None:
                    out[f"predictor{i}.{j}.weight"] = layer.params.weights
                    out[f"predictor{i}.{j}.bias"] = layer.params.bias
        if self.classifier is not None:
            for j, layer in enumerate(self.classifier.layers):
                if layer.params is not None:
                    out[f"classifier.{j}.weight"] = layer.params.weights
                    out[f"classifier.{j}.bias"] = layer.params.bias
        return out

    def load_state_dict(self, state: dict):
        expected = self.state_dict()
        missing = set(expected) - set(state)
        extra = set(state) - set(expected)
        if missing or extra:
            raise DataFormatError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, arr in expected.items():
            if state[name].shape != arr.shape:
                raise DataFormatError(f"shape mismatch for {name}: {state[name].shape} vs {arr.shape}")
            arr[...] = state[name]

    def header(self) -> dict:
        return {
            "arch": self.spec.arch,
            "family": self.family.value,
            "variant": self.spec.variant.value,
            "warp_ops": self.spec.warp_ops,
            "shared": self.spec.shared,
            "input_shape": list(self.spec.input_shape),
        }

    def save(self, path, extra: dict | None = None):
        head = self.header()
        if extra:
            head["extra"] = extra
        save_pipeline_bytes(path, head, self.state_dict())

    @classmethod
    def load(cls, path, dtype=np.float64) -> "AlignmentPipeline":
        head, state = load_pipeline_bytes(path)
        spec = parse_arch(head["arch"], head["family"], head["variant"], tuple(head["input_shape"]))
        if spec.shared != head["shared"] or spec.warp_ops != head["warp_ops"]:
            raise DataFormatError("checkpoint header is inconsistent with its architecture string")
        pipe = cls(spec, dtype=dtype)
        pipe.load_state_dict(state)
        pipe.checkpoint_header = head
        return pipe


PIPELINE_MAGIC = b"ICSTNPIP"


def save_pipeline_bytes(path, header: dict, tensors: dict):
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(PIPELINE_MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        checkpoint.write_tensors(fh, tensors)


def load_pipeline_bytes(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(PIPELINE_MAGIC)] != PIPELINE_MAGIC:
        raise DataFormatError(f"{path} is not a pipeline checkpoint")
    off = len(PIPELINE_MAGIC)
    if len(data) < off + 8:
        raise DataFormatError("truncated pipeline header")
    (n,) = struct.unpack("<Q", data[off : off + 8])
    off += 8
    try:
        header = json.loads(data[off : off + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"corrupt pipeline header: {exc}") from exc
    tensors = checkpoint.read_tensors(io.BytesIO(data[off + n :]))
    return header, tensors
