"""Architecture strings for alignment networks.

Grammar (whitespace-insensitive, ``×``/``→`` accepted for ``x``/``->``)::

    spec   := "[" layers "]" "x" INT "->" layers   # transformer network
            | layers                               # plain CNN
    layers := token ("-" token)*
    token  := "conv(" INT "x" INT "," INT ")" | "FC(" INT ")" | "P"

e.g. ``[ FC(8) ]x4 -> conv(9x9,3)-FC(10)``.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass

from .exceptions import ConfigurationError
from .warp import WarpFamily


class Variant(enum.Enum):
    CNN = "cnn"
    STN = "stn"
    CSTN = "cstn"
    ICSTN = "icstn"

    @classmethod
    def coerce(cls, value) -> "Variant":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower().replace("-", ""))
        except ValueError:
            raise ValueError(f"unknown variant {value!r}; expected one of {[v.value for v in cls]}") from None


@dataclass(frozen=True)
class Token:
    kind: str  # "conv", "fc" or "pool"
    size: int = 0  # output channels / features
    kernel: int = 0

    def __str__(self):
        if self.kind == "conv":
            return f"conv({self.kernel}x{self.kernel},{self.size})"
        if self.kind == "fc":
            return f"FC({self.size})"
        return "P"


@dataclass(frozen=True)
class NetworkSpec:
    predictor_layers: tuple
    classifier_layers: tuple
    warp_ops: int
    shared: bool
    family: WarpFamily
    variant: Variant
    input_shape: tuple = (1, 28, 28)

    @property
    def arch(self) -> str:
        cls = "-".join(map(str, self.classifier_layers))
        if self.variant is Variant.CNN:
            return cls
        pred = "-".join(map(str, self.predictor_layers))
        return f"[{pred}]x{self.warp_ops}->{cls}" if cls else f"[{pred}]x{self.warp_ops}"

    @property
    def n_predictors(self) -> int:
        if self.variant is Variant.CNN:
            return 0
        return 1 if self.shared else self.warp_ops


_TOKEN_RE = re.compile(r"conv\((\d+)x(\d+),(\d+)\)|FC\((\d+)\)|P", re.IGNORECASE)


def _normalize(text: str) -> str:
    return re.sub(r"\s+", "", text.replace("×", "x").replace("→", "->"))


def _parse_layers(text: str, where: str) -> tuple:
    if text == "":
        return ()
    tokens = []
    for i, part in enumerate(text.split("-")):
        m = _TOKEN_RE.fullmatch(part)
        if m is None:
            raise ConfigurationError(f"cannot parse layer token {part!r} (#{i}) in {where}")
        if m.group(1) is not None:
            kh, kw = int(m.group(1)), int(m.group(2))
            if kh != kw:
                raise ConfigurationError(f"only square kernels are supported, got {kh}x{kw}")
            tokens.append(Token("conv", int(m.group(3)), kh))
        elif m.group(4) is not None:
            tokens.append(Token("fc", int(m.group(4))))
        else:
            tokens.append(Token("pool"))
    return tuple(tokens)


def parse_arch(
    text: str,
    family="homography",
    variant=None,
    input_shape=(1, 28, 28),
) -> NetworkSpec:
    """Parse an architecture string and validate its layer arithmetic.

    ``variant`` defaults to ICSTN for bracketed specs and CNN otherwise.
    ICSTN shares one predictor across all warp operations; STN and CSTN get
    one predictor per operation.
    """
    family = WarpFamily.coerce(family)
    norm = _normalize(text)
    m = re.fullmatch(r"\[(.*)\]x(\d+)(?:->(.*))?", norm)
    if m:
        predictor = _parse_layers(m.group(1), "predictor")
        warp_ops = int(m.group(2))
        classifier = _parse_layers(m.group(3) or "", "classifier")
        variant = Variant.ICSTN if variant is None else Variant.coerce(variant)
        if variant is Variant.CNN:
            raise ConfigurationError("a CNN variant cannot carry a predictor block")
        if warp_ops < 1:
            raise ConfigurationError("the number of warp operations must be >= 1")
        if not predictor or predictor[-1].kind != "fc" or predictor[-1].size != family.dim:
            raise ConfigurationError(
                f"predictor must end with FC({family.dim}) for a {family.value} warp, "
                f"got {predictor[-1] if predictor else 'nothing'}"
            )
    else:
        if "[" in norm or "]" in norm:
            raise ConfigurationError(f"malformed architecture string {text!r}")
        predictor = ()
        warp_ops = 0
        classifier = _parse_layers(norm, "classifier")
        variant = Variant.CNN if variant is None else Variant.coerce(variant)
        if variant is not Variant.CNN:
            raise ConfigurationError(f"variant {variant.value} needs a bracketed predictor block")
    shared = variant is Variant.ICSTN
    spec = NetworkSpec(predictor, classifier, warp_ops, shared, family, variant, tuple(input_shape))
    layer_shapes(spec)
    return spec


def _walk(tokens, in_shape, where):
    shapes = []
    shape = tuple(in_shape)
    for i, tok in enumerate(tokens):
        if tok.kind == "conv":
            if len(shape) != 3:
                raise ConfigurationError(f"{where} layer {i} ({tok}): conv after a flattened layer")
            c, h, w = shape
            if h < tok.kernel or w < tok.kernel:
                raise ConfigurationError(
                    f"{where} layer {i} ({tok}): kernel does not fit input {h}x{w}"
                )
            shape = (tok.size, h - tok.kernel + 1, w - tok.kernel + 1)
        elif tok.kind == "pool":
            if len(shape) != 3:
                raise ConfigurationError(f"{where} layer {i} (P): pooling after a flattened layer")
            c, h, w = shape
            if h % 2 or w % 2:
                raise ConfigurationError(f"{where} layer {i} (P): odd extent {h}x{w}")
            shape = (c, h // 2, w // 2)
        else:
            shape = (tok.size,)
        shapes.append(shape)
    return shapes


def layer_shapes(spec: NetworkSpec) -> dict:
    """Output shape after every token of the predictor and classifier."""
    return {
        "predictor": _walk(spec.predictor_layers, spec.input_shape, "predictor"),
        "classifier": _walk(spec.classifier_layers, spec.input_shape, "classifier"),
    }


def _count(tokens, in_shape):
    total = 0
    shape = tuple(in_shape)
    for tok, out in zip(tokens, _walk(tokens, in_shape, "")):
        if tok.kind == "conv":
            total += tok.size * shape[0] * tok.kernel**2 + tok.size
        elif tok.kind == "fc":
            n_in = 1
            for e in shape:
                n_in *= e
            total += tok.size * n_in + tok.size
        shape = out
    return total


def count_params(spec: NetworkSpec) -> int:
    """Learnable weights plus biases; a shared predictor counts once."""
    pred = _count(spec.predictor_layers, spec.input_shape) * spec.n_predictors
    return pred + _count(spec.classifier_layers, spec.input_shape)
