"""Datasets and the synthetic warp-perturbation model.

Perturbations follow one recipe everywhere: add i.i.d. Gaussian noise to the
four corners of a reference box, shift all four corners by one shared
Gaussian translation, then fit a warp (in canonical coordinates of the box)
to the moved corners.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .exceptions import DataFormatError, IllConditionedError
from .sampler import FrameSpec, warp_image
from .warp import CANONICAL_CORNERS, WarpFamily, fit_warp_to_corners, invert

DATA_ENV = "ICSTN_DATA"

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


# -- MNIST IDX ----------------------------------------------------------------


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx_header(fh, expected_magic, ndim, path):
    head = fh.read(4 + 4 * ndim)
    if len(head) < 4 + 4 * ndim:
        raise DataFormatError(f"{path}: truncated header")
    magic, *dims = struct.unpack(">I" + "I" * ndim, head)
    if magic != expected_magic:
        raise DataFormatError(
            f"{path}: bad magic number 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )
    return dims


def load_mnist_idx(images_path, labels_path):
    """Read an IDX image/label file pair (optionally gzipped).

    Returns ``(images, labels)`` with images ``(N, 28, 28)`` float64 in
    ``[0, 1]`` and integer labels.
    """
    with _open(images_path) as fh:
        n, rows, cols = _read_idx_header(fh, IMAGES_MAGIC, 3, images_path)
        payload = fh.read()
    if len(payload) != n * rows * cols:
        raise DataFormatError(
            f"{images_path}: truncated payload, expected {n * rows * cols} bytes, got {len(payload)}"
        )
    images = np.frombuffer(payload, dtype=np.uint8).reshape(n, rows, cols) / 255.0
    with _open(labels_path) as fh:
        (m,) = _read_idx_header(fh, LABELS_MAGIC, 1, labels_path)
        lab = fh.read()
    if len(lab) != m:
        raise DataFormatError(f"{labels_path}: truncated payload, expected {m} labels, got {len(lab)}")
    if m != n:
        raise DataFormatError(f"count mismatch: {n} images but {m} labels")
    labels = np.frombuffer(lab, dtype=np.uint8).astype(np.int64)
    if labels.size and labels.max() > 9:
        raise DataFormatError(f"{labels_path}: label {labels.max()} out of range 0-9")
    return images, labels


def write_mnist_idx(images, labels, images_path, labels_path):
    """Write ``uint8``-representable images and labels as an IDX pair."""
    images = np.asarray(images)
    if images.dtype != np.uint8:
        images = np.clip(np.round(images * 255.0), 0, 255).astype(np.uint8)
    labels = np.asarray(labels).astype(np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def find_mnist(root=None, split="train"):
    """Locate the IDX pair for ``split`` under ``root`` (default ``$ICSTN_DATA``)."""
    root = Path(root or os.environ.get(DATA_ENV, "data"))
    found = []
    for name in MNIST_FILES[split]:
        for cand in (root / name, root / (name + ".gz"), root / "mnist" / name, root / "mnist" / (name + ".gz")):
            if cand.exists():
                found.append(cand)
                break
        else:
            raise FileNotFoundError(f"could not find {name}[.gz] under {root} (set ${DATA_ENV})")
    return tuple(found)


def load_mnist(root=None, split="train"):
    return load_mnist_idx(*find_mnist(root, split))


def write_mnist_subset_from_mlxtend(out_dir, n_test_per_class=100, seed=0):
    """Write the 5000-digit MNIST sample bundled with ``mlxtend`` as IDX files.

    A stratified ``n_test_per_class`` digits per class become the test split;
    the rest is the training split. Only needed when the full dataset is not
    available.
    """
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    rng = np.random.default_rng(seed)
    test_idx = np.concatenate(
        [rng.permutation(np.flatnonzero(y == c))[:n_test_per_class] for c in range(10)]
    )
    mask = np.zeros(len(y), dtype=bool)
    mask[test_idx] = True
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    x = x.reshape(-1, 28, 28).astype(np.uint8)
    for split, sel in (("train", ~mask), ("test", mask)):
        img_name, lab_name = MNIST_FILES[split]
        write_mnist_idx(x[sel], y[sel], out / img_name, out / lab_name)
    return out


# -- planar source ------------------------------------------------------------


def load_image(path) -> np.ndarray:
    """Grayscale image as ``(1, H, W)`` float64 in ``[0, 1]``."""
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    return arr[None]


def save_image(path, image):
    """Write a ``[0, 1]`` grayscale array as an 8-bit PNG."""
    from PIL import Image

    arr = np.asarray(image, dtype=np.float64)
    arr = np.squeeze(arr)
    Image.fromarray(np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8), mode="L").save(path)


@dataclass
class PlanarConfig:
    image_path: str
    box: np.ndarray  # (4, 2) pixel corners
    sigmas: list = field(default_factory=lambda: [2.5, 5.0, 7.5, 10.0])

    def load_source(self) -> np.ndarray:
        return load_image(self.image_path)


def load_planar_config(path=None) -> PlanarConfig:
    """Parse a ``key = value`` planar experiment file (bundled default if ``path`` is None).

    Keys: ``image`` (relative to the config file), ``box`` (four ``x,y``
    pairs separated by whitespace), ``sigma`` (comma separated).
    """
    if path is None:
        path = resources.files("icstn") / "assets" / "planar.cfg"
    path = Path(str(path))
    values = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataFormatError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    for key in ("image", "box"):
        if key not in values:
            raise DataFormatError(f"{path}: missing required key {key!r}")
    try:
        box = np.array([[float(v) for v in pt.split(",")] for pt in values["box"].split()])
    except ValueError as exc:
        raise DataFormatError(f"{path}: cannot parse box {values['box']!r}") from exc
    if box.shape != (4, 2):
        raise DataFormatError(f"{path}: box needs four x,y corners, got {values['box']!r}")
    sigmas = [float(s) for s in values.get("sigma", "2.5,5,7.5,10").split(",")]
    image = Path(values["image"])
    if not image.is_absolute():
        image = path.parent / image
    return PlanarConfig(str(image), box, sigmas)


# -- perturbation model ---------------------------------------------------------


@dataclass
class PerturbConfig:
    family: WarpFamily = WarpFamily.AFFINE
    sigma_corner: float = 0.0  # pixels
    sigma_translation: float | None = None  # pixels; None means same as sigma_corner
    seed: int = 0

    def __post_init__(self):
        self.family = WarpFamily.coerce(self.family)
        if self.sigma_translation is None:
            self.sigma_translation = self.sigma_corner
        if self.sigma_corner < 0 or self.sigma_translation < 0:
            raise ValueError("noise standard deviations must be non-negative")


def perturb_corners(box_corners, cfg: PerturbConfig, rng, n=None, return_corners=False):
    """Draw perturbation warps around a pixel box.

    Returns warp parameters in the canonical frame of the box, ``(d,)`` or
    ``(n, d)``. Draws whose homography fit is degenerate, or whose quad is
    not convex (part of the square would map through infinity), are redrawn
    (at most 10 times).
    """
    box = np.asarray(box_corners, dtype=np.float64)
    frame = FrameSpec.from_box(box)
    count = 1 if n is None else int(n)
    p = np.empty((count, cfg.family.dim))
    corners = np.empty((count, 4, 2))
    todo = np.arange(count)
    for _ in range(11):
        k = len(todo)
        noise = rng.normal(0.0, 1.0, (k, 4, 2)) * cfg.sigma_corner
        shift = rng.normal(0.0, 1.0, (k, 1, 2)) * cfg.sigma_translation
        moved = box + noise + shift
        canon = frame.to_canonical(moved)
        bad = np.zeros(k, dtype=bool)
        for j in range(k):
            try:
                p[todo[j]] = fit_warp_to_corners(CANONICAL_CORNERS, canon[j], cfg.family)
                corners[todo[j]] = moved[j]
            except (IllConditionedError, np.linalg.LinAlgError):
                bad[j] = True
        bad |= ~_finite_on_square(p[todo], cfg.family)
        if not bad.any():
            break
        todo = todo[bad]
    else:
        raise IllConditionedError("could not draw a non-degenerate perturbation in 10 retries")
    if n is None:
        p, corners = p[0], corners[0]
    return (p, corners) if return_corners else p


def _finite_on_square(p, family) -> np.ndarray:
    """True where the homogeneous denominator stays positive over the canonical square."""
    if family is not WarpFamily.HOMOGRAPHY:
        return np.ones(len(p), dtype=bool)
    # affine in (u, v), so checking the four corners suffices
    den = 1.0 + p[:, 6:7] * CANONICAL_CORNERS[:, 0] + p[:, 7:8] * CANONICAL_CORNERS[:, 1]
    return np.all(den > 1e-6, axis=1)


def _fit_many(canon, family):
    """Vectorized fit of many canonical quads; falls back to per-sample on failure."""
    try:
        return fit_warp_to_corners(CANONICAL_CORNERS, canon, family)
    except (IllConditionedError, np.linalg.LinAlgError):
        return None


def draw_perturbations(box_corners, cfg: PerturbConfig, rng, n):
    """Batched fast path of :func:`perturb_corners` for stream generation."""
    box = np.asarray(box_corners, dtype=np.float64)
    frame = FrameSpec.from_box(box)
    noise = rng.normal(0.0, 1.0, (n, 4, 2)) * cfg.sigma_corner
    shift = rng.normal(0.0, 1.0, (n, 1, 2)) * cfg.sigma_translation
    p = _fit_many(frame.to_canonical(box + noise + shift), cfg.family)
    if p is None:
        return perturb_corners(box, cfg, rng, n=n)
    bad = ~_finite_on_square(p, cfg.family)
    if bad.any():
        p[bad] = perturb_corners(box, cfg, rng, n=int(bad.sum()))
    return p


# -- sample streams -------------------------------------------------------------


@dataclass
class Sample:
    image: np.ndarray  # (C, H, W)
    p_init: np.ndarray  # perturbation that produced the image
    gt_warp: np.ndarray  # warp undoing the perturbation
    label: int | None = None


@dataclass
class Batch:
    images: np.ndarray  # (B, C, H, W) perturbed crops
    p_init: np.ndarray  # (B, d)
    gt_warp: np.ndarray  # (B, d)
    source: np.ndarray  # (C, Hs, Ws) shared or (B, C, Hs, Ws)
    frame: FrameSpec
    labels: np.ndarray | None = None

    def __len__(self):
        return len(self.p_init)

    def samples(self):
        for i in range(len(self)):
            label = None if self.labels is None else int(self.labels[i])
            yield Sample(self.images[i], self.p_init[i], self.gt_warp[i], label)


def make_planar_stream(
    source_image, gt_box, cfg: PerturbConfig, batch=100, out_size=(50, 50), n_batches=None, render=True
):
    """Endless (or ``n_batches`` long) iterator of perturbed crops of one image.

    Every crop is sampled from the full source, so perturbations reaching
    outside the box still see real pixels. With ``render=False`` only the
    warps are drawn and ``Batch.images`` is None.
    """
    source = np.asarray(source_image, dtype=np.float64)
    if source.ndim == 2:
        source = source[None]
    frame = FrameSpec.from_box(gt_box)
    rng = np.random.default_rng(cfg.seed)
    produced = 0
    while n_batches is None or produced < n_batches:
        p = draw_perturbations(gt_box, cfg, rng, batch)
        images = warp_image(source, p, cfg.family, frame, out_size) if render else None
        yield Batch(images, p, invert(p, cfg.family), source, frame)
        produced += 1


MNIST_BOX = np.array([[0.0, 0.0], [27.0, 0.0], [27.0, 27.0], [0.0, 27.0]])


def make_mnist_stream(images, labels, cfg: PerturbConfig, batch=100, n_batches=None, shuffle=True):
    """Perturbed digits, each warped about its own 28x28 canvas border.

    With ``shuffle`` the stream draws random minibatches forever (or for
    ``n_batches``); without it, it walks the dataset once in order.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[:, None]
    labels = np.asarray(labels)
    n, c, h, w = images.shape
    box = np.array([[0.0, 0.0], [w - 1.0, 0.0], [w - 1.0, h - 1.0], [0.0, h - 1.0]])
    frame = FrameSpec.for_image(h, w)
    rng = np.random.default_rng(cfg.seed)
    produced = 0
    start = 0
    while n_batches is None or produced < n_batches:
        if shuffle:
            idx = rng.integers(0, n, batch)
        else:
            if start >= n:
                return
            idx = np.arange(start, min(start + batch, n))
            start += batch
        src = images[idx]
        p = draw_perturbations(box, cfg, rng, len(idx))
        warped = warp_image(src, p, cfg.family, frame, (h, w))
        yield Batch(warped, p, invert(p, cfg.family), src, frame, labels[idx])
        produced += 1


def perturbed_eval_set(images, labels, cfg: PerturbConfig, batch=500):
    """The whole set, perturbed once with ``cfg.seed``; returns a list of batches."""
    return list(make_mnist_stream(images, labels, cfg, batch=batch, shuffle=False))


def default_planar_source():
    cfg = load_planar_config()
    return cfg.load_source(), cfg.box
