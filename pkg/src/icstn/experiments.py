"""Training/evaluation drivers for the planar and perturbed-MNIST experiments."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .arch import NetworkSpec, Variant, count_params, parse_arch
from .data import (
    PerturbConfig,
    draw_perturbations,
    load_mnist,
    load_planar_config,
    make_mnist_stream,
    make_planar_stream,
    perturbed_eval_set,
    save_image,
)
from .exceptions import ConfigurationError, DataFormatError
from .metrics import corner_error, warp_param_error
from .networks import AlignmentPipeline
from .nn import SgdConfig, sgd_step, softmax_cross_entropy
from .sampler import FrameSpec, warp_image
from .warp import from_matrix, to_matrix

EXPERIMENTS = ("planar", "mnist")
INPUT_SHAPES = {"planar": (1, 50, 50), "mnist": (1, 28, 28)}
DEFAULTS = {
    "planar": {"family": "affine", "sigma": 7.5, "lr_geo": 1e-4, "lr_class": 0.01},
    "mnist": {"family": "homography", "sigma": 3.5, "lr_geo": 1e-4, "lr_class": 0.01},
}
DESK_ITERATIONS = 20_000
FULL_ITERATIONS = 200_000
EVAL_SEED = 90210

METRICS_HEADER = ["iteration", "train_loss", "test_error", "param_l2", "corner_px", "wall_time"]
REPORT_HEADER = [
    "model", "arch", "capacity", "experiment", "family", "sigma", "iterations",
    "test_error", "param_l2", "corner_px",
]  # fmt: skip


def model_name(variant, warp_ops: int) -> str:
    variant = Variant.coerce(variant)
    if variant is Variant.CNN:
        return "CNN"
    if variant is Variant.STN:
        return "STN" if warp_ops == 1 else f"STN-{warp_ops}"
    if variant is Variant.CSTN or warp_ops == 1:
        return f"c-STN-{warp_ops}"
    return f"IC-STN-{warp_ops}"


def model_order(variant, warp_ops: int) -> tuple:
    """Sort key: CNN, STN, c-STN-K, IC-STN-K (K ascending)."""
    variant = Variant.coerce(variant)
    rank = {Variant.CNN: 0, Variant.STN: 1, Variant.CSTN: 2, Variant.ICSTN: 3}[variant]
    if variant is Variant.ICSTN and warp_ops == 1:
        rank = 2
    return rank, warp_ops


@dataclass
class ExperimentConfig:
    experiment: str = "planar"
    arch: str = "[FC(6)]x4"
    variant: str | None = None
    family: str | None = None
    sigma: float | None = None
    sigma_t: float | None = None
    iterations: int = DESK_ITERATIONS
    batch: int = 100
    lr_class: float | None = None
    lr_geo: float | None = None
    seed: int = 0
    out_dir: str = "runs/default"
    eval_every: int = 1000
    n_test: int = 1000
    eval_seed: int = EVAL_SEED
    data_root: str | None = None
    planar_config: str | None = None
    full: bool = False

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigurationError(f"experiment must be one of {EXPERIMENTS}, got {self.experiment!r}")
        for key, value in DEFAULTS[self.experiment].items():
            if getattr(self, key) is None:
                setattr(self, key, value)
        if self.full:
            self.iterations = FULL_ITERATIONS
        if self.sigma_t is None:
            self.sigma_t = self.sigma
        if self.sigma < 0 or self.sigma_t < 0:
            raise ConfigurationError("noise levels must be >= 0")
        for key in ("iterations", "batch", "eval_every", "n_test"):
            if getattr(self, key) < 1:
                raise ConfigurationError(f"{key} must be >= 1")
        if not (self.lr_class > 0 and self.lr_geo > 0):
            raise ConfigurationError("learning rates must be > 0")
        spec = self.network_spec()
        self.variant = spec.variant.value
        if self.experiment == "planar":
            if spec.classifier_layers:
                raise ConfigurationError("the planar experiment trains geometric predictors only; drop the classifier")
            if spec.variant not in (Variant.CSTN, Variant.ICSTN):
                raise ConfigurationError("the planar experiment needs a cstn or icstn variant")
        elif not spec.classifier_layers:
            raise ConfigurationError("the mnist experiment needs a classifier")

    def network_spec(self) -> NetworkSpec:
        return parse_arch(self.arch, self.family, self.variant, INPUT_SHAPES[self.experiment])

    @property
    def name(self) -> str:
        spec = self.network_spec()
        return model_name(spec.variant, spec.warp_ops)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        data = {k: v for k, v in data.items() if k in known}
        data["full"] = False  # iterations already reflect it
        return cls(**data)

    def training_identity(self) -> dict:
        """The fields that determine the trained model and its metrics."""
        d = self.to_dict()
        for key in ("out_dir", "data_root", "full"):
            d.pop(key)
        return d


@dataclass
class MetricsRecord:
    rows: list = field(default_factory=list)

    def append(self, iteration, train_loss, test_error, param_l2=math.nan, corner_px=math.nan, wall_time=0.0):
        if self.rows and iteration <= self.rows[-1]["iteration"]:
            raise ValueError("metrics must be appended in increasing iteration order")
        self.rows.append(
            {
                "iteration": int(iteration),
                "train_loss": float(train_loss),
                "test_error": float(test_error),
                "param_l2": float(param_l2),
                "corner_px": float(corner_px),
                "wall_time": float(wall_time),
            }
        )

    @property
    def final(self) -> dict:
        return self.rows[-1]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, METRICS_HEADER)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: repr(v) for k, v in row.items()})

    @classmethod
    def read_csv(cls, path) -> "MetricsRecord":
        path = Path(path)
        if not path.exists():
            raise DataFormatError(f"metrics file {path} does not exist")
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != METRICS_HEADER:
                raise DataFormatError(f"{path}: unexpected header {reader.fieldnames}")
            rec = cls()
            for row in reader:
                rec.append(**{k: float(v) for k, v in row.items()})
        if not rec.rows:
            raise DataFormatError(f"{path}: no records")
        return rec


@dataclass
class RunResult:
    config: ExperimentConfig
    metrics: MetricsRecord
    pipeline: AlignmentPipeline
    out_dir: Path
    extra: dict = field(default_factory=dict)


# -- planar ---------------------------------------------------------------------


def _planar_setup(config: ExperimentConfig):
    pcfg = load_planar_config(config.planar_config)
    return pcfg.load_source(), pcfg.box


def planar_eval_set(config: ExperimentConfig, box):
    cfg = PerturbConfig(config.family, config.sigma, config.sigma_t, config.eval_seed)
    return draw_perturbations(box, cfg, np.random.default_rng(config.eval_seed), config.n_test)


def evaluate_planar(pipe: AlignmentPipeline, source, frame, p_test, warp_ops=None, chunk=100):
    """Mean residual parameter norm and mean corner error (px) on a fixed draw."""
    l2, corners = [], []
    for i in range(0, len(p_test), chunk):
        p = pipe.apply_more_warps(source, p_test[i : i + chunk], frame, warp_ops)
        l2.append(warp_param_error(p))
        corners.append(corner_error(p, pipe.family, frame))
    return float(np.mean(np.concatenate(l2))), float(np.mean(np.concatenate(corners)))


def run_planar(config: ExperimentConfig, k_max=10, log=None) -> RunResult:
    """Train a geometric predictor with an L2 loss on the final warp parameters."""
    if config.experiment != "planar":
        raise ConfigurationError("run_planar needs a planar config")
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    source, box = _planar_setup(config)
    frame = FrameSpec.from_box(box)
    pipe = AlignmentPipeline(config.network_spec(), seed=config.seed)
    sgd = SgdConfig({"geo": config.lr_geo}, config.batch, config.iterations, config.seed)
    p_test = planar_eval_set(config, box)
    stream = make_planar_stream(
        source,
        box,
        PerturbConfig(config.family, config.sigma, config.sigma_t, config.seed),
        config.batch,
        INPUT_SHAPES["planar"][1:],
        render=False,
    )
    metrics = MetricsRecord()
    start = time.perf_counter()
    losses = []
    with threadpool_limits(1):
        for it in range(1, config.iterations + 1):
            batch = next(stream)
            trace = pipe.forward(source, batch.p_init, frame)
            p = trace.p_final
            losses.append(float(np.mean(np.sum(p**2, axis=1))))
            pipe.backward(trace, grad_p_final=2.0 * p / len(p))
            sgd_step(pipe.param_groups(), sgd)
            if not np.all(np.isfinite(p)):
                raise FloatingPointError(f"training diverged at iteration {it}; lower --lr-geo")
            if it % config.eval_every == 0 or it == config.iterations:
                l2, px = evaluate_planar(pipe, source, frame, p_test)
                metrics.append(it, np.mean(losses), l2, l2, px, time.perf_counter() - start)
                losses = []
                if log:
                    log(f"[{config.name}] it {it}: loss {metrics.final['train_loss']:.4f} param_l2 {l2:.4f} corner {px:.3f}px")
        curve = k_curve(pipe, source, frame, p_test, k_max)
    _write_run(out, config, metrics, pipe)
    _write_curve(out / "k_curve.csv", curve)
    return RunResult(config, metrics, pipe, out, {"k_curve": curve})


def k_curve(pipe, source, frame, p_test, k_max=10):
    """Error after K warp applications; an IC-STN may go past its training depth."""
    top = k_max if pipe.spec.variant is Variant.ICSTN else pipe.spec.warp_ops
    return [(k, *evaluate_planar(pipe, source, frame, p_test, warp_ops=k)) for k in range(top + 1)]


def _write_curve(path, curve):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["warp_ops", "param_l2", "corner_px"])
        for k, l2, px in curve:
            writer.writerow([k, repr(l2), repr(px)])


# -- mnist ----------------------------------------------------------------------


def _mnist_eval(config: ExperimentConfig, test_x, test_y):
    cfg = PerturbConfig(config.family, config.sigma, config.sigma_t, config.eval_seed)
    return perturbed_eval_set(test_x, test_y, cfg, batch=500)


def evaluate_mnist(pipe: AlignmentPipeline, eval_batches, warp_ops=None, return_aligned=False):
    """Classification error (%) on pre-perturbed batches."""
    wrong = total = 0
    aligned, labels = [], []
    for b in eval_batches:
        trace = pipe.forward(b.source, b.p_init, b.frame, warp_ops=warp_ops)
        wrong += int(np.sum(np.argmax(trace.logits, axis=1) != b.labels))
        total += len(b.labels)
        if return_aligned:
            aligned.append(trace.aligned)
            labels.append(b.labels)
    err = 100.0 * wrong / total
    if return_aligned:
        return err, np.concatenate(aligned), np.concatenate(labels)
    return err


def run_mnist(config: ExperimentConfig, log=None) -> RunResult:
    """Train a classifier (optionally behind alignment modules) with cross-entropy."""
    if config.experiment != "mnist":
        raise ConfigurationError("run_mnist needs an mnist config")
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_x, train_y = load_mnist(config.data_root, "train")
    test_x, test_y = load_mnist(config.data_root, "test")
    pipe = AlignmentPipeline(config.network_spec(), seed=config.seed)
    sgd = SgdConfig({"geo": config.lr_geo, "class": config.lr_class}, config.batch, config.iterations, config.seed)
    eval_batches = _mnist_eval(config, test_x, test_y)
    stream = make_mnist_stream(
        train_x, train_y, PerturbConfig(config.family, config.sigma, config.sigma_t, config.seed), config.batch
    )
    metrics = MetricsRecord()
    start = time.perf_counter()
    losses = []
    with threadpool_limits(1):
        for it in range(1, config.iterations + 1):
            batch = next(stream)
            trace = pipe.forward(batch.source, batch.p_init, batch.frame)
            loss, grad = softmax_cross_entropy(trace.logits, batch.labels)
            if not np.isfinite(loss):
                raise FloatingPointError(f"training diverged at iteration {it}")
            losses.append(loss)
            pipe.backward(trace, grad_logits=grad)
            sgd_step(pipe.param_groups(), sgd)
            if it % config.eval_every == 0 or it == config.iterations:
                err = evaluate_mnist(pipe, eval_batches)
                metrics.append(it, np.mean(losses), err, wall_time=time.perf_counter() - start)
                losses = []
                if log:
                    log(f"[{config.name}] it {it}: loss {metrics.final['train_loss']:.4f} test error {err:.2f}%")
        _, aligned, labels = evaluate_mnist(pipe, eval_batches, return_aligned=True)
    stats = class_appearance_stats(aligned, labels)
    _write_run(out, config, metrics, pipe, {"aligned_variance": stats["mean_variance"]})
    return RunResult(config, metrics, pipe, out, {"aligned_variance": stats["mean_variance"], "stats": stats})


def class_appearance_stats(aligned, labels, n_classes=10) -> dict:
    """Per-class mean and pixelwise variance of aligned images.

    ``mean_variance`` averages the variance over pixels and then over classes.
    """
    aligned = np.asarray(aligned, dtype=np.float64)
    means, variances = [], []
    for c in range(n_classes):
        sel = aligned[labels == c]
        if len(sel) == 0:
            raise DataFormatError(f"no samples of class {c}")
        means.append(sel.mean(0))
        variances.append(sel.var(0))
    per_class = [float(v.mean()) for v in variances]
    return {
        "means": np.stack(means),
        "variances": np.stack(variances),
        "per_class_variance": per_class,
        "mean_variance": float(np.mean(per_class)),
    }


# -- persistence / caching ----------------------------------------------------------


def _write_run(out: Path, config, metrics, pipe, extra=None):
    metrics.write_csv(out / "metrics.csv")
    record = {"config": config.to_dict(), "name": config.name, "capacity": pipe.n_params()}
    if extra:
        record.update(extra)
    (out / "config.json").write_text(json.dumps(record, indent=2, sort_keys=True))
    pipe.save(out / "model.bin", extra={"config": config.to_dict()})


def run(config: ExperimentConfig, log=None) -> RunResult:
    return run_planar(config, log=log) if config.experiment == "planar" else run_mnist(config, log=log)


def run_cached(config: ExperimentConfig, force=False, log=None) -> RunResult:
    """Reuse a finished run in ``config.out_dir`` if it was trained with the same settings."""
    out = Path(config.out_dir)
    record_path = out / "config.json"
    if not force and record_path.exists() and (out / "model.bin").exists():
        record = json.loads(record_path.read_text())
        old = ExperimentConfig.from_dict(record["config"])
        if old.training_identity() == config.training_identity():
            pipe = AlignmentPipeline.load(out / "model.bin")
            extra = {k: v for k, v in record.items() if k not in ("config", "name", "capacity")}
            if (out / "k_curve.csv").exists():
                with open(out / "k_curve.csv", newline="") as fh:
                    extra["k_curve"] = [(int(r[0]), float(r[1]), float(r[2])) for r in list(csv.reader(fh))[1:]]
            return RunResult(config, MetricsRecord.read_csv(out / "metrics.csv"), pipe, out, extra)
    return run(config, log=log)


def load_checkpoint(path):
    """Pipeline plus the experiment config stored in its header."""
    pipe = AlignmentPipeline.load(path)
    extra = pipe.checkpoint_header.get("extra", {})
    if "config" not in extra:
        raise DataFormatError(f"{path} carries no experiment config")
    return pipe, ExperimentConfig.from_dict(extra["config"])


def evaluate_checkpoint(path, warp_ops=None, data_root=None) -> dict:
    """Re-evaluate a saved model, optionally with a different number of warp applications."""
    pipe, config = load_checkpoint(path)
    if data_root is not None:
        config.data_root = data_root
    with threadpool_limits(1):
        if config.experiment == "planar":
            source, box = _planar_setup(config)
            frame = FrameSpec.from_box(box)
            l2, px = evaluate_planar(pipe, source, frame, planar_eval_set(config, box), warp_ops)
            return {"model": config.name, "warp_ops": warp_ops, "param_l2": l2, "corner_px": px}
        test_x, test_y = load_mnist(config.data_root, "test")
        err = evaluate_mnist(pipe, _mnist_eval(config, test_x, test_y), warp_ops)
    return {"model": config.name, "warp_ops": warp_ops, "test_error": err}


# -- report -----------------------------------------------------------------------


def report(metrics_files, csv_path=None) -> str:
    """Merge finished runs into one table (one row per run, declared model order).

    Every metrics file needs the ``config.json`` written next to it. Returns
    the text table; ``csv_path`` additionally receives the CSV form.
    """
    if not metrics_files:
        raise DataFormatError("no metrics files given")
    rows = []
    for f in metrics_files:
        f = Path(f)
        rec = MetricsRecord.read_csv(f)
        cfg_path = f.parent / "config.json"
        if not cfg_path.exists():
            raise DataFormatError(f"{f}: missing companion config.json")
        config = ExperimentConfig.from_dict(json.loads(cfg_path.read_text())["config"])
        spec = config.network_spec()
        final = rec.final
        rows.append(
            {
                "model": config.name,
                "arch": spec.arch,
                "capacity": count_params(spec),
                "experiment": config.experiment,
                "family": config.family,
                "sigma": config.sigma,
                "iterations": final["iteration"],
                "test_error": final["test_error"],
                "param_l2": final["param_l2"],
                "corner_px": final["corner_px"],
                "_order": (model_order(spec.variant, spec.warp_ops), config.sigma),
            }
        )
    if len({r["experiment"] for r in rows}) > 1:
        raise DataFormatError("cannot mix planar and mnist runs in one report")
    rows.sort(key=lambda r: r["_order"])
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, REPORT_HEADER, extrasaction="ignore")
            writer.writeheader()
            writer.writerows(rows)
    return _format_table(rows)


def _format_table(rows) -> str:
    planar = rows[0]["experiment"] == "planar"
    sigmas = sorted({r["sigma"] for r in rows})
    by_model = {}
    for r in rows:
        key = (r["model"], r["arch"])
        by_model.setdefault(key, {"capacity": r["capacity"], "cells": {}})["cells"][r["sigma"]] = r
    unit = "param L2 / corner px" if planar else "test error %"
    head = ["model", "arch", "capacity"] + [f"sigma={s:g}" for s in sigmas]
    lines = [[*k, str(v["capacity"])] + [_cell(v["cells"].get(s), planar) for s in sigmas] for k, v in by_model.items()]
    widths = [max(len(x) for x in col) for col in zip(head, *lines)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    out = [f"# {unit}", fmt.format(*head), fmt.format(*("-" * w for w in widths))]
    out += [fmt.format(*line) for line in lines]
    return "\n".join(out)


def _cell(row, planar):
    if row is None:
        return "-"
    if planar:
        return f"{row['param_l2']:.4f} / {row['corner_px']:.3f}"
    return f"{row['test_error']:.3f}"


# -- figures ------------------------------------------------------------------------


def _tile(images, rows, cols, pad=2, fill=1.0):
    """Lay out ``rows*cols`` ``(H, W)`` images in a grid with ``pad``-pixel borders."""
    h, w = images[0].shape
    canvas = np.full((rows * (h + pad) + pad, cols * (w + pad) + pad), fill)
    for idx, im in enumerate(images):
        r, c = divmod(idx, cols)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        canvas[y : y + h, x : x + w] = im
    return canvas


def _figure_inputs(config, data_root, n):
    if config.experiment == "planar":
        source, box = _planar_setup(config)
        frame = FrameSpec.from_box(box)
        p = planar_eval_set(config, box)[:n]
        return source, p, frame, None
    test_x, test_y = load_mnist(data_root or config.data_root, "test")
    batch = _mnist_eval(config, test_x, test_y)[0]
    return batch.source[:n], batch.p_init[:n], batch.frame, batch.labels[:n]


def export_figures(checkpoint, out_dir, data_root=None, n_samples=10) -> list:
    """Write alignment strips, class mean/variance panels and a boundary-effect panel.

    Returns the written paths.
    """
    pipe, config = load_checkpoint(checkpoint)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    source, p, frame, _ = _figure_inputs(config, data_root, n_samples)
    trace = pipe.forward(source, p, frame)
    steps = trace.step_images
    if len(steps) == 1:
        steps = steps * 2  # CNN: input and "final" coincide
    images = [im[i, 0] for im in steps for i in range(len(p))]
    path = out / "alignment_strips.png"
    save_image(path, _tile(images, len(steps), len(p)))
    written.append(path)

    if config.experiment == "mnist":
        test_x, test_y = load_mnist(data_root or config.data_root, "test")
        _, aligned, labels = evaluate_mnist(pipe, _mnist_eval(config, test_x, test_y), return_aligned=True)
        stats = class_appearance_stats(aligned, labels)
        path = out / "class_means.png"
        save_image(path, _tile([m[0] for m in stats["means"]], 1, 10))
        written.append(path)
        var = stats["variances"][:, 0]
        path = out / "class_variances.png"
        save_image(path, _tile(list(var / max(var.max(), 1e-12)), 1, 10))
        written.append(path)

    path = out / "boundary_effect.png"
    save_image(path, boundary_effect_panel(source, p, frame, pipe.family, pipe.out_size))
    written.append(path)
    return written


def zoom_out_params(family, scale=1.5):
    """Warp that makes the output cover ``scale`` times the canonical square."""
    return from_matrix(np.diag([scale, scale, 1.0]), family)


def boundary_paths(source, p, frame, family, out_size, scale=1.5):
    """Zoom-out applied by passing parameters vs by resampling the crop.

    Returns ``(param_path, image_path)``, both ``(B, C, H, W)``.
    """
    p = np.atleast_2d(p)
    zoom = zoom_out_params(family, scale)
    # resampling the crop in its own frame applies the zoom on the right: M(p) M(zoom)
    p_zoom = from_matrix(to_matrix(p, family) @ to_matrix(zoom, family), family)
    by_params = warp_image(source, p_zoom, family, frame, out_size)
    zoom = np.broadcast_to(zoom, p.shape)
    crop = warp_image(source, p, family, frame, out_size)
    by_images = warp_image(crop, zoom, family, FrameSpec.for_image(*out_size), out_size)
    return by_params, by_images


def boundary_effect_panel(source, p, frame, family, out_size, scale=1.5):
    a, b = boundary_paths(source, p, frame, family, out_size, scale)
    return _tile([a[i, 0] for i in range(len(a))] + [b[i, 0] for i in range(len(b))], 2, len(a))
