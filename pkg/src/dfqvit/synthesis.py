"""Calibration image synthesis with an easy-to-hard crop schedule.

Each sample starts as Gaussian noise on a full-resolution canvas. Every
iteration draws a random resized crop whose minimum area follows a cosine
decay from ``delta_upper`` to ``delta_lower``, evaluates the synthesis loss
on the crop, and takes one Adam step on the canvas. Crop and resize are a
linear map, so the gradient on the crop is pulled back onto the canvas
exactly; the Adam state lives on the canvas.

The loss per sample is

    patch-similarity entropy loss + alpha * one-hot loss + beta * TV loss

where the entropy term is minus the sum over blocks of the differential
entropy of the off-diagonal patch cosine similarities of that block's
attention output.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import kde
from . import tensor as T
from .model import ForwardTrace, ViTModel, forward
from .optim import AdamState, adam_step
from .tensor import Tensor

log = logging.getLogger(__name__)

E2H = "e2h"
FIXED = "fixed"


class SynthesisError(RuntimeError):
    pass


@dataclass
class SynthesisConfig:
    iterations: int = 500
    delta_lower: float = 0.08
    delta_upper: float = 1.0
    alpha: float = 1.0
    beta: float = 0.05
    lr: float = 0.25
    strategy: str = E2H
    init_mean: float = 0.5
    init_std: float = 0.25
    bandwidth_floor: float = kde.BANDWIDTH_FLOOR
    grid_points: int = kde.GRID_POINTS
    aspect_ratio: Tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0)
    clip_images: bool = True  # project the canvas onto [0, 1] after every step
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0 < self.delta_lower <= self.delta_upper <= 1:
            raise ValueError(
                f"need 0 < delta_lower <= delta_upper <= 1, got {self.delta_lower}, {self.delta_upper}"
            )
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")
        if self.strategy not in (E2H, FIXED):
            raise ValueError(f"strategy must be {E2H!r} or {FIXED!r}")
        self.aspect_ratio = tuple(self.aspect_ratio)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["aspect_ratio"] = list(self.aspect_ratio)
        return d


# losses

def patch_similarity(msa_out: Tensor, eps: float = 1e-12) -> Tensor:
    """Cosine similarity between token rows: ``(..., N, D) -> (..., N, N)``."""
    if msa_out.shape[-2] < 2:
        raise T.ShapeError("patch similarity needs at least two tokens")
    norms = T.sqrt(T.sum(msa_out * msa_out, axis=-1, keepdims=True))
    unit = msa_out / T.maximum(norms, eps)
    return unit @ T.swapaxes(unit, -1, -2)


def _upper_entries(gamma: Tensor) -> Tensor:
    n = gamma.shape[-1]
    iu, ju = np.triu_indices(n, k=1)
    return gamma[..., iu, ju]


def similarity_entropy(msa_out: Tensor, cfg: Optional[SynthesisConfig] = None) -> Tensor:
    """Per-sample KDE entropy of the strict upper triangle of patch similarity."""
    cfg = cfg or SynthesisConfig()
    if msa_out.ndim == 2:
        msa_out = T.reshape(msa_out, (1,) + msa_out.shape)
    centers = _upper_entries(patch_similarity(msa_out))
    h = kde.silverman(centers, cfg.bandwidth_floor)
    return kde.kde_entropy(centers, h, cfg.grid_points)


def pse_loss(trace: ForwardTrace, cfg: Optional[SynthesisConfig] = None,
             num_layers: Optional[int] = None) -> Tensor:
    """Minus the summed similarity entropy over all blocks, per sample."""
    if not trace.msa_outputs:
        raise ValueError("trace holds no attention outputs; run forward with trace=True")
    if num_layers is not None and len(trace.msa_outputs) != num_layers:
        raise ValueError(f"trace has {len(trace.msa_outputs)} attention outputs, expected {num_layers}")
    total = None
    for out in trace.msa_outputs:
        ent = similarity_entropy(out, cfg)
        total = ent if total is None else total + ent
    return -total


def one_hot_loss(logits: Tensor, classes) -> Tensor:
    C = logits.shape[-1]
    classes = np.asarray(classes, dtype=np.int64)
    if classes.size and (classes.min() < 0 or classes.max() >= C):
        raise ValueError(f"target class outside [0, {C})")
    return T.cross_entropy(logits, classes)


def tv_loss(images: Tensor) -> Tensor:
    """Anisotropic total variation per image, divided by the spatial pixel count."""
    if images.shape[-1] < 2 or images.shape[-2] < 2:
        raise T.ShapeError(f"total variation needs at least 2x2 pixels, got {images.shape}")
    single = images.ndim == 3
    if single:
        images = T.reshape(images, (1,) + images.shape)
    H, W = images.shape[-2:]
    dy = T.abs(images[:, :, 1:, :] - images[:, :, :-1, :])
    dx = T.abs(images[:, :, :, 1:] - images[:, :, :, :-1])
    tv = T.scale(T.sum(dy, axis=(1, 2, 3)) + T.sum(dx, axis=(1, 2, 3)), 1.0 / (H * W))
    return T.reshape(tv, ()) if single else tv


def loss_components(trace: ForwardTrace, images: Tensor, classes,
                    cfg: Optional[SynthesisConfig] = None) -> Dict[str, Tensor]:
    """Per-sample loss terms and their weighted total."""
    cfg = cfg or SynthesisConfig()
    logits = trace.logits
    if logits.ndim == 1:
        logits = T.reshape(logits, (1,) + logits.shape)
    comps = {
        "pse": pse_loss(trace, cfg),
        "oh": one_hot_loss(logits, np.atleast_1d(classes)),
        "tv": tv_loss(images if images.ndim == 4 else T.reshape(images, (1,) + images.shape)),
    }
    comps["total"] = comps["pse"] + T.scale(comps["oh"], cfg.alpha) + T.scale(comps["tv"], cfg.beta)
    return comps


def total_loss(trace: ForwardTrace, images: Tensor, classes,
               cfg: Optional[SynthesisConfig] = None) -> Tensor:
    return loss_components(trace, images, classes, cfg)["total"]


# crop schedule

def e2h_schedule(t: int, T_total: int, delta_lower: float, delta_upper: float) -> float:
    """Cosine decay from ``delta_upper`` at ``t = 0`` to ``delta_lower`` at ``t = T``."""
    if not 0 <= t <= T_total:
        raise ValueError(f"t must lie in [0, {T_total}], got {t}")
    if T_total < 1:
        raise ValueError("T must be >= 1")
    w = (1.0 + math.cos(math.pi * t / T_total)) / 2.0
    if w == 1.0:
        return delta_upper
    delta = delta_lower + (delta_upper - delta_lower) * w
    return min(delta_upper, max(delta_lower, delta))


def crop_scale(t: int, cfg: SynthesisConfig) -> float:
    if cfg.strategy == FIXED:
        return cfg.delta_upper
    return e2h_schedule(t, cfg.iterations, cfg.delta_lower, cfg.delta_upper)


@dataclass(frozen=True)
class CropBox:
    top: int
    left: int
    height: int
    width: int


def sample_crop(height: int, width: int, min_scale: float, max_scale: float,
                rng: np.random.Generator,
                ratio: Tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0)) -> CropBox:
    """Random area fraction and log-uniform aspect ratio, up to 10 draws.

    Draws that do not fit the image are rejected; after ten rejections the
    largest centered crop within the aspect-ratio bounds is used.
    """
    if min_scale > max_scale:
        raise ValueError(f"min_scale {min_scale} exceeds max_scale {max_scale}")
    area = height * width
    log_lo, log_hi = math.log(ratio[0]), math.log(ratio[1])
    for _ in range(10):
        target = area * rng.uniform(min_scale, max_scale)
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return CropBox(top, left, h, w)
    in_ratio = width / height
    if in_ratio < ratio[0]:
        w, h = width, int(round(width / ratio[0]))
    elif in_ratio > ratio[1]:
        h, w = height, int(round(height * ratio[1]))
    else:
        w, h = width, height
    return CropBox((height - h) // 2, (width - w) // 2, h, w)


def resize_matrix(start: int, length: int, in_size: int, out_size: int) -> np.ndarray:
    """Bilinear (half-pixel centers) map from ``in_size`` samples to ``out_size``,
    reading only the window ``[start, start + length)``."""
    A = np.zeros((out_size, in_size))
    scale_ = length / out_size
    for o in range(out_size):
        s = min(max((o + 0.5) * scale_ - 0.5, 0.0), length - 1.0)
        i0 = int(math.floor(s))
        i1 = min(i0 + 1, length - 1)
        frac = s - i0
        A[o, start + i0] += 1.0 - frac
        A[o, start + i1] += frac
    return A


def crop_matrices(box: CropBox, in_h: int, in_w: int, out_h: int, out_w: int):
    return (resize_matrix(box.top, box.height, in_h, out_h),
            resize_matrix(box.left, box.width, in_w, out_w))


def apply_crop(images: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """``rows @ image @ cols^T`` per image; ``rows``/``cols`` are (B, out, in)."""
    return T.matmul(T.matmul(Tensor(rows[:, None]), images), Tensor(np.swapaxes(cols, -1, -2)[:, None]))


def random_resized_crop(image, min_scale: float, max_scale: float, rng: np.random.Generator,
                        ratio: Tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0),
                        out_size: Optional[int] = None):
    """Crop a ``(C, H, W)`` image and resize it back to ``out_size`` (default H)."""
    image = np.asarray(image, dtype=np.float64)
    _, H, W = image.shape
    out = out_size or H
    box = sample_crop(H, W, min_scale, max_scale, rng, ratio)
    ry, rx = crop_matrices(box, H, W, out, out)
    return ry @ image @ rx.T, box


# optimization

@dataclass
class SynthesisResult:
    images: np.ndarray  # (count, 3, S, S)
    classes: np.ndarray
    seeds: List[Tuple[int, int]]
    history: np.ndarray  # (iterations, count) per-sample total loss on the crop
    final: Dict[str, np.ndarray] = field(default_factory=dict)
    initial_images: Optional[np.ndarray] = None
    crops: List[List[CropBox]] = field(default_factory=list)


def sample_streams(seed: int, index: int):
    """Independent (init, crop) generators for sample ``index`` of run ``seed``."""
    init_ss, crop_ss = np.random.SeedSequence([seed, index]).spawn(2)
    return np.random.default_rng(init_ss), np.random.default_rng(crop_ss)


def init_canvas(rng: np.random.Generator, shape, cfg: SynthesisConfig) -> np.ndarray:
    return np.clip(rng.normal(cfg.init_mean, cfg.init_std, size=shape), 0.0, 1.0)


def evaluate_losses(model: ViTModel, images: np.ndarray, classes, cfg: SynthesisConfig
                    ) -> Dict[str, np.ndarray]:
    x = Tensor(np.asarray(images, dtype=np.float64))
    comps = loss_components(forward(x, model, trace=True), x, classes, cfg)
    return {k: v.data.copy() for k, v in comps.items()}


def synthesize(model: ViTModel, cfg: SynthesisConfig, classes: Sequence[int],
               indices: Optional[Sequence[int]] = None, record_crops: bool = False) -> SynthesisResult:
    """Optimize one canvas per entry of ``classes``.

    Sample ``k`` draws its init and crops from ``sample_streams(cfg.seed, indices[k])``,
    so a sample's result does not depend on which others share the batch.
    """
    classes = np.asarray(classes, dtype=np.int64)
    indices = list(range(len(classes))) if indices is None else list(indices)
    if len(indices) != len(classes):
        raise ValueError("indices and classes differ in length")
    mcfg = model.config
    S = mcfg.image_size
    model.requires_grad_(False)

    streams = [sample_streams(cfg.seed, i) for i in indices]
    canvas = np.stack([init_canvas(init_rng, (3, S, S), cfg) for init_rng, _ in streams])
    x0 = canvas.copy()
    state = AdamState.like([canvas])
    history = np.empty((cfg.iterations, len(classes)))
    crops: List[List[CropBox]] = []

    for t in range(cfg.iterations):
        delta = crop_scale(t, cfg)
        boxes = [sample_crop(S, S, delta, cfg.delta_upper, crop_rng, cfg.aspect_ratio)
                 for _, crop_rng in streams]
        if record_crops:
            crops.append(boxes)
        mats = [crop_matrices(b, S, S, S, S) for b in boxes]
        rows = np.stack([m[0] for m in mats])
        cols = np.stack([m[1] for m in mats])

        x = Tensor(canvas, requires_grad=True)
        with T.Tape() as tape:
            crop = apply_crop(x, rows, cols)
            comps = loss_components(forward(crop, model, trace=True), crop, classes, cfg)
            loss = T.sum(comps["total"])
        if not np.all(np.isfinite(comps["total"].data)):
            detail = {k: v.data.tolist() for k, v in comps.items()}
            raise SynthesisError(f"non-finite synthesis loss at t={t}: {detail}")
        tape.backward(loss)
        adam_step([canvas], [x.grad], state, cfg.lr)
        if cfg.clip_images:
            np.clip(canvas, 0.0, 1.0, out=canvas)
        history[t] = comps["total"].data
        if log.isEnabledFor(logging.DEBUG) and (t % 50 == 0 or t == cfg.iterations - 1):
            log.debug("t=%d delta=%.3f mean loss %.4f", t, delta, history[t].mean())

    final = evaluate_losses(model, canvas, classes, cfg)
    return SynthesisResult(canvas, classes, [(cfg.seed, i) for i in indices], history,
                           final, x0, crops)


def round_robin_classes(count: int, num_classes: int) -> np.ndarray:
    return np.arange(count) % num_classes


def synthesize_batch(model: ViTModel, cfg: SynthesisConfig, count: int = 16) -> SynthesisResult:
    """``count`` samples with classes assigned round-robin over all classes."""
    if count < 1:
        raise ValueError("count must be >= 1")
    return synthesize(model, cfg, round_robin_classes(count, model.config.num_classes))


def crop_averaged_loss(model: ViTModel, images: np.ndarray, classes, cfg: SynthesisConfig,
                       scale: float, draws: int = 8, seed: int = 0) -> np.ndarray:
    """Per-sample total loss averaged over ``draws`` crops at area fraction ``scale``.

    Crops come from ``seed`` alone, so two image sets evaluated with the
    same arguments see identical crop geometry.
    """
    images = np.asarray(images, dtype=np.float64)
    B, _, S, _ = images.shape
    rng = np.random.default_rng(seed)
    acc = np.zeros(B)
    for _ in range(draws):
        boxes = [sample_crop(S, S, scale, scale, rng, cfg.aspect_ratio) for _ in range(B)]
        mats = [crop_matrices(b, S, S, S, S) for b in boxes]
        crop = apply_crop(Tensor(images), np.stack([m[0] for m in mats]), np.stack([m[1] for m in mats]))
        acc += total_loss(forward(crop, model, trace=True), crop, classes, cfg).data
    return acc / draws
