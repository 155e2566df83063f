"""Activation correction: per-channel mean offsets between FP and quantized activations.

Each correction is a vector over the channel axis of a hook point. It is the
calibration-set mean of the token-averaged difference between full-precision
and quantized activations, and at inference it is broadcast-added over
tokens. Corrections are built hook by hook with earlier ones already active,
so calibration and inference follow the same forward path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import checkpoint
from .model import ForwardTrace, Runtime, ViTConfig, forward, hook_dim, hook_name
from .quant import QuantizedModel
from .tensor import Tensor


class HookMismatchError(ValueError):
    pass


@dataclass
class AcmSet:
    gamma: Optional[int]
    points: List[int] = field(default_factory=list)
    vectors: List[np.ndarray] = field(default_factory=list)
    num_samples: int = 1

    def __post_init__(self):
        if len(self.points) != len(self.vectors):
            raise HookMismatchError("points and vectors differ in length")
        if any(b <= a for a, b in zip(self.points, self.points[1:])):
            raise HookMismatchError(f"hook points must be strictly increasing, got {self.points}")
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")
        self.vectors = [np.asarray(v, dtype=np.float64) for v in self.vectors]

    def as_dict(self) -> Dict[int, np.ndarray]:
        return dict(zip(self.points, self.vectors))

    def check(self, cfg: ViTConfig) -> None:
        for p, v in zip(self.points, self.vectors):
            try:
                dim = hook_dim(cfg, p)
            except ValueError as err:
                raise HookMismatchError(str(err)) from None
            if v.shape != (dim,):
                raise HookMismatchError(
                    f"correction for {hook_name(cfg, p)} has shape {v.shape}, expected ({dim},)"
                )

    @classmethod
    def zeros(cls, cfg: ViTConfig, gamma: Optional[int] = None, include_head: bool = True) -> "AcmSet":
        pts = hook_points(cfg, gamma, include_head)
        return cls(gamma, pts, [np.zeros(hook_dim(cfg, p)) for p in pts], 1)


def hook_points(cfg: ViTConfig, gamma: Optional[int] = None, include_head: bool = True) -> List[int]:
    """Block outputs every ``gamma`` blocks, then the final-norm and logits points."""
    L = cfg.num_layers
    pts = list(range(gamma, L + 1, gamma)) if gamma else []
    if include_head:
        pts += [L + 1, L + 2]
    return pts


def _channel_mean(x: np.ndarray) -> np.ndarray:
    # (B, N, D) -> (B, D); logits (B, C) pass through
    return x.mean(axis=1) if x.ndim == 3 else x


class CorrectedRuntime(Runtime):
    def __init__(self, qmodel: QuantizedModel, acm: AcmSet):
        acm.check(qmodel.model.config)
        self.qmodel = qmodel
        self.corrections = acm.as_dict()

    def weight(self, name, w):
        return self.qmodel.weight(name, w)

    def act(self, site, x):
        return self.qmodel.act(site, x)

    def hook(self, point, x):
        c = self.corrections.get(point)
        return x if c is None else Tensor(x.data + c)


class _AcmBuilder(CorrectedRuntime):
    """Computes each correction on the fly from the batch it is running on."""

    def __init__(self, qmodel: QuantizedModel, fp_trace: ForwardTrace, points: Sequence[int]):
        self.qmodel = qmodel
        self.fp_trace = fp_trace
        self.targets = set(points)
        self.corrections = {}
        self.pre_correction = {}

    def hook(self, point, x):
        if point in self.targets:
            fp = _channel_mean(self.fp_trace.hooks[point].data)
            q = _channel_mean(x.data)
            self.pre_correction[point] = x.data
            self.corrections[point] = (fp - q).mean(axis=0)
        return super().hook(point, x)


def compute_acm(fp_model, qmodel: QuantizedModel, samples, gamma: Optional[int] = None,
                include_head: bool = True) -> AcmSet:
    """Mean FP-minus-quantized activation per hook point over ``samples``."""
    samples = [np.asarray(s, dtype=np.float64) for s in samples]
    if not samples:
        raise ValueError("ACM needs at least one calibration sample")
    cfg = fp_model.config
    if qmodel.model.config != cfg:
        raise HookMismatchError("quantized model and FP model have different architectures")
    points = hook_points(cfg, gamma, include_head)
    batch = np.stack(samples)
    fp_trace = forward(batch, fp_model, trace=True)
    builder = _AcmBuilder(qmodel, fp_trace, points)
    forward(batch, qmodel.model, runtime=builder)
    return AcmSet(gamma, points, [builder.corrections[p] for p in points], len(samples))


def corrected_forward(qmodel: QuantizedModel, acm: AcmSet, image, trace: bool = False) -> ForwardTrace:
    return forward(image, qmodel.model, trace=trace, runtime=CorrectedRuntime(qmodel, acm))


def acm_param_count(acm: AcmSet) -> int:
    return int(sum(v.size for v in acm.vectors))


def save_acm(acm: AcmSet, path) -> None:
    tensors = {"acm.meta": np.array([float(acm.gamma or 0), float(acm.num_samples)])}
    tensors.update({f"acm.hook{p}": v for p, v in zip(acm.points, acm.vectors)})
    checkpoint.write_tensors(path, tensors)


def load_acm(path) -> AcmSet:
    tensors = checkpoint.read_tensors(path)
    meta = tensors.pop("acm.meta")
    items = sorted((int(k[len("acm.hook"):]), v) for k, v in tensors.items())
    gamma = int(meta[0]) or None
    return AcmSet(gamma, [p for p, _ in items], [v for _, v in items], int(meta[1]))
