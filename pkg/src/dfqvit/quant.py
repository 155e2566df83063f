"""Uniform fake quantization: symmetric weights, asymmetric activations.

All matmul layers (patch embedding, q/k/v/output projections, both MLP
layers and the classifier head) consume fake-quantized weights and
fake-quantized inputs. Layer norm, softmax, GELU, attention products and
residual adds stay in float.

A bit width of 32 is the W32/A32 full-precision reference: such sites keep
their params for the record but pass values through untouched, so inputs
outside the calibrated range are not clipped.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Optional

import numpy as np

from .model import (
    ForwardTrace,
    Runtime,
    ViTModel,
    activation_site_names,
    forward,
    linear_weight_names,
)
from .tensor import Tensor

SYMMETRIC = "symmetric"
ASYMMETRIC = "asymmetric"
FULL_PRECISION_BITS = 32


class UncalibratedError(RuntimeError):
    pass


@dataclass(frozen=True)
class QuantParams:
    bits: int
    scale: float
    zero_point: int = 0
    mode: str = SYMMETRIC

    def __post_init__(self):
        if not 2 <= self.bits <= 32:
            raise ValueError(f"bits must lie in [2, 32], got {self.bits}")
        if not (self.scale > 0 and np.isfinite(self.scale)):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        if self.mode not in (SYMMETRIC, ASYMMETRIC):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == SYMMETRIC and self.zero_point != 0:
            raise ValueError("symmetric quantization requires zero_point == 0")
        if not self.qmin <= self.zero_point <= self.qmax:
            raise ValueError(f"zero_point {self.zero_point} outside [{self.qmin}, {self.qmax}]")

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bits - 1)) if self.mode == SYMMETRIC else 0

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1 if self.mode == SYMMETRIC else 2 ** self.bits - 1


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(x, p: QuantParams):
    """Integer codes ``clip(round(x / scale) + zero_point, qmin, qmax)``."""
    q = np.clip(round_half_away(np.asarray(x, dtype=np.float64) / p.scale) + p.zero_point,
                p.qmin, p.qmax).astype(np.int64)
    return int(q) if q.ndim == 0 else q


def dequantize(q, p: QuantParams):
    """``(q - zero_point) * scale``; codes outside the representable range are rejected."""
    qa = np.asarray(q, dtype=np.int64)
    if qa.size and (qa.min() < p.qmin or qa.max() > p.qmax):
        raise ValueError(f"code outside representable range [{p.qmin}, {p.qmax}]")
    out = (qa - p.zero_point).astype(np.float64) * p.scale
    return float(out) if out.ndim == 0 else out


def fake_quantize(x: np.ndarray, p: QuantParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    q = np.clip(round_half_away(x / p.scale) + p.zero_point, p.qmin, p.qmax)
    return (q - p.zero_point) * p.scale


def fit_weight_params(w, bits: int) -> QuantParams:
    """Symmetric per-tensor params with ``scale = max|w| / (2^(k-1) - 1)``."""
    w = np.asarray(w.data if isinstance(w, Tensor) else w, dtype=np.float64)
    if w.size == 0:
        raise ValueError("cannot fit quantization params to an empty tensor")
    peak = float(np.abs(w).max())
    scale = peak / (2 ** (bits - 1) - 1) if peak > 0 else 1.0
    return QuantParams(bits, scale, 0, SYMMETRIC)


def fit_activation_params(observed_min: float, observed_max: float, bits: int) -> QuantParams:
    """Asymmetric params covering ``[observed_min, observed_max]``.

    The range is widened to contain zero. Otherwise an all-positive range
    would need a negative zero point, and clamping it to 0 would cut off
    the top of the observed range.
    """
    lo, hi = float(observed_min), float(observed_max)
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise ValueError(f"non-finite activation statistics ({lo}, {hi})")
    if lo > hi:
        raise ValueError(f"observed_min {lo} exceeds observed_max {hi}")
    levels = 2 ** bits - 1
    if hi == lo:
        return QuantParams(bits, 1.0, int(np.clip(round_half_away(-lo), 0, levels)), ASYMMETRIC)
    lo, hi = min(lo, 0.0), max(hi, 0.0)
    scale = (hi - lo) / levels
    zero = int(np.clip(round_half_away(-lo / scale), 0, levels))
    return QuantParams(bits, scale, zero, ASYMMETRIC)


class QuantizedModel(Runtime):
    """Fake-quantized view of a full-precision model; usable as a forward runtime."""

    def __init__(self, model: ViTModel, weight_params: Dict[str, QuantParams],
                 act_params: Dict[str, QuantParams], include_patch_embed: bool = True):
        self.model = model
        self.include_patch_embed = include_patch_embed
        self.weight_params = dict(weight_params)
        self.act_params = dict(act_params)
        self.sites = activation_site_names(model.config, include_patch_embed)
        self._qweights = {
            name: Tensor(fake_quantize(model[name].data, p)) for name, p in self.weight_params.items()
            if p.bits < FULL_PRECISION_BITS
        }

    def weight(self, name: str, w: Tensor) -> Tensor:
        return self._qweights.get(name, w)

    def act(self, site: str, x: Tensor) -> Tensor:
        if site not in self.sites:
            return x
        p = self.act_params.get(site)
        if p is None:
            raise UncalibratedError(f"activation site {site} has no calibrated params")
        if p.bits >= FULL_PRECISION_BITS:
            return x
        return Tensor(fake_quantize(x.data, p))

    @property
    def weight_bits(self) -> Optional[int]:
        return next(iter(self.weight_params.values())).bits if self.weight_params else None

    def records(self) -> List[dict]:
        out = [dict(site=k, kind="weight", **asdict(p)) for k, p in self.weight_params.items()]
        out += [dict(site=k, kind="activation", **asdict(p)) for k, p in self.act_params.items()]
        return out


class _RangeObserver(Runtime):
    """Weight-quantized forward that records per-site input ranges."""

    def __init__(self, qmodel: QuantizedModel, percentile: float):
        self.qmodel = qmodel
        self.percentile = percentile
        self.lo: Dict[str, float] = {}
        self.hi: Dict[str, float] = {}
        self.values: Dict[str, list] = {}

    def weight(self, name, w):
        return self.qmodel.weight(name, w)

    def act(self, site, x):
        if site in self.qmodel.sites:
            d = x.data
            if self.percentile < 100.0:
                self.values.setdefault(site, []).append(d.ravel())
            self.lo[site] = min(self.lo.get(site, np.inf), float(d.min()))
            self.hi[site] = max(self.hi.get(site, -np.inf), float(d.max()))
        return x

    def ranges(self) -> Dict[str, tuple]:
        if self.percentile >= 100.0:
            return {s: (self.lo[s], self.hi[s]) for s in self.lo}
        out = {}
        for s, chunks in self.values.items():
            v = np.concatenate(chunks)
            out[s] = (float(np.percentile(v, 100.0 - self.percentile)),
                      float(np.percentile(v, self.percentile)))
        return out


def calibrate(
    model: ViTModel,
    samples: Iterable[np.ndarray],
    bits_w: int,
    bits_a: int,
    include_patch_embed: bool = True,
    percentile: float = 100.0,
) -> QuantizedModel:
    """Fit weight params from weights and activation params from sample ranges.

    Activation ranges are observed with weights already fake-quantized, so
    each site sees the distribution it will receive at inference.
    """
    samples = [np.asarray(s, dtype=np.float64) for s in samples]
    if not samples:
        raise ValueError("calibration needs at least one sample")
    wparams = {name: fit_weight_params(model[name], bits_w)
               for name in linear_weight_names(model.config, include_patch_embed)}
    qmodel = QuantizedModel(model, wparams, {}, include_patch_embed)
    observer = _RangeObserver(qmodel, percentile)
    forward(np.stack(samples), model, runtime=observer)
    qmodel.act_params = {site: fit_activation_params(lo, hi, bits_a)
                         for site, (lo, hi) in observer.ranges().items()}
    missing = [s for s in qmodel.sites if s not in qmodel.act_params]
    if missing:
        raise UncalibratedError(f"calibration never reached sites {missing}")
    return qmodel


def quantized_forward(qmodel: QuantizedModel, image, trace: bool = False) -> ForwardTrace:
    return forward(image, qmodel.model, trace=trace, runtime=qmodel)


def save_quant_params(qmodel: QuantizedModel, path) -> None:
    with open(path, "w") as fh:
        for rec in qmodel.records():
            fh.write(json.dumps(rec) + "\n")


def load_quant_params(model: ViTModel, path, include_patch_embed: Optional[bool] = None) -> QuantizedModel:
    """Rebuild a quantized model; patch-embedding coverage is inferred when not given."""
    wparams, aparams = {}, {}
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            kind, site = rec.pop("kind"), rec.pop("site")
            (wparams if kind == "weight" else aparams)[site] = QuantParams(**rec)
    if include_patch_embed is None:
        include_patch_embed = "patch_embed.weight" in wparams
    return QuantizedModel(model, wparams, aparams, include_patch_embed)
