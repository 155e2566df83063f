"""A plain pre-norm vision transformer built on :mod:`dfqvit.tensor`.

Parameters live in a flat name -> Tensor mapping using dotted names::

    patch_embed.weight  (3*p*p, D)     patch_embed.bias  (D,)
    pos_embed           (N, D)         cls_token         (1, 1, D)  [optional]
    block{i}.norm1.gain / .bias        (D,)
    block{i}.attn.wq / .wk / .wv / .wo (D, D)   .bq / .bk / .bv / .bo (D,)
    block{i}.norm2.gain / .bias        (D,)
    block{i}.mlp.fc1 (D, R*D)  .b1 (R*D,)   block{i}.mlp.fc2 (R*D, D)  .b2 (D,)
    norm.gain / norm.bias              (D,)
    head.weight (D, C)   head.bias (C,)

Linear weights are stored ``(in, out)`` so a layer computes ``x @ W + b``.

The forward pass exposes three interception points through :class:`Runtime`:
weights of matmul layers, inputs of matmul layers ("activation sites") and
hook points where activation corrections may be added. Hook points are
numbered in forward order: ``1..L`` are block outputs, ``L+1`` is the final
layer-norm output and ``L+2`` the logits.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

CHANNELS = 3


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 4
    hidden_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    mlp_ratio: int = 4
    num_classes: int = 10
    use_cls_token: bool = False

    def __post_init__(self):
        for name in ("image_size", "patch_size", "hidden_dim", "num_layers",
                     "num_heads", "mlp_ratio", "num_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.image_size % self.patch_size:
            raise ValueError("patch_size must divide image_size")
        if self.hidden_dim % self.num_heads:
            raise ValueError("num_heads must divide hidden_dim")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + int(self.use_cls_token)

    @property
    def mlp_dim(self) -> int:
        return self.hidden_dim * self.mlp_ratio

    def to_dict(self) -> dict:
        return asdict(self)


def parameter_shapes(cfg: ViTConfig) -> Dict[str, tuple]:
    D, p, C = cfg.hidden_dim, cfg.patch_size, cfg.num_classes
    shapes = {
        "patch_embed.weight": (CHANNELS * p * p, D),
        "patch_embed.bias": (D,),
        "pos_embed": (cfg.num_tokens, D),
    }
    if cfg.use_cls_token:
        shapes["cls_token"] = (1, 1, D)
    for i in range(cfg.num_layers):
        b = f"block{i}"
        shapes.update({
            f"{b}.norm1.gain": (D,), f"{b}.norm1.bias": (D,),
            f"{b}.attn.wq": (D, D), f"{b}.attn.bq": (D,),
            f"{b}.attn.wk": (D, D), f"{b}.attn.bk": (D,),
            f"{b}.attn.wv": (D, D), f"{b}.attn.bv": (D,),
            f"{b}.attn.wo": (D, D), f"{b}.attn.bo": (D,),
            f"{b}.norm2.gain": (D,), f"{b}.norm2.bias": (D,),
            f"{b}.mlp.fc1": (D, cfg.mlp_dim), f"{b}.mlp.b1": (cfg.mlp_dim,),
            f"{b}.mlp.fc2": (cfg.mlp_dim, D), f"{b}.mlp.b2": (D,),
        })
    shapes.update({"norm.gain": (D,), "norm.bias": (D,),
                   "head.weight": (D, C), "head.bias": (C,)})
    return shapes


def linear_weight_names(cfg: ViTConfig, include_patch_embed: bool = True) -> List[str]:
    """Names of weights consumed by matmul layers, in forward order."""
    names = ["patch_embed.weight"] if include_patch_embed else []
    for i in range(cfg.num_layers):
        names += [f"block{i}.attn.{w}" for w in ("wq", "wk", "wv", "wo")]
        names += [f"block{i}.mlp.fc1", f"block{i}.mlp.fc2"]
    return names + ["head.weight"]


def activation_site_names(cfg: ViTConfig, include_patch_embed: bool = True) -> List[str]:
    """Inputs of matmul layers, in forward order (q/k/v share one input)."""
    names = ["patch_embed.in"] if include_patch_embed else []
    for i in range(cfg.num_layers):
        names += [f"block{i}.attn.in", f"block{i}.attn.proj_in",
                  f"block{i}.mlp.fc1_in", f"block{i}.mlp.fc2_in"]
    return names + ["head.in"]


def hook_name(cfg: ViTConfig, point: int) -> str:
    L = cfg.num_layers
    if 1 <= point <= L:
        return f"block{point - 1}.out"
    if point == L + 1:
        return "norm.out"
    if point == L + 2:
        return "logits"
    raise ValueError(f"no hook point {point} in a {L}-layer model")


def hook_dim(cfg: ViTConfig, point: int) -> int:
    hook_name(cfg, point)
    return cfg.num_classes if point == cfg.num_layers + 2 else cfg.hidden_dim


class ViTModel:
    """Configuration plus named parameter tensors."""

    def __init__(self, config: ViTConfig, params: Dict[str, Tensor]):
        expected = parameter_shapes(config)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ShapeError(f"parameter names disagree with config: missing {missing}, extra {extra}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {params[name].shape}")
        self.config = config
        self.params = {name: params[name] for name in expected}

    @classmethod
    def init(cls, config: ViTConfig, seed: int = 0) -> "ViTModel":
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in parameter_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "gain":
                arr = np.ones(shape)
            elif len(shape) == 2 and name != "pos_embed":
                bound = math.sqrt(6.0 / (shape[0] + shape[1]))
                arr = rng.uniform(-bound, bound, shape)
            elif name in ("pos_embed", "cls_token"):
                arr = rng.normal(0.0, 0.02, shape)
            else:
                arr = np.zeros(shape)
            params[name] = Tensor(arr)
        return cls(config, params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "ViTModel":
        return ViTModel(self.config, {k: Tensor(v.data.copy()) for k, v in self.params.items()})

    def requires_grad_(self, flag: bool = True) -> "ViTModel":
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = None
        return self


class Runtime:
    """Interception points of the forward pass; the base class is a no-op."""

    def weight(self, name: str, w: Tensor) -> Tensor:
        return w

    def act(self, site: str, x: Tensor) -> Tensor:
        return x

    def hook(self, point: int, x: Tensor) -> Tensor:
        return x


FULL_PRECISION = Runtime()


@dataclass
class ForwardTrace:
    logits: Tensor
    msa_outputs: List[Tensor] = field(default_factory=list)
    hooks: Dict[int, Tensor] = field(default_factory=dict)


def patch_embed(images: Tensor, model: ViTModel, runtime: Runtime = FULL_PRECISION) -> Tensor:
    """Split ``(B, 3, S, S)`` images into patches and project them to tokens."""
    cfg = model.config
    S, p = cfg.image_size, cfg.patch_size
    if images.shape[1:] != (CHANNELS, S, S):
        raise ShapeError(f"expected images of shape (B, {CHANNELS}, {S}, {S}), got {images.shape}")
    B, g = images.shape[0], S // p
    x = T.reshape(images, (B, CHANNELS, g, p, g, p))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    x = T.reshape(x, (B, g * g, CHANNELS * p * p))
    x = runtime.act("patch_embed.in", x)
    x = x @ runtime.weight("patch_embed.weight", model["patch_embed.weight"]) + model["patch_embed.bias"]
    if cfg.use_cls_token:
        cls = model["cls_token"] * np.ones((B, 1, 1))
        x = T.concat([cls, x], axis=1)
    return x + model["pos_embed"]


def attention_head(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """``softmax(q k^T / sqrt(d)) v`` over the last two axes."""
    if q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(f"q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    d = q.shape[-1]
    scores = T.scale(q @ T.swapaxes(k, -1, -2), 1.0 / math.sqrt(d))
    return T.softmax(scores, axis=-1) @ v


def msa(x: Tensor, model: ViTModel, block: int, runtime: Runtime = FULL_PRECISION) -> Tensor:
    """Multi-head self-attention of block ``block`` on tokens ``x`` of shape (B, N, D)."""
    cfg = model.config
    if x.ndim != 3 or x.shape[-1] != cfg.hidden_dim:
        raise ShapeError(f"msa expects (B, N, {cfg.hidden_dim}), got {x.shape}")
    B, N, D = x.shape
    H, d = cfg.num_heads, cfg.head_dim
    pre = f"block{block}.attn"

    def heads(name):
        y = x @ runtime.weight(f"{pre}.w{name}", model[f"{pre}.w{name}"]) + model[f"{pre}.b{name}"]
        return T.transpose(T.reshape(y, (B, N, H, d)), (0, 2, 1, 3))

    out = attention_head(heads("q"), heads("k"), heads("v"))
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (B, N, D))
    out = runtime.act(f"{pre}.proj_in", out)
    return out @ runtime.weight(f"{pre}.wo", model[f"{pre}.wo"]) + model[f"{pre}.bo"]


def mlp(x: Tensor, model: ViTModel, block: int, runtime: Runtime = FULL_PRECISION) -> Tensor:
    pre = f"block{block}.mlp"
    x = runtime.act(f"{pre}.fc1_in", x)
    x = T.gelu(x @ runtime.weight(f"{pre}.fc1", model[f"{pre}.fc1"]) + model[f"{pre}.b1"])
    x = runtime.act(f"{pre}.fc2_in", x)
    return x @ runtime.weight(f"{pre}.fc2", model[f"{pre}.fc2"]) + model[f"{pre}.b2"]


def forward(
    images,
    model: ViTModel,
    trace: bool = False,
    runtime: Optional[Runtime] = None,
) -> ForwardTrace:
    """Run the model on ``(B, 3, S, S)`` images, or one ``(3, S, S)`` image.

    For a single image the logits have shape ``(C,)``; trace tensors always
    keep the batch axis.
    """
    runtime = runtime or FULL_PRECISION
    images = T.as_tensor(images)
    single = images.ndim == 3
    if single:
        images = T.reshape(images, (1,) + images.shape)
    cfg = model.config
    L = cfg.num_layers
    result = ForwardTrace(logits=None)

    x = patch_embed(images, model, runtime)
    for i in range(L):
        b = f"block{i}"
        h = T.layer_norm(x, model[f"{b}.norm1.gain"], model[f"{b}.norm1.bias"])
        h = msa(runtime.act(f"{b}.attn.in", h), model, i, runtime)
        if trace:
            result.msa_outputs.append(h)
        x = x + h
        h = T.layer_norm(x, model[f"{b}.norm2.gain"], model[f"{b}.norm2.bias"])
        x = x + mlp(h, model, i, runtime)
        x = runtime.hook(i + 1, x)
        if trace:
            result.hooks[i + 1] = x

    x = T.layer_norm(x, model["norm.gain"], model["norm.bias"])
    x = runtime.hook(L + 1, x)
    if trace:
        result.hooks[L + 1] = x
    pooled = x[:, 0] if cfg.use_cls_token else T.mean(x, axis=1)
    pooled = runtime.act("head.in", pooled)
    logits = pooled @ runtime.weight("head.weight", model["head.weight"]) + model["head.bias"]
    logits = runtime.hook(L + 2, logits)
    if trace:
        result.hooks[L + 2] = logits
    result.logits = T.reshape(logits, (cfg.num_classes,)) if single else logits
    return result


def predict(model: ViTModel, images: np.ndarray, batch_size: int = 256,
            runtime: Optional[Runtime] = None) -> np.ndarray:
    """Logits for a stack of images, evaluated in batches without a tape."""
    images = np.asarray(images, dtype=np.float64)
    outs = [forward(images[i:i + batch_size], model, runtime=runtime).logits.data
            for i in range(0, len(images), batch_size)]
    return np.concatenate(outs, axis=0)
