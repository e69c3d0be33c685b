"""Parameterized building blocks: linear maps, TDNN layers and drop path."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor, activation, context_gather, layer_norm

# x-vector frame-level contexts
DEFAULT_TDNN_CONTEXTS: tuple[tuple[int, ...], ...] = (
    (-2, -1, 0, 1, 2),
    (-2, 0, 2),
    (-3, 0, 3),
    (0,),
    (0,),
)


@dataclass
class LinearParams:
    W: Tensor
    b: Tensor

    def __post_init__(self):
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[1],):
            raise ValueError(f"inconsistent linear shapes W {self.W.shape}, b {self.b.shape}")

    @property
    def in_dim(self) -> int:
        return self.W.shape[0]

    @property
    def out_dim(self) -> int:
        return self.W.shape[1]


@dataclass
class TDNNLayerParams:
    context: tuple[int, ...]
    W: Tensor
    b: Tensor
    norm_gamma: Tensor
    norm_beta: Tensor

    def __post_init__(self):
        ctx = tuple(self.context)
        if list(ctx) != sorted(set(ctx)):
            raise ValueError(f"TDNN offsets must be strictly increasing, got {ctx}")
        if sorted(-c for c in ctx) != list(ctx):
            raise ValueError(f"TDNN offsets must be symmetric around 0, got {ctx}")
        self.context = ctx
        if self.W.shape[0] % len(ctx):
            raise ValueError(f"W rows {self.W.shape[0]} not a multiple of |context|={len(ctx)}")


@dataclass
class DropPathSpec:
    """Drop-path settings for one residual branch.

    ``forced`` overrides sampling: ``True`` keeps every sample's branch,
    ``False`` drops it. Tests use it to pin the mask.
    """

    p: float = 0.0
    mode: str = "eval"
    rng: np.random.Generator | None = None
    forced: bool | None = None

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise ValueError(f"drop path rate must be in [0, 1), got {self.p}")
        if self.mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {self.mode!r}")


def init_linear(rng: np.random.Generator, in_dim: int, out_dim: int) -> LinearParams:
    W = rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(in_dim, out_dim))
    return LinearParams(Tensor(W, requires_grad=True), Tensor(np.zeros(out_dim), requires_grad=True))


def init_tdnn_stack(
    rng: np.random.Generator,
    feat_dim: int,
    dims: Sequence[int],
    contexts: Sequence[Sequence[int]] = DEFAULT_TDNN_CONTEXTS,
) -> list[TDNNLayerParams]:
    if len(dims) != len(contexts):
        raise ValueError(f"{len(dims)} TDNN dims for {len(contexts)} contexts")
    layers = []
    in_dim = feat_dim
    for out_dim, ctx in zip(dims, contexts):
        fan_in = len(ctx) * in_dim
        layers.append(
            TDNNLayerParams(
                context=tuple(ctx),
                W=Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, out_dim)), True),
                b=Tensor(np.zeros(out_dim), True),
                norm_gamma=Tensor(np.ones(out_dim), True),
                norm_beta=Tensor(np.zeros(out_dim), True),
            )
        )
        in_dim = out_dim
    return layers


def linear_forward(x: Tensor, params: LinearParams) -> Tensor:
    if x.shape[-1] != params.in_dim:
        raise ValueError(f"linear expects trailing dim {params.in_dim}, got shape {x.shape}")
    return x @ params.W + params.b


def tdnn_layer_forward(x: Tensor, layer: TDNNLayerParams, act: str = "relu") -> Tensor:
    h = context_gather(x, layer.context) @ layer.W + layer.b
    return layer_norm(activation(h, act), layer.norm_gamma, layer.norm_beta)


def tdnn_stack_forward(x: Tensor, stack: Sequence[TDNNLayerParams], act: str = "relu") -> Tensor:
    """Frame-level backbone: ``(..., T, F)`` -> ``(..., T, out)``, T preserved."""
    if x.shape[-2] < 1:
        raise ValueError("TDNN input needs at least one frame")
    for layer in stack:
        x = tdnn_layer_forward(x, layer, act)
    return x


def drop_path_mask(shape: tuple[int, ...], spec: DropPathSpec) -> np.ndarray | None:
    """Per-sample keep flags broadcastable to ``shape``, or None for the identity.

    Inputs with 3+ axes carry samples on axis 0; a 2-d input is one sample.
    """
    if spec.mode == "eval":
        return None
    if spec.forced is None and spec.p == 0.0:
        return None
    mshape = (shape[0],) + (1,) * (len(shape) - 1) if len(shape) >= 3 else (1,) * len(shape)
    if spec.forced is not None:
        return np.full(mshape, bool(spec.forced))
    if spec.rng is None:
        raise ValueError("train-mode drop path with p > 0 needs an rng")
    return spec.rng.random(mshape) >= spec.p


def drop_path(x: Tensor, spec: DropPathSpec) -> Tensor:
    """Stochastic depth on a residual branch: each sample emits 0 or x / (1 - p)."""
    keep = drop_path_mask(x.shape, spec)
    if keep is None:
        return x
    keep_prob = 1.0 - spec.p
    out = np.where(keep, x.data / keep_prob, 0.0)
    return Tensor._from_op(out, (x,), lambda g: (np.where(keep, g / keep_prob, 0.0),))
