"""Pooling transformer and the full speaker-embedding network around it.

Layout of a forward pass::

    features (B, T, F) -> TDNN stack -> (B, T, F_out)
      -> pooling: PoFormer (linear compression, class token, N x [PEG, layer])
                  or statistics pooling
      -> embedding linear -> (B, embed_dim)

All functions also accept unbatched ``(T, F)`` inputs.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Any, Iterator, Sequence

import numpy as np

from .layers import (
    DEFAULT_TDNN_CONTEXTS,
    DropPathSpec,
    LinearParams,
    TDNNLayerParams,
    drop_path,
    init_linear,
    init_tdnn_stack,
    linear_forward,
    tdnn_stack_forward,
)
from .tensor import (
    Tensor,
    activation,
    broadcast_to,
    concat,
    depthwise_conv1d,
    layer_norm,
    reduce_mean_std,
    softmax_rows,
)

NORM_PLACEMENTS = ("pre", "post")
POS_ENCODINGS = ("peg", "sinusoidal", "none")
HEADS = ("class_token", "class_token_plus_stats", "stats_pooling_baseline")
ACTIVATIONS = ("relu", "gelu")


@dataclass
class PoFormerConfig:
    """Architecture hyperparameters. Defaults are the desk-scale recipe."""

    num_layers: int = 2
    d_model: int = 32
    num_heads: int = 4
    ffn_dim: int = 64
    peg_kernel: int = 9
    drop_path: float = 0.3
    norm_placement: str = "pre"
    pos_encoding: str = "peg"
    head: str = "class_token"
    ffn_activation: str = "gelu"
    layerscale_init: float = 0.1
    feat_dim: int = 81
    tdnn_dims: tuple[int, ...] = (64, 64, 64, 64, 96)
    tdnn_contexts: tuple[tuple[int, ...], ...] = DEFAULT_TDNN_CONTEXTS
    tdnn_activation: str = "relu"
    embed_dim: int = 32
    num_classes: int = 20
    am_scale: float = 30.0
    am_margin: float = 0.25

    def __post_init__(self):
        self.tdnn_dims = tuple(int(x) for x in self.tdnn_dims)
        self.tdnn_contexts = tuple(tuple(int(c) for c in ctx) for ctx in self.tdnn_contexts)
        if self.num_layers < 1:
            raise ValueError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.norm_placement not in NORM_PLACEMENTS:
            raise ValueError(f"norm_placement must be one of {NORM_PLACEMENTS}, got {self.norm_placement!r}")
        if self.pos_encoding not in POS_ENCODINGS:
            raise ValueError(f"pos_encoding must be one of {POS_ENCODINGS}, got {self.pos_encoding!r}")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        for name in ("ffn_activation", "tdnn_activation"):
            if getattr(self, name) not in ACTIVATIONS:
                raise ValueError(f"{name} must be one of {ACTIVATIONS}")
        if not 0.0 <= self.drop_path < 1.0:
            raise ValueError(f"drop_path must be in [0, 1), got {self.drop_path}")
        if self.d_model % self.num_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by num_heads {self.num_heads}")
        if self.pos_encoding == "peg" and self.peg_kernel % 2 == 0:
            raise ValueError(f"peg_kernel must be odd, got {self.peg_kernel}")
        if self.pos_encoding == "sinusoidal" and self.d_model % 2:
            raise ValueError("sinusoidal encoding needs an even d_model")
        if len(self.tdnn_dims) != len(self.tdnn_contexts):
            raise ValueError("tdnn_dims and tdnn_contexts differ in length")
        if self.am_scale <= 0 or not 0.0 <= self.am_margin < 1.0:
            raise ValueError("AM-softmax needs scale > 0 and 0 <= margin < 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    @property
    def pooled_dim(self) -> int:
        if self.head == "class_token":
            return self.d_model
        if self.head == "class_token_plus_stats":
            return 3 * self.d_model
        return 2 * self.tdnn_dims[-1]

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["tdnn_dims"] = list(self.tdnn_dims)
        out["tdnn_contexts"] = [list(c) for c in self.tdnn_contexts]
        return out

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> PoFormerConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class MHSAParams:
    w_q: list[Tensor]
    w_k: list[Tensor]
    w_v: list[Tensor]
    w_o: Tensor

    def __post_init__(self):
        if not (len(self.w_q) == len(self.w_k) == len(self.w_v) >= 1):
            raise ValueError("MHSA needs the same number (>=1) of Q/K/V projections")
        d = self.w_q[0].shape[0]
        dk = self.w_q[0].shape[1]
        dv = self.w_v[0].shape[1]
        for q, k, v in zip(self.w_q, self.w_k, self.w_v):
            if q.shape != (d, dk) or k.shape != (d, dk) or v.shape != (d, dv):
                raise ValueError("inconsistent per-head projection shapes")
        if self.w_o.shape != (len(self.w_q) * dv, d):
            raise ValueError(f"W^O shape {self.w_o.shape} != {(len(self.w_q) * dv, d)}")

    @property
    def num_heads(self) -> int:
        return len(self.w_q)


@dataclass
class FFNParams:
    lin1: LinearParams
    lin2: LinearParams


@dataclass
class PEGParams:
    kernel: Tensor

    def __post_init__(self):
        if self.kernel.shape[0] % 2 == 0:
            raise ValueError(f"PEG kernel size must be odd, got {self.kernel.shape[0]}")


@dataclass
class TransformerLayerParams:
    mhsa: MHSAParams
    ffn: FFNParams
    ln1_gamma: Tensor
    ln1_beta: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    gamma1: Tensor
    gamma2: Tensor
    peg: PEGParams | None = None


@dataclass
class ModelParams:
    tdnn: list[TDNNLayerParams]
    embed: LinearParams
    class_weights: Tensor
    proj: LinearParams | None = None
    cls_token: Tensor | None = None
    layers: list[TransformerLayerParams] = field(default_factory=list)


def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Yield ``(dotted_name, tensor)`` for every tensor reachable from ``obj``."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if value is None:
                continue
            yield from named_parameters(value, f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_parameters(item, f"{prefix}.{i}" if prefix else str(i))


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr, requires_grad=True)


def init_params(config: PoFormerConfig, rng: np.random.Generator) -> ModelParams:
    d, n = config.d_model, config.num_heads
    dk = d // n
    tdnn = init_tdnn_stack(rng, config.feat_dim, config.tdnn_dims, config.tdnn_contexts)
    proj = cls_token = None
    layers = []
    if config.head != "stats_pooling_baseline":
        proj = init_linear(rng, config.tdnn_dims[-1], d)
        cls_token = _param(rng.normal(0.0, 0.02, size=(1, d)))
        for _ in range(config.num_layers):
            std = 1.0 / math.sqrt(d)
            mhsa = MHSAParams(
                w_q=[_param(rng.normal(0.0, std, size=(d, dk))) for _ in range(n)],
                w_k=[_param(rng.normal(0.0, std, size=(d, dk))) for _ in range(n)],
                w_v=[_param(rng.normal(0.0, std, size=(d, dk))) for _ in range(n)],
                w_o=_param(rng.normal(0.0, std, size=(n * dk, d))),
            )
            ffn = FFNParams(init_linear(rng, d, config.ffn_dim), init_linear(rng, config.ffn_dim, d))
            peg = None
            if config.pos_encoding == "peg":
                k = config.peg_kernel
                peg = PEGParams(_param(rng.normal(0.0, 1.0 / k, size=(k, d))))
            layers.append(
                TransformerLayerParams(
                    mhsa=mhsa,
                    ffn=ffn,
                    ln1_gamma=_param(np.ones(d)),
                    ln1_beta=_param(np.zeros(d)),
                    ln2_gamma=_param(np.ones(d)),
                    ln2_beta=_param(np.zeros(d)),
                    gamma1=_param(np.full(d, config.layerscale_init)),
                    gamma2=_param(np.full(d, config.layerscale_init)),
                    peg=peg,
                )
            )
    embed = init_linear(rng, config.pooled_dim, config.embed_dim)
    class_weights = _param(rng.normal(0.0, 1.0, size=(config.num_classes, config.embed_dim)))
    return ModelParams(
        tdnn=tdnn, embed=embed, class_weights=class_weights, proj=proj, cls_token=cls_token, layers=layers
    )


# ---------------------------------------------------------------------------
# forward passes


def mhsa_forward(x: Tensor, params: MHSAParams, return_attention: bool = False):
    """Parallel-head scaled dot-product self-attention over every token."""
    d = params.w_q[0].shape[0]
    if x.shape[-1] != d:
        raise ValueError(f"MHSA expects trailing dim {d}, got shape {x.shape}")
    dk = params.w_q[0].shape[1]
    scale = 1.0 / math.sqrt(dk)
    heads, maps = [], []
    for wq, wk, wv in zip(params.w_q, params.w_k, params.w_v):
        q, k, v = x @ wq, x @ wk, x @ wv
        attn = softmax_rows((q @ k.transpose()) * scale)
        heads.append(attn @ v)
        maps.append(attn)
    out = concat(heads, axis=-1) @ params.w_o
    if return_attention:
        return out, maps
    return out


def ffn_forward(x: Tensor, params: FFNParams, act: str = "gelu") -> Tensor:
    return linear_forward(activation(linear_forward(x, params.lin1), act), params.lin2)


def transformer_layer_forward(
    x: Tensor,
    params: TransformerLayerParams,
    placement: str = "pre",
    drop: DropPathSpec | None = None,
    act: str = "gelu",
) -> Tensor:
    """One encoder layer with LayerScale and drop path on both branches.

    Each branch draws its own drop-path mask from ``drop``.
    """
    drop = drop or DropPathSpec()
    if placement == "pre":
        h = layer_norm(x, params.ln1_gamma, params.ln1_beta)
        x = x + drop_path(mhsa_forward(h, params.mhsa) * params.gamma1, drop)
        h = layer_norm(x, params.ln2_gamma, params.ln2_beta)
        return x + drop_path(ffn_forward(h, params.ffn, act) * params.gamma2, drop)
    if placement == "post":
        x = layer_norm(
            x + drop_path(mhsa_forward(x, params.mhsa) * params.gamma1, drop),
            params.ln1_gamma,
            params.ln1_beta,
        )
        return layer_norm(
            x + drop_path(ffn_forward(x, params.ffn, act) * params.gamma2, drop),
            params.ln2_gamma,
            params.ln2_beta,
        )
    raise ValueError(f"placement must be 'pre' or 'post', got {placement!r}")


def peg_forward(x: Tensor, params: PEGParams) -> Tensor:
    """Add a depthwise-conv position signal to the frames; row 0 (class token) passes through."""
    if x.shape[-2] < 2:
        raise ValueError("PEG needs at least one frame besides the class token")
    cls, frames = x[..., :1, :], x[..., 1:, :]
    frames = frames + depthwise_conv1d(frames, params.kernel)
    return concat([cls, frames], axis=-2)


def sinusoidal_encoding(length: int, d: int) -> Tensor:
    if d % 2:
        raise ValueError(f"sinusoidal encoding needs an even dimension, got {d}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    i2 = np.arange(0, d, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i2 / d)
    pe = np.zeros((length, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return Tensor(pe)


def stats_pooling_forward(frames: Tensor) -> Tensor:
    """Mean and population std over time, concatenated: ``(..., T, F) -> (..., 2F)``."""
    mean, std = reduce_mean_std(frames)
    return concat([mean, std], axis=-1)


def _prepend_cls(x: Tensor, cls_token: Tensor) -> Tensor:
    tok = cls_token if x.ndim == 2 else broadcast_to(cls_token, x.shape[:-2] + cls_token.shape)
    return concat([tok, x], axis=-2)


def poformer_sequence(
    frames: Tensor,
    params: ModelParams,
    config: PoFormerConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    forced_drop: bool | None = None,
) -> Tensor:
    """Final-layer token sequence ``(..., T + 1, d)``; row 0 is the class token."""
    if frames.shape[-2] < 1:
        raise ValueError("PoFormer needs at least one frame")
    x = linear_forward(frames, params.proj)
    if config.pos_encoding == "sinusoidal":
        x = x + sinusoidal_encoding(x.shape[-2], config.d_model)
    x = _prepend_cls(x, params.cls_token)
    drop = DropPathSpec(p=config.drop_path, mode=mode, rng=rng, forced=forced_drop)
    for layer in params.layers:
        if layer.peg is not None:
            x = peg_forward(x, layer.peg)
        x = transformer_layer_forward(x, layer, config.norm_placement, drop, config.ffn_activation)
    return x


def poformer_forward(
    frames: Tensor,
    params: ModelParams,
    config: PoFormerConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    forced_drop: bool | None = None,
) -> Tensor:
    """Pool backbone frames ``(..., T, F_out)`` into one vector per utterance."""
    if config.head == "stats_pooling_baseline":
        if frames.shape[-2] < 1:
            raise ValueError("statistics pooling needs at least one frame")
        return stats_pooling_forward(frames)
    x = poformer_sequence(frames, params, config, mode, rng, forced_drop)
    token = x[..., 0, :]
    if config.head == "class_token":
        return token
    mean, std = reduce_mean_std(x[..., 1:, :])
    return concat([token, mean, std], axis=-1)


def embed_forward(
    features: Tensor,
    params: ModelParams,
    config: PoFormerConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Acoustic features ``(..., T, feat_dim)`` to speaker embeddings ``(..., embed_dim)``."""
    frames = tdnn_stack_forward(features, params.tdnn, config.tdnn_activation)
    pooled = poformer_forward(frames, params, config, mode, rng)
    return linear_forward(pooled, params.embed)


def count_parameters(params: ModelParams) -> dict[str, int]:
    """Parameter counts grouped by top-level component."""
    counts: dict[str, int] = {}
    for name, t in named_parameters(params):
        key = name.split(".")[0]
        counts[key] = counts.get(key, 0) + t.size
    return counts


def parameter_list(params: ModelParams) -> Sequence[Tensor]:
    return [t for _, t in named_parameters(params)]
