"""CpT building blocks: point embedding, convolutional Q/K/V projection, the two
attention passes, feedforward, and the assembled transformer layer.

Layouts: per-point embeddings travel as (B, N, E); convolutions along the
point axis take (B, E, N); edge tensors are (B, C_e, N, K).

Both attention passes use points as tokens: the feature-wise pass acts on the
embedding produced from each neighbourhood, the InterPoint pass on the output
of the first feedforward, each with its own projection and mix weights. An
earlier channel-token reading of the feature-wise pass (an E x E map over
length-N columns) saturated its softmax on unnormalised residual streams and
trained erratically, so it was dropped. Neither pass mixes batch items and,
with kernel-1 projections, both are permutation-equivariant over points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, is_dataclass
from typing import Iterator, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .graph import KnnGraph, edge_features, knn_graph
from .tensor import Tensor


class LayerConfigError(ValueError):
    """Invalid layer hyperparameters."""


GRAPH_MODES = ("dynamic", "static", "none")
EDGE_MODES = ("delta", "concat")


@dataclass(frozen=True)
class LayerConfig:
    in_dim: int
    dim: int
    k: int = 20
    has_interpoint: bool = True
    graph_mode: str = "dynamic"
    edge_mode: str = "concat"
    heads: int = 1
    proj_kernel: int = 1
    proj_stride: int = 1
    embed_kernel: Optional[int] = None  # defaults to k: one window over the whole neighbourhood
    embed_stride: int = 1
    ff_hidden: Optional[int] = None  # defaults to 2 * dim
    eps: float = 1e-5
    experimental: bool = False

    def __post_init__(self):
        if self.in_dim < 1 or self.dim < 1 or self.k < 1:
            raise LayerConfigError(f"dims and k must be positive: {self}")
        if self.graph_mode not in GRAPH_MODES:
            raise LayerConfigError(f"graph_mode must be one of {GRAPH_MODES}, got {self.graph_mode!r}")
        if self.edge_mode not in EDGE_MODES:
            raise LayerConfigError(f"edge_mode must be one of {EDGE_MODES}, got {self.edge_mode!r}")
        _check_projection(self.proj_kernel, self.proj_stride, self.experimental)
        if self.dim % self.heads:
            raise LayerConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.graph_mode != "none" and self.kernel_n > self.k:
            raise LayerConfigError(f"embedding kernel {self.kernel_n} wider than K={self.k}")

    @property
    def kernel_n(self) -> int:
        return self.k if self.embed_kernel is None else self.embed_kernel

    @property
    def hidden(self) -> int:
        return 2 * self.dim if self.ff_hidden is None else self.ff_hidden

    @property
    def edge_channels(self) -> int:
        return self.in_dim * (2 if self.edge_mode == "concat" else 1)


def _check_projection(p: int, s: int, experimental: bool) -> None:
    if p < 1 or p % 2 == 0:
        raise LayerConfigError(f"projection kernel must be odd, got {p}")
    if s < 1:
        raise LayerConfigError(f"projection stride must be >= 1, got {s}")
    if s != 1 and not experimental:
        raise LayerConfigError("projection stride > 1 changes the point count; enable experimental mode")


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------

@dataclass
class PointEmbeddingParams:
    weight: Tensor  # (E, C_e, 1, k_n)
    bias: Tensor  # (E,)
    stride: int = 1


@dataclass
class ProjectionParams:
    """Depthwise (E, 1, p) then pointwise (E, E, 1) kernels for each of Q, K, V."""

    q_depthwise: Tensor
    q_pointwise: Tensor
    k_depthwise: Tensor
    k_pointwise: Tensor
    v_depthwise: Tensor
    v_pointwise: Tensor
    kernel: int = 1
    stride: int = 1


@dataclass
class AttentionParams:
    projection: ProjectionParams
    out_weight: Tensor  # (E, E)
    out_bias: Tensor  # (E,)
    heads: int = 1


@dataclass
class NormParams:
    gamma: Tensor
    beta: Tensor


@dataclass
class FeedForwardParams:
    w1: Tensor  # (h, E)
    b1: Tensor
    w2: Tensor  # (E, h)
    b2: Tensor


@dataclass
class CptLayerParams:
    embedding: PointEmbeddingParams
    feature_attn: AttentionParams
    norm1: NormParams
    ff1: FeedForwardParams
    norm2: NormParams
    interpoint_attn: Optional[AttentionParams] = None
    norm3: Optional[NormParams] = None
    ff2: Optional[FeedForwardParams] = None
    norm4: Optional[NormParams] = None

    @property
    def has_interpoint(self) -> bool:
        return self.interpoint_attn is not None


def named_tensors(obj, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
    """Walk dataclasses, dicts and lists, yielding ``(dotted.name, tensor)``."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif is_dataclass(obj):
        for f in fields(obj):
            yield from named_tensors(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, dict):
        for key, val in obj.items():
            yield from named_tensors(val, f"{prefix}.{key}" if prefix else str(key))
    elif isinstance(obj, (list, tuple)):
        for i, val in enumerate(obj):
            yield from named_tensors(val, f"{prefix}.{i}" if prefix else str(i))


def _normal(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> Tensor:
    return Tensor(rng.normal(0.0, gain / math.sqrt(fan_in), size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def init_embedding(rng, out_dim: int, in_channels: int, kernel: int, stride: int = 1) -> PointEmbeddingParams:
    return PointEmbeddingParams(
        _normal(rng, (out_dim, in_channels, 1, kernel), in_channels * kernel, math.sqrt(2.0)),
        _zeros((out_dim,)),
        stride,
    )


def init_projection(rng, dim: int, kernel: int = 1, stride: int = 1) -> ProjectionParams:
    def dw():
        return _normal(rng, (dim, 1, kernel), kernel)

    def pw():
        return _normal(rng, (dim, dim, 1), dim)

    return ProjectionParams(dw(), pw(), dw(), pw(), dw(), pw(), kernel, stride)


def init_attention(rng, dim: int, kernel: int = 1, stride: int = 1, heads: int = 1) -> AttentionParams:
    return AttentionParams(init_projection(rng, dim, kernel, stride), _normal(rng, (dim, dim), dim), _zeros((dim,)), heads)


def init_norm(dim: int) -> NormParams:
    return NormParams(_ones((dim,)), _zeros((dim,)))


def init_feedforward(rng, dim: int, hidden: int) -> FeedForwardParams:
    return FeedForwardParams(
        _normal(rng, (hidden, dim), dim, math.sqrt(2.0)),
        _zeros((hidden,)),
        _normal(rng, (dim, hidden), hidden),
        _zeros((dim,)),
    )


def init_cpt_layer(cfg: LayerConfig, rng: np.random.Generator) -> CptLayerParams:
    if cfg.graph_mode == "none":
        embedding = init_embedding(rng, cfg.dim, cfg.in_dim, 1)
    else:
        embedding = init_embedding(rng, cfg.dim, cfg.edge_channels, cfg.kernel_n, cfg.embed_stride)
    params = CptLayerParams(
        embedding=embedding,
        feature_attn=init_attention(rng, cfg.dim, cfg.proj_kernel, cfg.proj_stride, cfg.heads),
        norm1=init_norm(cfg.dim),
        ff1=init_feedforward(rng, cfg.dim, cfg.hidden),
        norm2=init_norm(cfg.dim),
    )
    if cfg.has_interpoint:
        params.interpoint_attn = init_attention(rng, cfg.dim, cfg.proj_kernel, cfg.proj_stride, cfg.heads)
        params.norm3 = init_norm(cfg.dim)
        params.ff2 = init_feedforward(rng, cfg.dim, cfg.hidden)
        params.norm4 = init_norm(cfg.dim)
    return params


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def point_embedding(edges, params: PointEmbeddingParams) -> Tensor:
    """(B, C_e, N, K) edge tensor -> (B, E, N) embedding.

    A (1, k_n) convolution with stride (1, s_n) over the (N, K) plane, then a
    max over whatever remains of the neighbour axis.
    """
    edges = T.as_tensor(edges)
    b, c_e, n, k = edges.shape
    e_out, c_w, _, k_n = params.weight.shape
    if c_w != c_e:
        raise T.ShapeError(f"embedding expects {c_w} edge channels, got {c_e}")
    if k_n > k:
        raise T.ShapeError(f"embedding kernel {k_n} wider than neighbour axis K={k}")
    if k_n == k:
        # single window: a plain contraction over (C_e, K), batch kept stacked
        rows = T.reshape(T.permute(edges, (0, 2, 1, 3)), (b, n, c_e * k))
        out = T.linear(rows, T.reshape(params.weight, (e_out, c_e * k)), params.bias)
        return T.permute(out, (0, 2, 1))
    rows = T.reshape(T.permute(edges, (0, 2, 1, 3)), (b * n, c_e, k))
    w = T.reshape(params.weight, (e_out, c_e, k_n))
    conv = T.conv_grouped(rows, w, params.bias, stride=params.stride)  # B*N, E, L
    pooled = T.max_(conv, axis=2)
    return T.permute(T.reshape(pooled, (b, n, e_out)), (0, 2, 1))


def pointwise_embedding(x, params: PointEmbeddingParams) -> Tensor:
    """Graph-free embedding: a kernel-1 convolution on each point's own features."""
    x = T.as_tensor(x)
    b, n, f = x.shape
    edges = T.reshape(T.permute(x, (0, 2, 1)), (b, f, n, 1))
    return point_embedding(edges, params)


def conv_projection(x, params: ProjectionParams) -> Tuple[Tensor, Tensor, Tensor]:
    """(B, E, N) -> Q, K, V each (B, N', E) via depthwise-then-pointwise convolution."""
    x = T.as_tensor(x)
    p = params.kernel
    if p % 2 == 0:
        raise LayerConfigError(f"projection kernel must be odd, got {p}")
    e = x.shape[1]
    pad = (p - 1) // 2
    out = []
    for dw, pw in (
        (params.q_depthwise, params.q_pointwise),
        (params.k_depthwise, params.k_pointwise),
        (params.v_depthwise, params.v_pointwise),
    ):
        h = T.conv_grouped(x, dw, stride=params.stride, padding=pad, groups=e)
        h = T.conv_grouped(h, pw)
        out.append(T.permute(h, (0, 2, 1)))
    return tuple(out)


def dot_product_attention(q, k, v, heads: int = 1, record: Optional[List[np.ndarray]] = None) -> Tensor:
    """softmax(Q K^T / sqrt(d)) V with tokens on axis -2 and d the per-head width.

    Extra leading axes are treated as batch axes. When ``record`` is given the
    attention weights are appended to it.
    """
    q, k, v = T.as_tensor(q), T.as_tensor(k), T.as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise T.ShapeError(f"attention shapes disagree: Q {q.shape}, K {k.shape}, V {v.shape}")
    e = q.shape[-1]
    if e % heads:
        raise T.ShapeError(f"width {e} not divisible by {heads} heads")
    d = e // heads
    if heads > 1:
        lead = q.shape[:-2]
        nd = len(lead)
        order = tuple(range(nd)) + (nd + 1, nd, nd + 2)

        def split(t):
            return T.permute(T.reshape(t, lead + (t.shape[-2], heads, d)), order)

        q, k, v = split(q), split(k), split(v)
    scores = T.scale(T.matmul(q, T.swapaxes(k, -1, -2)), 1.0 / math.sqrt(d))
    weights = T.softmax(scores, axis=-1)
    if record is not None:
        record.append(weights.data)
    out = T.matmul(weights, v)
    if heads > 1:
        out = T.reshape(T.permute(out, order), lead + (out.shape[-2], e))
    return out


def _mix(x, params: AttentionParams) -> Tensor:
    return T.linear(x, params.out_weight, params.out_bias)


def feature_attention_block(z, params: AttentionParams, record=None) -> Tensor:
    """Convolutional projection + dot-product attention + output mix on (B, N, E)."""
    q, k, v = conv_projection(T.permute(T.as_tensor(z), (0, 2, 1)), params.projection)
    return _mix(dot_product_attention(q, k, v, params.heads, record), params)


def interpoint_attention(x, params: AttentionParams, record=None) -> Tensor:
    """Every point attends over all N points of its own cloud; (B, N, E) -> (B, N, E)."""
    q, k, v = conv_projection(T.permute(T.as_tensor(x), (0, 2, 1)), params.projection)
    return _mix(dot_product_attention(q, k, v, params.heads, record), params)


def feedforward(x, params: FeedForwardParams) -> Tensor:
    return T.linear(T.relu(T.linear(x, params.w1, params.b1)), params.w2, params.b2)


def _norm(x, params: NormParams, eps: float) -> Tensor:
    return T.layer_norm(x, params.gamma, params.beta, eps)


def embed(points, cfg: LayerConfig, params: CptLayerParams, graph: Optional[KnnGraph] = None):
    """Embedding stage of a layer; returns ``(z (B, N, E), graph used or None)``."""
    x = T.as_tensor(points)
    if cfg.graph_mode == "none":
        return T.permute(pointwise_embedding(x, params.embedding), (0, 2, 1)), None
    if cfg.graph_mode == "dynamic" or graph is None:
        graph = knn_graph(x, cfg.k)
    edges = edge_features(x, graph, cfg.edge_mode)
    return T.permute(point_embedding(edges, params.embedding), (0, 2, 1)), graph


def transformer_chain(z, cfg: LayerConfig, params: CptLayerParams, record=None) -> Tensor:
    """The residual chain out^a -> out^b (-> out^c -> out^d) on (B, N, E)."""
    eps = cfg.eps
    out_a = _norm(feature_attention_block(z, params.feature_attn, record), params.norm1, eps) + z
    out_b = _norm(feedforward(out_a, params.ff1), params.norm2, eps) + out_a
    if not params.has_interpoint:
        return out_b
    out_c = _norm(interpoint_attention(out_b, params.interpoint_attn, record), params.norm3, eps) + out_b
    return _norm(feedforward(out_c, params.ff2), params.norm4, eps) + out_c


def cpt_layer_forward(
    points,
    cfg: LayerConfig,
    params: CptLayerParams,
    graph: Optional[KnnGraph] = None,
    record: Optional[List[np.ndarray]] = None,
):
    """One CpT layer: kNN -> edges -> embedding -> attention chain.

    ``graph`` is only used in static mode (dynamic mode always rebuilds it from
    ``points``). Returns ``(output (B, N, E), graph)``.
    """
    z, graph = embed(points, cfg, params, graph)
    return transformer_chain(z, cfg, params, record), graph
