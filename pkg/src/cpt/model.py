"""Full CpT networks (classification and part segmentation) and checkpoints.

The trunk is a stack of CpT layers, each consuming the previous layer's
per-point output. All layer outputs are concatenated on the channel axis and
lifted by a shared per-point MLP; a max over points gives the global vector.

Checkpoint layout::

    b"CPT1" | uint32 LE header length | JSON header | raw little-endian blobs

The header holds the format version, the model config and an index of
``{name, shape, dtype, offset}`` entries, offsets counted from the start of
the blob section.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Tuple, Union

import numpy as np

from . import tensor as T
from .graph import KnnGraph, PointBatch, knn_graph
from .layers import (
    EDGE_MODES,
    GRAPH_MODES,
    CptLayerParams,
    LayerConfig,
    NormParams,
    _normal,
    _zeros,
    cpt_layer_forward,
    init_cpt_layer,
    init_norm,
    named_tensors,
)
from .tensor import Tensor

HEADS = ("classification", "segmentation")
MAGIC = b"CPT1"
FORMAT_VERSION = 1


class ModelConfigError(ValueError):
    """Inconsistent model hyperparameters."""


@dataclass(frozen=True)
class ModelConfig:
    k: int = 20
    layer_dims: Tuple[int, ...] = (64, 64, 128)
    interpoint_flags: Tuple[bool, ...] = (True, True, False)
    graph_mode: str = "dynamic"
    edge_mode: str = "concat"
    shared_mlp_dim: int = 1024
    head: str = "classification"
    num_classes: int = 40  # c for classification, p for segmentation
    head_mlp_dims: Tuple[int, ...] = (512, 256)
    dropout_rate: float = 0.5
    heads: int = 1
    proj_kernel: int = 1
    proj_stride: int = 1
    in_dim: int = 3
    eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))
        object.__setattr__(self, "interpoint_flags", tuple(bool(f) for f in self.interpoint_flags))
        object.__setattr__(self, "head_mlp_dims", tuple(int(d) for d in self.head_mlp_dims))
        if not self.layer_dims:
            raise ModelConfigError("need at least one CpT layer")
        if len(self.interpoint_flags) != len(self.layer_dims):
            raise ModelConfigError(
                f"{len(self.layer_dims)} layer dims but {len(self.interpoint_flags)} interpoint flags"
            )
        if self.interpoint_flags[-1]:
            raise ModelConfigError("the last CpT layer must not use InterPoint attention")
        dims = self.layer_dims + self.head_mlp_dims + (self.shared_mlp_dim, self.num_classes, self.in_dim, self.k)
        if min(dims) < 1:
            raise ModelConfigError(f"all dims must be positive: {self}")
        if self.graph_mode not in GRAPH_MODES:
            raise ModelConfigError(f"graph_mode must be one of {GRAPH_MODES}, got {self.graph_mode!r}")
        if self.edge_mode not in EDGE_MODES:
            raise ModelConfigError(f"edge_mode must be one of {EDGE_MODES}, got {self.edge_mode!r}")
        if self.head not in HEADS:
            raise ModelConfigError(f"head must be one of {HEADS}, got {self.head!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ModelConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ModelConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def layer_configs(self) -> List[LayerConfig]:
        out, in_dim = [], self.in_dim
        for dim, flag in zip(self.layer_dims, self.interpoint_flags):
            out.append(self._layer(in_dim, dim, flag))
            in_dim = dim
        return out

    def segmentation_layer_config(self) -> LayerConfig:
        width = self.head_mlp_dims[-1] if self.head_mlp_dims else self.shared_mlp_dim
        return self._layer(width, width, False)

    def _layer(self, in_dim: int, dim: int, interpoint: bool) -> LayerConfig:
        return LayerConfig(
            in_dim=in_dim,
            dim=dim,
            k=self.k,
            has_interpoint=interpoint,
            graph_mode=self.graph_mode,
            edge_mode=self.edge_mode,
            heads=self.heads,
            proj_kernel=self.proj_kernel,
            proj_stride=self.proj_stride,
            eps=self.eps,
        )


@dataclass
class DenseParams:
    """Linear map followed (optionally) by layer norm and relu."""

    weight: Tensor  # (out, in)
    bias: Tensor
    norm: Optional[NormParams] = None


@dataclass
class ModelParams:
    layers: List[CptLayerParams]
    shared_mlp: DenseParams
    head_mlps: List[DenseParams]
    out: DenseParams
    seg_layer: Optional[CptLayerParams] = None

    def named(self) -> Iterator[Tuple[str, Tensor]]:
        return named_tensors(self)

    def tensors(self) -> List[Tensor]:
        return [t for _, t in self.named()]

    def count(self) -> int:
        return sum(t.size for t in self.tensors())


def _dense(rng, in_dim: int, out_dim: int, norm: bool = True) -> DenseParams:
    gain = np.sqrt(2.0) if norm else 1.0
    return DenseParams(_normal(rng, (out_dim, in_dim), in_dim, gain), _zeros((out_dim,)), init_norm(out_dim) if norm else None)


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ModelParams:
    layers = [init_cpt_layer(lc, rng) for lc in cfg.layer_configs()]
    concat_dim = sum(cfg.layer_dims)
    shared = _dense(rng, concat_dim, cfg.shared_mlp_dim)
    width = cfg.shared_mlp_dim
    if cfg.head == "segmentation":
        width += concat_dim
    head = []
    for dim in cfg.head_mlp_dims:
        head.append(_dense(rng, width, dim))
        width = dim
    seg_layer = init_cpt_layer(cfg.segmentation_layer_config(), rng) if cfg.head == "segmentation" else None
    out = _dense(rng, width, cfg.num_classes, norm=False)
    return ModelParams(layers, shared, head, out, seg_layer)


def parameter_count(cfg: ModelConfig) -> int:
    return init_params(cfg, np.random.default_rng(0)).count()


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

Batch = Union[PointBatch, np.ndarray, Tensor]


def _features(batch: Batch) -> Tensor:
    if isinstance(batch, PointBatch):
        batch = batch.features
    x = T.as_tensor(batch)
    if x.ndim != 3:
        raise T.ShapeError(f"expected (B, N, f) features, got {x.shape}")
    return x


def _dense_forward(x, p: DenseParams, eps: float, train: bool = False, rate: float = 0.0, rng=None) -> Tensor:
    y = T.linear(x, p.weight, p.bias)
    if p.norm is None:
        return y
    y = T.relu(T.layer_norm(y, p.norm.gamma, p.norm.beta, eps))
    return T.dropout(y, rate, train, rng)


def trunk_forward(x: Tensor, cfg: ModelConfig, params: ModelParams, record=None) -> Tuple[Tensor, Optional[KnnGraph]]:
    """Run the CpT stack; returns the concatenated per-point features (B, N, sum E)
    and the input-space graph (None in graph-free mode)."""
    # static mode builds the input-space graph once and every layer reuses it;
    # dynamic layers ignore the argument and rebuild from their own input
    first = knn_graph(x, cfg.k) if cfg.graph_mode == "static" else None
    h, outputs = x, []
    for lc, lp in zip(cfg.layer_configs(), params.layers):
        h, graph = cpt_layer_forward(h, lc, lp, graph=first, record=record)
        if first is None:
            first = graph
        outputs.append(h)
    return T.concat(outputs, axis=-1), first


def classify_forward(
    batch: Batch,
    cfg: ModelConfig,
    params: ModelParams,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
    record=None,
) -> Tensor:
    """Point clouds (B, N, f) -> class logits (B, c)."""
    x = _features(batch)
    feats, _ = trunk_forward(x, cfg, params, record)
    lifted = _dense_forward(feats, params.shared_mlp, cfg.eps)
    h = T.max_(lifted, axis=1)
    for p in params.head_mlps:
        h = _dense_forward(h, p, cfg.eps, train, cfg.dropout_rate, rng)
    return _dense_forward(h, params.out, cfg.eps)


def segment_forward(
    batch: Batch,
    cfg: ModelConfig,
    params: ModelParams,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
    record=None,
) -> Tensor:
    """Point clouds (B, N, f) -> per-point part logits (B, N, p)."""
    if params.seg_layer is None:
        raise ModelConfigError("parameters were built for classification; no segmentation branch")
    x = _features(batch)
    feats, graph = trunk_forward(x, cfg, params, record)
    lifted = _dense_forward(feats, params.shared_mlp, cfg.eps)
    glob = T.max_(lifted, axis=1, keepdims=True)
    b, n, _ = feats.shape
    h = T.concat([feats, T.broadcast_to(glob, (b, n, glob.shape[-1]))], axis=-1)
    for p in params.head_mlps:
        h = _dense_forward(h, p, cfg.eps, train, cfg.dropout_rate, rng)
    h, _ = cpt_layer_forward(h, cfg.segmentation_layer_config(), params.seg_layer, graph=graph, record=record)
    return _dense_forward(h, params.out, cfg.eps)


def global_input_forward(batch: Batch, cfg: ModelConfig, params: ModelParams, train: bool = False, rng=None) -> Tensor:
    """The graph-free variant: pointwise embeddings, no kNN anywhere."""
    if cfg.graph_mode != "none":
        raise ModelConfigError(f"global-input forward needs graph_mode='none', got {cfg.graph_mode!r}")
    return classify_forward(batch, cfg, params, train, rng)


def forward(batch: Batch, cfg: ModelConfig, params: ModelParams, train: bool = False, rng=None, record=None) -> Tensor:
    fn = segment_forward if cfg.head == "segmentation" else classify_forward
    return fn(batch, cfg, params, train, rng, record)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class NotACheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


def save_params(params: ModelParams, path, cfg: ModelConfig) -> None:
    index, blobs, offset = [], [], 0
    for name, t in params.named():
        arr = np.ascontiguousarray(t.data)
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str, "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"version": FORMAT_VERSION, "config": cfg.to_dict(), "tensors": index}).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def read_checkpoint(path) -> Tuple[dict, bytes]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise NotACheckpointError(f"{path} is not a checkpoint (bad magic bytes)")
    if len(data) < 8:
        raise TruncatedCheckpointError(f"{path} is truncated inside the header")
    (size,) = struct.unpack("<I", data[4:8])
    if len(data) < 8 + size:
        raise TruncatedCheckpointError(f"{path} is truncated inside the header")
    try:
        header = json.loads(data[8:8 + size])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise NotACheckpointError(f"{path} has an unreadable header: {exc}") from exc
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint version {header.get('version')} != supported {FORMAT_VERSION}")
    return header, data[8 + size:]


def load_params(path, cfg: Optional[ModelConfig] = None) -> ModelParams:
    """Load a checkpoint, validated against ``cfg`` (default: the stored config)."""
    header, blob = read_checkpoint(path)
    if cfg is None:
        cfg = ModelConfig.from_dict(header["config"])
    template = init_params(cfg, np.random.default_rng(0))
    stored = {e["name"]: e for e in header["tensors"]}
    for name, t in template.named():
        entry = stored.get(name)
        if entry is None:
            raise CheckpointShapeError(f"tensor {name} (shape {t.shape}) missing from checkpoint")
        if tuple(entry["shape"]) != t.shape:
            raise CheckpointShapeError(f"tensor {name}: checkpoint shape {tuple(entry['shape'])} != expected {t.shape}")
    if len(stored) != len(list(template.named())):
        extra = sorted(set(stored) - {n for n, _ in template.named()})
        raise CheckpointShapeError(f"checkpoint has tensors the config does not: {extra[0]}")
    for name, t in template.named():
        entry = stored[name]
        dtype = np.dtype(entry["dtype"])
        nbytes = dtype.itemsize * int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        if start + nbytes > len(blob):
            raise TruncatedCheckpointError(f"checkpoint truncated inside tensor {name}")
        arr = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize, offset=start)
        t.data = arr.reshape(entry["shape"]).astype(dtype.newbyteorder("="))
        t.grad = None
    return template


def load_checkpoint(path) -> Tuple[ModelConfig, ModelParams]:
    header, _ = read_checkpoint(path)
    cfg = ModelConfig.from_dict(header["config"])
    return cfg, load_params(path, cfg)
