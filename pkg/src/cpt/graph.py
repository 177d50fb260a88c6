"""Dynamic k-nearest-neighbour graphs and neighbourhood edge features.

Squared distances are always accumulated channel by channel in the same order,
so the brute-force and kd-tree paths see bit-identical distance values and
their tie-breaking (ascending distance, then ascending point index) agrees
exactly.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy.spatial import cKDTree

from . import tensor as T
from .tensor import Tensor

Channels = Optional[Union[slice, Sequence[int]]]


class GraphConfigError(ValueError):
    """Invalid neighbour count for the given cloud size."""


@dataclass
class PointBatch:
    """B clouds of N points with f features; XYZ occupies the first 3 channels.

    ``labels`` is either one class id per cloud, shape (B,), or one part id per
    point, shape (B, N).
    """

    features: np.ndarray
    labels: Optional[np.ndarray] = None
    num_classes: Optional[int] = None

    def __post_init__(self):
        self.features = np.asarray(self.features)
        if self.features.ndim != 3:
            raise ValueError(f"features must be (B, N, f), got {self.features.shape}")
        if self.features.shape[1] < 2 or self.features.shape[2] < 1:
            raise ValueError(f"need N >= 2 and f >= 1, got {self.features.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape not in (self.features.shape[:1], self.features.shape[:2]):
                raise ValueError(f"labels shape {self.labels.shape} matches neither (B,) nor (B, N)")
            if self.num_classes is not None and self.labels.size and (
                self.labels.min() < 0 or self.labels.max() >= self.num_classes
            ):
                raise ValueError(f"label ids must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def num_points(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class KnnGraph:
    neighbor_idx: np.ndarray  # (B, N, K) int64
    k: int


class _Counter:
    def __init__(self):
        self._lock = threading.Lock()
        self.value = 0

    def bump(self):
        with self._lock:
            self.value += 1


_builds = _Counter()


def graph_build_count() -> int:
    """Number of kNN graphs built since import (or the last reset)."""
    return _builds.value


def reset_graph_build_count() -> None:
    with _builds._lock:
        _builds.value = 0


def _as_array(points) -> np.ndarray:
    arr = points.data if isinstance(points, Tensor) else np.asarray(points, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"points must be (B, N, f), got {arr.shape}")
    return arr


def _select(arr: np.ndarray, metric_channels: Channels) -> np.ndarray:
    if metric_channels is None:
        return arr
    if isinstance(metric_channels, slice):
        return arr[..., metric_channels]
    return arr[..., list(metric_channels)]


def _resolve_k(k: int, n: int, clamp: bool) -> int:
    if k < 1:
        raise GraphConfigError(f"k must be >= 1, got {k}")
    if k > n - 1:
        if clamp:
            return n - 1
        raise GraphConfigError(
            f"k={k} needs at least {k + 1} points but the cloud has N={n}; "
            "lower k or enable clamping to k=N-1"
        )
    return k


def squared_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(M, f) x (P, f) -> (M, P) squared distances, accumulated channel by channel."""
    return batched_squared_distances(a[None], b[None])[0]


def batched_squared_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(B, M, f) x (B, P, f) -> (B, M, P), same channel-by-channel accumulation."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.zeros((a.shape[0], a.shape[1], b.shape[1]), dtype=np.float64)
    diff = np.empty_like(out)
    for c in range(a.shape[2]):
        np.subtract(a[:, :, c, None], b[:, None, :, c], out=diff)
        np.multiply(diff, diff, out=diff)
        out += diff
    return out


def knn_graph(points, k: int, metric_channels: Channels = None, clamp: bool = False) -> KnnGraph:
    """Brute-force kNN over the selected channels; self is never a neighbour."""
    arr = _select(_as_array(points), metric_channels)
    b, n, _ = arr.shape
    k = _resolve_k(k, n, clamp)
    _builds.bump()
    d = batched_squared_distances(arr, arr)
    diag = np.arange(n)
    d[:, diag, diag] = np.inf
    idx = np.argsort(d, axis=2, kind="stable")[:, :, :k].astype(np.int64)
    T.note_branch(idx)
    return KnnGraph(idx, k)


def accelerate_knn(points, k: int, metric_channels: Channels = None, clamp: bool = False) -> KnnGraph:
    """kd-tree kNN, result-identical to :func:`knn_graph`.

    The tree proposes the (k+1)-th neighbour distance as a search radius; every
    point inside a slightly inflated ball is then re-ranked with the exact
    brute-force distance and tie rule.
    """
    arr = _select(_as_array(points), metric_channels)
    b, n, _ = arr.shape
    k = _resolve_k(k, n, clamp)
    _builds.bump()
    idx = np.empty((b, n, k), dtype=np.int64)
    for bi in range(b):
        cloud = np.ascontiguousarray(arr[bi], dtype=np.float64)
        tree = cKDTree(cloud)
        dist, _ = tree.query(cloud, k=k + 1)
        radius = dist[:, -1] * (1.0 + 1e-9) + 1e-12
        balls = tree.query_ball_point(cloud, radius)
        for i, cand in enumerate(balls):
            cand = np.asarray(cand, dtype=np.int64)
            cand = np.sort(cand[cand != i])
            d = squared_distances(cloud[i:i + 1], cloud[cand])[0]
            idx[bi, i] = cand[np.argsort(d, kind="stable")[:k]]
    T.note_branch(idx)
    return KnnGraph(idx, k)


def edge_features(points, graph: KnnGraph, mode: str = "concat") -> Tensor:
    """Neighbourhood edge tensor of shape (B, C_e, N, K).

    ``delta``: x_j - x_i (C_e = f). ``concat``: x_i repeated over K followed by
    x_j - x_i (C_e = 2f).
    """
    x = T.as_tensor(points)
    idx = np.asarray(graph.neighbor_idx)
    b, n, _ = x.shape
    if idx.shape[:2] != (b, n):
        raise ValueError(f"graph of shape {idx.shape} does not match points {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"neighbour indices must lie in [0, {n})")
    neighbours = T.gather(x, idx)  # B,N,K,f
    center = T.reshape(x, (b, n, 1, x.shape[2]))
    delta = neighbours - center
    if mode == "delta":
        edges = delta
    elif mode == "concat":
        edges = T.concat([T.broadcast_to(center, delta.shape), delta], axis=-1)
    else:
        raise ValueError(f"edge mode must be 'delta' or 'concat', got {mode!r}")
    return T.permute(edges, (0, 3, 1, 2))
