"""Training recipe: cross-entropy, SGD with classical momentum, cosine
annealing, jitter/scale augmentation, metrics and the ablation harness.

All randomness derives from one integer seed through named sub-streams
(``data``, ``init``, ``augmentation``, ``dropout``), so two runs that differ
in one factor draw identical numbers everywhere else.
"""

from __future__ import annotations

import dataclasses
import json
import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .graph import PointBatch
from .model import ModelConfig, ModelParams, forward, init_params
from .tensor import Tensor

STREAMS = ("data", "init", "augmentation", "dropout")


class TrainConfigError(ValueError):
    """Invalid training hyperparameters."""


class DivergenceError(ArithmeticError):
    """Loss became non-finite."""

    def __init__(self, epoch: int, loss: float):
        super().__init__(f"loss diverged to {loss} in epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named purpose under a run seed."""
    if name not in STREAMS:
        raise ValueError(f"unknown random stream {name!r}; expected one of {STREAMS}")
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    lr0: float = 0.01
    lr_min: float = 1e-4
    momentum: float = 0.9
    jitter_sigma: float = 0.01
    jitter_clip: float = 0.05
    scale_range: Tuple[float, float] = (0.8, 1.25)
    point_dropout_eval_sizes: Tuple[int, ...] = ()
    seed: int = 0
    eval_every: int = 1
    stop_at_train_acc: Optional[float] = None  # end early once clean train accuracy reaches this
    grad_clip: Optional[float] = None  # rescale gradients whose global 2-norm exceeds this

    def __post_init__(self):
        object.__setattr__(self, "scale_range", tuple(float(v) for v in self.scale_range))
        object.__setattr__(self, "point_dropout_eval_sizes", tuple(int(v) for v in self.point_dropout_eval_sizes))
        if self.epochs < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise TrainConfigError(f"epochs >= 0, batch_size >= 1 and eval_every >= 1 required: {self}")
        if not 0.0 < self.lr_min <= self.lr0:
            raise TrainConfigError(f"need 0 < lr_min <= lr0, got lr_min={self.lr_min}, lr0={self.lr0}")
        if not 0.0 <= self.momentum < 1.0:
            raise TrainConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if len(self.scale_range) != 2 or self.scale_range[0] > self.scale_range[1] or self.scale_range[0] <= 0:
            raise TrainConfigError(f"scale_range must be [lo, hi] with 0 < lo <= hi, got {self.scale_range}")
        if self.jitter_sigma < 0 or self.jitter_clip < 0:
            raise TrainConfigError("jitter sigma and clip must be non-negative")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise TrainConfigError(f"grad_clip must be positive, got {self.grad_clip}")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise TrainConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

def sgd_momentum_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: Optional[Sequence[np.ndarray]],
    lr: float,
    momentum: float,
) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """Heavy-ball update ``v = momentum * v + g; theta = theta - lr * v``.

    Returns new ``(params, velocities)``; the inputs are not modified.
    """
    if len(params) != len(grads) or (state is not None and len(state) != len(params)):
        raise T.ShapeError("params, grads and state must have the same length")
    new_params, new_state = [], []
    for i, (p, g) in enumerate(zip(params, grads)):
        p, g = np.asarray(p), np.asarray(g)
        v = np.zeros_like(p) if state is None else np.asarray(state[i])
        if g.shape != p.shape or v.shape != p.shape:
            raise T.ShapeError(f"parameter {i}: shape {p.shape}, grad {g.shape}, velocity {v.shape}")
        v = momentum * v + g
        new_params.append(p - lr * v)
        new_state.append(v)
    return new_params, new_state


def cosine_lr(epoch: float, total_epochs: int, lr0: float, lr_min: float) -> float:
    if total_epochs <= 0:
        return lr0
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    if epoch == 0:
        return lr0
    if epoch == total_epochs:
        return lr_min
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * epoch / total_epochs))


def cross_entropy(logits, targets) -> Tensor:
    """Mean negative log-softmax at the target, over clouds (and points)."""
    logits = T.as_tensor(logits)
    targets = np.asarray(targets)
    c = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise T.ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    if not np.issubdtype(targets.dtype, np.integer) or targets.size and (targets.min() < 0 or targets.max() >= c):
        raise ValueError(f"targets must be integer ids in [0, {c})")
    flat = T.reshape(logits, (-1, c))
    return T.nll_loss(T.log_softmax(flat, axis=-1), targets.reshape(-1))


# ---------------------------------------------------------------------------
# data transforms
# ---------------------------------------------------------------------------

def _with_features(batch, feats):
    if isinstance(batch, PointBatch):
        return PointBatch(feats, batch.labels, batch.num_classes)
    return feats


def augment(batch, cfg: TrainConfig, rng: np.random.Generator):
    """Per-cloud uniform scaling and clipped per-point Gaussian jitter of XYZ."""
    feats = np.array(batch.features if isinstance(batch, PointBatch) else batch, dtype=np.float64, copy=True)
    b, n, _ = feats.shape
    lo, hi = cfg.scale_range
    if lo != 1.0 or hi != 1.0:
        feats[..., :3] *= rng.uniform(lo, hi, size=(b, 1, 1))
    if cfg.jitter_sigma > 0:
        noise = np.clip(rng.normal(0.0, cfg.jitter_sigma, size=(b, n, 3)), -cfg.jitter_clip, cfg.jitter_clip)
        feats[..., :3] += noise
    return _with_features(batch, feats)


def unit_sphere_normalize(points) -> np.ndarray:
    """Centre the XYZ channels on their centroid and scale the farthest point to norm 1."""
    pts = np.array(points, dtype=np.float64, copy=True)
    xyz = pts[..., :3]
    xyz -= xyz.mean(axis=-2, keepdims=True)
    radius = np.sqrt((xyz ** 2).sum(-1)).max(axis=-1, keepdims=True)
    if np.any(radius == 0):
        raise ValueError("cannot normalise a cloud whose points all coincide (zero radius)")
    xyz /= radius[..., None]
    return pts


def random_point_dropout_eval(batch: PointBatch, keep_n: int, rng: np.random.Generator) -> PointBatch:
    """Keep ``keep_n`` points per cloud, sampled without replacement, in original order."""
    n = batch.num_points
    if keep_n < 2:
        raise ValueError(f"keep_n must be at least 2, got {keep_n}")
    if keep_n > n:
        raise ValueError(f"keep_n {keep_n} exceeds the {n} points available")
    idx = np.stack([np.sort(rng.choice(n, keep_n, replace=False)) for _ in range(len(batch))])
    rows = np.arange(len(batch))[:, None]
    labels = batch.labels
    if labels is not None and labels.ndim == 2:
        labels = labels[rows, idx]
    return PointBatch(batch.features[rows, idx], labels, batch.num_classes)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class Metrics:
    overall_acc: float
    mean_class_acc: float
    miou: float


def confusion_matrix(predictions, targets, class_count: int) -> np.ndarray:
    p = np.asarray(predictions).reshape(-1)
    t = np.asarray(targets).reshape(-1)
    return np.bincount(t * class_count + p, minlength=class_count * class_count).reshape(class_count, class_count)


def metrics(predictions, targets, class_count: int) -> Metrics:
    """Overall accuracy, mean per-class recall and mean IoU, the latter two over
    classes that occur in ``targets``."""
    p = np.asarray(predictions).reshape(-1)
    t = np.asarray(targets).reshape(-1)
    if p.shape != t.shape:
        raise ValueError(f"predictions {np.shape(predictions)} and targets {np.shape(targets)} differ")
    if not t.size:
        raise ValueError("cannot compute metrics on empty input")
    cm = confusion_matrix(p, t, class_count)
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(1)
    present = support > 0
    recall = tp[present] / support[present]
    union = support + cm.sum(0) - np.diag(cm)
    iou = tp[present] / union[present]
    return Metrics(float(tp.sum() / t.size), float(recall.mean()), float(iou.mean()))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class RunReport:
    """Per-epoch records plus named comparison tables.

    Epoch record fields, in order: epoch, lr, train_loss, train_acc,
    test_acc, test_mean_class_acc, test_miou. Accuracy fields appear only on
    evaluated epochs. Records carry no wall-clock data, so a fixed seed
    reproduces the report exactly.
    """

    epochs: List[dict] = field(default_factory=list)
    tables: Dict[str, List[dict]] = field(default_factory=dict)

    def to_jsonl(self) -> str:
        lines = [json.dumps({"type": "epoch", **r}) for r in self.epochs]
        for name, rows in self.tables.items():
            lines += [json.dumps({"type": "row", "table": name, **r}) for r in rows]
        return "\n".join(lines) + ("\n" if lines else "")

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())

    def table(self) -> str:
        out = []
        if self.epochs:
            cols = list(self.epochs[0])
            out.append(_format_table(cols, self.epochs))
        for name, rows in self.tables.items():
            if rows:
                out.append(f"[{name}]\n" + _format_table(list(rows[0]), rows))
        return "\n\n".join(out)

    @property
    def final(self) -> dict:
        return self.epochs[-1] if self.epochs else {}


def _format_table(cols: List[str], rows: List[dict]) -> str:
    def cell(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    body = [[cell(r.get(c, "")) for c in cols] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines)


def predict(batch: PointBatch, cfg: ModelConfig, params: ModelParams, batch_size: int = 32) -> np.ndarray:
    """Eval-mode argmax predictions, (B,) or (B, N)."""
    preds = []
    with T.no_grad():
        for s in range(0, len(batch), batch_size):
            logits = forward(batch.features[s:s + batch_size], cfg, params).data
            preds.append(logits.argmax(-1))
    return np.concatenate(preds)


def evaluate(batch: PointBatch, cfg: ModelConfig, params: ModelParams) -> Metrics:
    return metrics(predict(batch, cfg, params), batch.labels, cfg.num_classes)


def train_step(
    params: ModelParams,
    velocities: Optional[List[np.ndarray]],
    feats: np.ndarray,
    labels: np.ndarray,
    cfg: ModelConfig,
    lr: float,
    momentum: float,
    rng: Optional[np.random.Generator] = None,
    grad_clip: Optional[float] = None,
) -> Tuple[float, List[np.ndarray]]:
    """One forward/backward/update on a minibatch; returns (loss, velocities)."""
    tensors = params.tensors()
    for t in tensors:
        t.grad = None
        t.requires_grad = True
    loss = cross_entropy(forward(feats, cfg, params, train=True, rng=rng), labels)
    loss.backward()
    grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    if grad_clip is not None:
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
        if norm > grad_clip:
            grads = [g * (grad_clip / norm) for g in grads]
    new, velocities = sgd_momentum_step([t.data for t in tensors], grads, velocities, lr, momentum)
    for t, d in zip(tensors, new):
        t.data = d
    return loss.item(), velocities


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train_set: PointBatch,
    test_set: Optional[PointBatch] = None,
    params: Optional[ModelParams] = None,
    on_epoch: Optional[Callable[[dict, ModelParams], None]] = None,
) -> Tuple[ModelParams, RunReport]:
    """Train from scratch (or from ``params``); raises DivergenceError on a
    non-finite loss."""
    seed = train_cfg.seed
    if params is None:
        params = init_params(model_cfg, stream(seed, "init"))
    order_rng = stream(seed, "data")
    aug_rng = stream(seed, "augmentation")
    drop_rng = stream(seed, "dropout")
    report = RunReport()
    velocities = None
    n = len(train_set)
    for epoch in range(train_cfg.epochs):
        lr = cosine_lr(epoch, train_cfg.epochs, train_cfg.lr0, train_cfg.lr_min)
        order = order_rng.permutation(n)
        losses, sizes = [], []
        for s in range(0, n, train_cfg.batch_size):
            idx = order[s:s + train_cfg.batch_size]
            feats = augment(train_set.features[idx], train_cfg, aug_rng)
            loss, velocities = train_step(
                params, velocities, feats, train_set.labels[idx], model_cfg, lr, train_cfg.momentum, drop_rng,
                train_cfg.grad_clip,
            )
            if not np.isfinite(loss):
                raise DivergenceError(epoch, loss)
            losses.append(loss)
            sizes.append(len(idx))
        record = {"epoch": epoch, "lr": lr, "train_loss": float(np.average(losses, weights=sizes))}
        last = epoch == train_cfg.epochs - 1
        if last or (epoch + 1) % train_cfg.eval_every == 0:
            record["train_acc"] = evaluate(train_set, model_cfg, params).overall_acc
            if test_set is not None:
                m = evaluate(test_set, model_cfg, params)
                record.update(test_acc=m.overall_acc, test_mean_class_acc=m.mean_class_acc, test_miou=m.miou)
        report.epochs.append(record)
        if on_epoch is not None:
            on_epoch(record, params)
        target = train_cfg.stop_at_train_acc
        if target is not None and record.get("train_acc", -1.0) >= target:
            break
    return params, report


def point_count_table(
    test_set: PointBatch, cfg: ModelConfig, params: ModelParams, counts: Sequence[int], seed: int
) -> List[dict]:
    """Test metrics at full resolution and at each subsampled point count."""
    rows = []
    for count in [test_set.num_points, *counts]:
        rng = stream(seed, "data")
        subset = test_set if count == test_set.num_points else random_point_dropout_eval(test_set, count, rng)
        m = evaluate(subset, cfg, params)
        rows.append({"points": count, "overall_acc": m.overall_acc, "mean_class_acc": m.mean_class_acc, "miou": m.miou})
    return rows


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

ABLATION_AXES = ("graph_mode", "k", "no_locality", "eval_point_counts")
K_SWEEP = (10, 20, 30, 40)


def ablation_harness(
    base_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train_set: PointBatch,
    test_set: PointBatch,
    axes: Dict[str, object],
    seeds: Sequence[int] = (0,),
) -> RunReport:
    """Train and evaluate one variant per axis value, every variant under the
    same seeds.

    ``axes`` maps an axis name to its values: ``graph_mode`` a list of modes,
    ``k`` a list of neighbour counts, ``no_locality`` a truthy flag (compares
    the base model against its graph-free twin) and ``eval_point_counts`` a
    list of subsampled test sizes evaluated on the base model.
    """
    unknown = set(axes) - set(ABLATION_AXES)
    if unknown:
        raise ValueError(f"unknown ablation axes {sorted(unknown)}; expected a subset of {ABLATION_AXES}")
    report = RunReport()
    cache: Dict[Tuple[ModelConfig, int], Tuple[ModelParams, float]] = {}

    def run(cfg: ModelConfig, seed: int):
        key = (cfg, seed)
        if key not in cache:
            params, _ = train(cfg, dataclasses.replace(train_cfg, seed=seed), train_set)
            cache[key] = (params, evaluate(test_set, cfg, params).overall_acc)
        return cache[key]

    def sweep(name: str, variants: List[Tuple[object, ModelConfig]]):
        rows = []
        for value, cfg in variants:
            accs = [run(cfg, s)[1] for s in seeds]
            row = {name: value}
            row.update({f"seed{s}": a for s, a in zip(seeds, accs)})
            row["mean_test_acc"] = float(np.mean(accs))
            rows.append(row)
        report.tables[name] = rows

    if "graph_mode" in axes:
        sweep("graph_mode", [(m, dataclasses.replace(base_cfg, graph_mode=m)) for m in axes["graph_mode"]])
    if "k" in axes:
        sweep("k", [(k, dataclasses.replace(base_cfg, k=int(k))) for k in axes["k"]])
    if axes.get("no_locality"):
        sweep("no_locality", [
            ("locality", base_cfg),
            ("no_locality", dataclasses.replace(base_cfg, graph_mode="none")),
        ])
    if "eval_point_counts" in axes:
        rows = []
        for s in seeds:
            params, _ = run(base_cfg, s)
            for r in point_count_table(test_set, base_cfg, params, axes["eval_point_counts"], s):
                rows.append({"seed": s, **r})
        report.tables["eval_point_counts"] = rows
    return report
