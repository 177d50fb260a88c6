"""End-to-end acceptance checks, one test per criterion.

Each test ends with ``criterion(n, title).check(ok, detail)``, which records a
verdict line printed in the terminal summary and then asserts it.
"""

import dataclasses
import math
import time

import numpy as np
import pytest

from cpt import layers as L
from cpt import tensor as T
from cpt import toy
from cpt.gradcheck import check_gradients
from cpt.graph import accelerate_knn, knn_graph
from cpt.model import ModelConfig, classify_forward, init_params, load_params, save_params, segment_forward
from cpt.train import (
    K_SWEEP,
    ablation_harness,
    cosine_lr,
    cross_entropy,
    point_count_table,
    sgd_momentum_step,
    train,
)


def _oracle_order(cloud):
    """Every other point of each row, fully sorted on (squared distance, index)
    with plain Python floats."""
    n, f = cloud.shape
    rows = []
    for i in range(n):
        pairs = []
        for j in range(n):
            if j != i:
                acc = 0.0
                for c in range(f):
                    diff = float(cloud[i, c]) - float(cloud[j, c])
                    acc += diff * diff
                pairs.append((acc, j))
        pairs.sort()
        rows.append([j for _, j in pairs])
    return np.array(rows)


def _distinct_distance_clouds(count, n, seed):
    rng = np.random.default_rng(seed)
    clouds = []
    while len(clouds) < count:
        x = rng.normal(size=(n, 3))
        d = ((x[:, None] - x[None]) ** 2).sum(-1)[np.triu_indices(n, 1)]
        if np.unique(d).size == d.size:
            clouds.append(x)
    return np.stack(clouds)


# -- 1 ------------------------------------------------------------------------------

def test_knn_matches_full_sort_oracle(criterion):
    rng = np.random.default_rng(100)
    clouds = rng.normal(size=(100, 64, 3))
    # every tenth cloud sits on a small integer lattice, full of exact distance ties
    clouds[::10] = rng.integers(0, 4, size=(10, 64, 3))
    start = time.perf_counter()
    orders = np.stack([_oracle_order(c) for c in clouds])
    mismatches = 0
    for k in (1, 4, 20):
        expected = orders[:, :, :k]
        mismatches += int(np.sum(knn_graph(clouds, k).neighbor_idx != expected))
        mismatches += int(np.sum(accelerate_knn(clouds, k).neighbor_idx != expected))
    elapsed = time.perf_counter() - start
    criterion(1, "kNN oracle equivalence").check(
        mismatches == 0 and elapsed < 10.0, f"{mismatches} mismatched indices, {elapsed:.1f}s (limit 10s)"
    )


# -- 2 ------------------------------------------------------------------------------

def test_classification_gradients_match_finite_differences(criterion):
    cfg = ModelConfig(
        k=4, layer_dims=(8, 8), interpoint_flags=(True, False), shared_mlp_dim=16, head_mlp_dims=(8,),
        num_classes=3, heads=1, proj_kernel=1, dropout_rate=0.0,
    )
    rng = np.random.default_rng(200)
    params = init_params(cfg, rng)
    x = rng.normal(size=(2, 16, 3))
    x /= np.linalg.norm(x, axis=-1).max()
    y = np.array([0, 2])
    assert x.dtype == np.float64
    start = time.perf_counter()
    report = check_gradients(lambda: cross_entropy(classify_forward(x, cfg, params), y), dict(params.named()), h=1e-3)
    elapsed = time.perf_counter() - start
    name = max(report, key=lambda n: report[n].plain)
    plain = report[name].plain
    refined = max(r.error for r in report.values())
    criterion(2, "gradient fidelity").check(
        plain < 1e-4 and refined < 1e-4 and elapsed < 60.0,
        f"max central-difference error {plain:.2e} ({name}), refined {refined:.2e}, "
        f"{len(report)} tensors, {elapsed:.1f}s (limit 60s)",
    )


# -- 3 ------------------------------------------------------------------------------

def test_permutation_invariance_and_equivariance(criterion):
    clouds = _distinct_distance_clouds(20, 64, 300)
    rng = np.random.default_rng(301)
    cls_params = init_params(toy.MODEL, rng)
    seg_cfg = dataclasses.replace(toy.MODEL, head="segmentation", num_classes=6)
    seg_params = init_params(seg_cfg, rng)
    cls_diff, seg_diff, argmax_same = 0.0, 0.0, True
    for x in clouds:
        perm = rng.permutation(len(x))
        a = classify_forward(x[None], toy.MODEL, cls_params).data
        b = classify_forward(x[None, perm], toy.MODEL, cls_params).data
        cls_diff = max(cls_diff, float(np.abs(a - b).max()))
        argmax_same &= bool(np.array_equal(a.argmax(-1), b.argmax(-1)))
        s = segment_forward(x[None], seg_cfg, seg_params).data
        sp = segment_forward(x[None, perm], seg_cfg, seg_params).data
        seg_diff = max(seg_diff, float(np.abs(s[:, perm] - sp).max()))
    criterion(3, "permutation invariance/equivariance").check(
        cls_diff < 1e-4 and seg_diff < 1e-4 and argmax_same,
        f"classification max diff {cls_diff:.1e}, segmentation max diff {seg_diff:.1e}, argmax identical: {argmax_same}",
    )


# -- 4 ------------------------------------------------------------------------------

def test_attention_rows_sum_to_one(criterion):
    rng = np.random.default_rng(400)
    variants = [toy.MODEL, dataclasses.replace(toy.MODEL, heads=2), dataclasses.replace(toy.MODEL, graph_mode="none")]
    worst, matrices, shapes = 0.0, 0, set()
    for cfg in variants:
        params = init_params(cfg, rng)
        for scale in (0.1, 1.0, 10.0):
            record = []
            classify_forward(rng.normal(size=(2, 40, 3)) * scale, cfg, params, record=record)
            # feature-wise and InterPoint passes in the first two layers, feature-wise in the last
            assert len(record) == 5
            for w in record:
                worst = max(worst, float(np.abs(w.sum(-1) - 1.0).max()))
                matrices += 1
                shapes.add(w.shape)
    criterion(4, "attention normalisation").check(
        worst <= 1e-6, f"max |row sum - 1| = {worst:.1e} over {matrices} maps, shapes {sorted(shapes)}"
    )


# -- 5 ------------------------------------------------------------------------------

def test_interpoint_batch_independence(criterion):
    rng = np.random.default_rng(500)
    attn = L.init_attention(rng, 16, heads=2)
    x = rng.normal(size=(4, 30, 16))
    batched = L.interpoint_attention(T.Tensor(x), attn).data
    block_ok = all(np.array_equal(L.interpoint_attention(T.Tensor(x[i:i + 1]), attn).data[0], batched[i]) for i in range(4))

    params = init_params(toy.MODEL, rng)
    clouds = rng.normal(size=(4, 64, 3))
    full = classify_forward(clouds, toy.MODEL, params).data
    model_ok = all(np.array_equal(classify_forward(clouds[i:i + 1], toy.MODEL, params).data[0], full[i]) for i in range(4))
    criterion(5, "InterPoint batch independence").check(
        block_ok and model_ok, f"attention block bit-identical: {block_ok}, full model bit-identical: {model_ok}"
    )


# -- 6 and 8 share one trained toy model ----------------------------------------------

@pytest.fixture(scope="module")
def toy_run():
    start = time.perf_counter()
    train_set, test_set = toy.datasets(0)
    params, report = train(toy.MODEL, toy.TRAIN, train_set, test_set)
    return params, report, test_set, time.perf_counter() - start


def test_toy_overfit(criterion, toy_run):
    _, report, _, elapsed = toy_run
    final = report.final
    epochs = len(report.epochs)
    ok = final["train_acc"] == 1.0 and epochs <= 300 and final["test_acc"] >= 0.9 and elapsed < 300.0
    criterion(6, "toy overfit").check(
        ok,
        f"train acc {final['train_acc']:.3f} after {epochs} epochs, test acc {final['test_acc']:.3f}, "
        f"{elapsed:.0f}s (limit 300s)",
    )


def test_point_dropout_robustness(criterion, toy_run):
    params, _, test_set, _ = toy_run
    full, half = point_count_table(test_set, toy.MODEL, params, [64], seed=0)
    assert (full["points"], half["points"]) == (128, 64)
    ratio = half["overall_acc"] / full["overall_acc"]
    criterion(8, "point-dropout robustness").check(
        ratio >= 0.8, f"test acc {full['overall_acc']:.3f} at 128 points, {half['overall_acc']:.3f} at 64 (ratio {ratio:.3f})"
    )


# -- 7 ------------------------------------------------------------------------------

def test_ablation_structure_and_trends(criterion):
    train_set, test_set = toy.datasets(0)

    # structure: a cheap one-epoch sweep over every axis
    tiny_train = dataclasses.replace(toy.TRAIN, epochs=1, stop_at_train_acc=None)
    small = dataclasses.replace(
        toy.MODEL, layer_dims=(8, 8), interpoint_flags=(True, False), shared_mlp_dim=16, head_mlp_dims=(8,)
    )
    structure = ablation_harness(
        small, tiny_train, train_set, test_set,
        {"k": list(K_SWEEP), "graph_mode": ["dynamic", "static"], "no_locality": True, "eval_point_counts": [64]},
    )
    t = structure.tables
    shape_ok = (
        [r["k"] for r in t["k"]] == [10, 20, 30, 40]
        and [r["graph_mode"] for r in t["graph_mode"]] == ["dynamic", "static"]
        and [r["no_locality"] for r in t["no_locality"]] == ["locality", "no_locality"]
        and [r["points"] for r in t["eval_point_counts"]] == [128, 64]
    )

    # trends: the full toy recipe, averaged over three seeds
    trends = ablation_harness(
        toy.MODEL, toy.TRAIN, train_set, test_set, {"graph_mode": ["dynamic", "static"], "no_locality": True}, seeds=(0, 1, 2)
    ).tables
    mean = {r["graph_mode"]: r["mean_test_acc"] for r in trends["graph_mode"]}
    mean.update({r["no_locality"]: r["mean_test_acc"] for r in trends["no_locality"]})
    ok = shape_ok and mean["dynamic"] >= mean["static"] and mean["locality"] >= mean["no_locality"]
    criterion(7, "ablation harness").check(
        ok,
        f"structure ok: {shape_ok}; mean test acc dynamic {mean['dynamic']:.3f} vs static {mean['static']:.3f}, "
        f"locality {mean['locality']:.3f} vs no locality {mean['no_locality']:.3f}",
    )


# -- 9 ------------------------------------------------------------------------------

def test_checkpoint_round_trip(criterion, tmp_path):
    params = init_params(toy.MODEL, np.random.default_rng(900))
    path = tmp_path / "toy.cpt"
    save_params(params, path, toy.MODEL)
    loaded = load_params(path, toy.MODEL)
    x = np.random.default_rng(901).normal(size=(3, 64, 3))
    a = classify_forward(x, toy.MODEL, params).data
    b = classify_forward(x, toy.MODEL, loaded).data
    same = np.array_equal(a, b) and all(np.array_equal(p.data, q.data) for p, q in zip(params.tensors(), loaded.tensors()))
    criterion(9, "checkpoint round trip").check(same, f"logits and tensors bit-identical: {same}")


# -- 10 -----------------------------------------------------------------------------

def test_scheduler_and_optimizer_contracts(criterion):
    lr0, lr_min, total = 0.01, 1e-4, 60
    endpoints = cosine_lr(0, total, lr0, lr_min) == lr0 and cosine_lr(total, total, lr0, lr_min) == lr_min
    midpoint = math.isclose(cosine_lr(total / 2, total, lr0, lr_min), (lr0 + lr_min) / 2, rel_tol=0, abs_tol=1e-15)

    (theta,), _ = sgd_momentum_step([np.array(1.0)], [np.array(0.5)], None, 0.1, 0.0)
    plain_ok = theta == pytest.approx(0.95, abs=1e-15)
    p, v = [np.array(0.0)], None
    seen = []
    for _ in range(2):
        p, v = sgd_momentum_step(p, [np.array(1.0)], v, 1.0, 0.9)
        seen.append((float(v[0]), float(p[0])))
    momentum_ok = np.allclose(seen, [(1.0, -1.0), (1.9, -2.9)], rtol=0, atol=1e-15)
    criterion(10, "scheduler/optimizer contracts").check(
        endpoints and midpoint and plain_ok and momentum_ok,
        f"cosine endpoints exact: {endpoints}, midpoint: {midpoint}, momentum steps {seen}",
    )
