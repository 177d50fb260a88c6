import dataclasses
import struct

import numpy as np
import numpy.testing as npt
import pytest

from cpt.gradcheck import check_gradients, worst
from cpt.graph import GraphConfigError, graph_build_count, reset_graph_build_count
from cpt.model import (
    CheckpointShapeError,
    CheckpointVersionError,
    ModelConfig,
    ModelConfigError,
    NotACheckpointError,
    TruncatedCheckpointError,
    classify_forward,
    global_input_forward,
    init_params,
    load_checkpoint,
    load_params,
    parameter_count,
    save_params,
    segment_forward,
)
from cpt.train import cross_entropy

TINY = ModelConfig(
    k=4, layer_dims=(8, 8), interpoint_flags=(True, False), shared_mlp_dim=16, head_mlp_dims=(8,), num_classes=3
)
TINY_SEG = dataclasses.replace(TINY, head="segmentation", num_classes=5)


def _clouds(b, n, seed=0):
    return np.random.default_rng(seed).normal(size=(b, n, 3))


def _params(cfg, seed=0):
    return init_params(cfg, np.random.default_rng(seed))


# -- config ---------------------------------------------------------------

def test_last_layer_must_not_have_interpoint():
    with pytest.raises(ModelConfigError):
        ModelConfig(layer_dims=(8, 8), interpoint_flags=(True, True))


def test_config_dict_round_trip():
    assert ModelConfig.from_dict(TINY_SEG.to_dict()) == TINY_SEG
    with pytest.raises(ModelConfigError, match="unknown"):
        ModelConfig.from_dict({"depth": 3})


def _hand_count(c=40):
    # embedding E*(2C)*k + E; attention 3(E + E^2) + E^2 + E; norm 2E;
    # feedforward (hidden 2E) 4E^2 + 3E; an InterPoint block repeats attention, FF and both norms
    def layer(c_in, e, interpoint):
        core = (4 * e * e + 4 * e) + 2 * e + (4 * e * e + 3 * e) + 2 * e
        return 2 * c_in * 20 * e + e + core * (2 if interpoint else 1)

    trunk = layer(3, 64, True) + layer(64, 64, True) + layer(64, 128, False)
    dense = lambda i, o: i * o + o + 2 * o  # linear + layer norm
    return trunk + dense(256, 1024) + dense(1024, 512) + dense(512, 256) + 256 * c + c


def test_parameter_count_default_config():
    assert _hand_count() == 1_698_984
    assert parameter_count(ModelConfig()) == 1_698_984


# -- classification ----------------------------------------------------------

@pytest.mark.parametrize("n", [32, 64, 128])
def test_logit_shape_for_any_point_count(n):
    out = classify_forward(_clouds(2, n), TINY, _params(TINY))
    assert out.shape == (2, 3)


def test_too_few_points_for_k_raises_graph_error():
    with pytest.raises(GraphConfigError):
        classify_forward(_clouds(1, 4), TINY, _params(TINY))


def test_classification_permutation_invariant():
    params = _params(TINY)
    rng = np.random.default_rng(1)
    for _ in range(5):
        x = rng.normal(size=(1, 24, 3))
        perm = rng.permutation(24)
        a = classify_forward(x, TINY, params).data
        b = classify_forward(x[:, perm], TINY, params).data
        npt.assert_allclose(a, b, atol=1e-4, rtol=0)


def test_duplicate_clouds_give_identical_rows():
    x = _clouds(1, 20)
    out = classify_forward(np.concatenate([x, x, _clouds(1, 20, seed=5)]), TINY, _params(TINY)).data
    npt.assert_array_equal(out[0], out[1])


def test_batch_item_matches_single_run_bit_exactly():
    params = _params(TINY)
    x = _clouds(3, 20)
    batched = classify_forward(x, TINY, params).data
    for i in range(3):
        npt.assert_array_equal(classify_forward(x[i:i + 1], TINY, params).data[0], batched[i])


def test_eval_mode_is_deterministic_and_train_mode_uses_dropout():
    params = _params(TINY)
    x = _clouds(2, 20)
    npt.assert_array_equal(classify_forward(x, TINY, params).data, classify_forward(x, TINY, params).data)
    a = classify_forward(x, TINY, params, train=True, rng=np.random.default_rng(0)).data
    b = classify_forward(x, TINY, params, train=True, rng=np.random.default_rng(1)).data
    assert not np.array_equal(a, b)


def test_static_and_dynamic_agree_for_one_layer():
    one = dataclasses.replace(TINY, layer_dims=(8,), interpoint_flags=(False,))
    params = _params(one)
    x = _clouds(2, 20)
    static = dataclasses.replace(one, graph_mode="static")
    npt.assert_array_equal(classify_forward(x, one, params).data, classify_forward(x, static, params).data)


def test_graph_builds_per_mode():
    x = _clouds(1, 20)
    for mode, builds in (("dynamic", 2), ("static", 1), ("none", 0)):
        cfg = dataclasses.replace(TINY, graph_mode=mode)
        reset_graph_build_count()
        classify_forward(x, cfg, _params(cfg))
        assert graph_build_count() == builds, mode


def test_static_differs_from_dynamic_with_two_layers():
    params = _params(TINY)
    x = _clouds(1, 20)
    static = dataclasses.replace(TINY, graph_mode="static")
    assert not np.allclose(classify_forward(x, TINY, params).data, classify_forward(x, static, params).data)


# -- segmentation ------------------------------------------------------------

def test_segmentation_shape():
    assert segment_forward(_clouds(2, 20), TINY_SEG, _params(TINY_SEG)).shape == (2, 20, 5)


def test_segmentation_permutation_equivariant():
    params = _params(TINY_SEG)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 24, 3))
    perm = rng.permutation(24)
    a = segment_forward(x, TINY_SEG, params).data
    b = segment_forward(x[:, perm], TINY_SEG, params).data
    npt.assert_allclose(a[:, perm], b, atol=1e-4, rtol=0)


def test_zero_head_weights_give_bias_logits():
    params = _params(TINY_SEG)
    params.out.weight.data[:] = 0.0
    params.out.bias.data[:] = [0.5, -1.0, 2.0, 0.0, 3.0]
    out = segment_forward(_clouds(2, 20), TINY_SEG, params).data
    npt.assert_array_equal(out, np.broadcast_to([0.5, -1.0, 2.0, 0.0, 3.0], out.shape))


def test_segment_forward_needs_segmentation_params():
    with pytest.raises(ModelConfigError):
        segment_forward(_clouds(1, 20), TINY, _params(TINY))


# -- graph-free variant --------------------------------------------------------

GLOBAL = dataclasses.replace(TINY, graph_mode="none")


def test_global_input_runs_on_large_cloud_without_graphs():
    reset_graph_build_count()
    out = global_input_forward(_clouds(1, 1024), GLOBAL, _params(GLOBAL))
    assert out.shape == (1, 3)
    assert graph_build_count() == 0


def test_global_input_requires_none_mode():
    with pytest.raises(ModelConfigError):
        global_input_forward(_clouds(1, 20), TINY, _params(TINY))


def test_global_input_gradients():
    params = _params(GLOBAL)
    x = _clouds(2, 16, seed=3)
    x /= np.linalg.norm(x, axis=-1).max()
    y = np.array([0, 2])
    named = dict(params.named())
    report = check_gradients(lambda: cross_entropy(global_input_forward(x, GLOBAL, params), y), named)
    name, err = worst(report)
    assert err < 1e-4, (name, err)


# -- checkpoints -----------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    params = _params(TINY_SEG, seed=4)
    path = tmp_path / "model.cpt"
    save_params(params, path, TINY_SEG)
    loaded = load_params(path, TINY_SEG)
    for (n1, a), (n2, b) in zip(params.named(), loaded.named()):
        assert n1 == n2
        npt.assert_array_equal(a.data, b.data)
        assert a.data.dtype == b.data.dtype
    x = _clouds(2, 20)
    npt.assert_array_equal(segment_forward(x, TINY_SEG, params).data, segment_forward(x, TINY_SEG, loaded).data)
    cfg, again = load_checkpoint(path)
    assert cfg == TINY_SEG
    npt.assert_array_equal(again.out.weight.data, params.out.weight.data)


def test_corrupt_magic_is_not_a_checkpoint(tmp_path):
    path = tmp_path / "model.cpt"
    save_params(_params(TINY), path, TINY)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(NotACheckpointError, match="not a checkpoint"):
        load_params(path)


def test_shape_mismatch_names_first_tensor(tmp_path):
    big = ModelConfig(num_classes=3)
    path = tmp_path / "big.cpt"
    save_params(_params(big), path, big)
    small = dataclasses.replace(big, layer_dims=(32,), interpoint_flags=(False,))
    with pytest.raises(CheckpointShapeError, match=r"layers\.0\.embedding\.weight"):
        load_params(path, small)


def test_version_mismatch(tmp_path):
    path = tmp_path / "model.cpt"
    save_params(_params(TINY), path, TINY)
    raw = path.read_bytes()
    (size,) = struct.unpack("<I", raw[4:8])
    header = raw[8:8 + size].replace(b'"version": 1', b'"version": 9')
    path.write_bytes(raw[:4] + struct.pack("<I", len(header)) + header + raw[8 + size:])
    with pytest.raises(CheckpointVersionError):
        load_params(path)


def test_truncated_file(tmp_path):
    path = tmp_path / "model.cpt"
    save_params(_params(TINY), path, TINY)
    raw = path.read_bytes()
    path.write_bytes(raw[:-10])
    with pytest.raises(TruncatedCheckpointError):
        load_params(path)
    path.write_bytes(raw[:12])
    with pytest.raises(TruncatedCheckpointError):
        load_params(path)
