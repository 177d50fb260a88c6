import json

import pytest

from cpt.cli import DEFAULTS, main, resolve_config

TINY_MODEL = [
    "--set", "model.k=4",
    "--set", "model.layer_dims=[8,8]",
    "--set", "model.interpoint_flags=[true,false]",
    "--set", "model.shared_mlp_dim=16",
    "--set", "model.head_mlp_dims=[8]",
    "--set", "model.num_classes=3",
]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    code = main(["gen-data", "--out", str(out), "--set", "data.per_class=3", "--set", "data.points=16"])
    assert code == 0
    return out


def _data_args(dataset):
    return [
        "--set", f"data.train_manifest={dataset / 'train' / 'manifest.tsv'}",
        "--set", f"data.test_manifest={dataset / 'test' / 'manifest.tsv'}",
    ]


def test_gen_data_writes_stratified_split(dataset):
    train = (dataset / "train" / "manifest.tsv").read_text().splitlines()
    test = (dataset / "test" / "manifest.tsv").read_text().splitlines()
    assert sum(not l.startswith("#") for l in train) == 6
    assert sum(not l.startswith("#") for l in test) == 3
    assert json.loads((dataset / "config.json").read_text())["data"]["per_class"] == 3


def test_unknown_key_is_usage_error(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path), "--set", "model.depth=3"]) == 2
    assert "unknown" in capsys.readouterr().err


def test_bad_subcommand_is_usage_error():
    assert main(["fly"]) == 2


def test_missing_manifest_is_usage_error(tmp_path):
    assert main(["train", "--out", str(tmp_path)]) == 2
    assert main(["train", "--out", str(tmp_path), "--set", "data.train_manifest=/no/such.tsv"]) == 2


def test_override_parsing():
    cfg = resolve_config(None, ["model.k=7", "model.edge_mode=delta", "train.scale_range=[1,1]"], seed=5)
    assert cfg["model"]["k"] == 7 and cfg["model"]["edge_mode"] == "delta"
    assert cfg["train"]["scale_range"] == [1, 1]
    assert cfg["seed"] == 5
    assert DEFAULTS["model"]["k"] == 20


def test_train_eval_and_resolved_config_rerun(dataset, tmp_path):
    args = TINY_MODEL + _data_args(dataset) + ["--set", "train.epochs=2", "--set", "train.batch_size=3"]
    first, second = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--out", str(first), "--seed", "3"] + args) == 0
    assert (first / "model.cpt").exists()
    report = (first / "report.jsonl").read_text()
    assert len(report.splitlines()) == 2
    assert main(["train", "--out", str(second), "--config", str(first / "config.json")]) == 0
    assert (second / "report.jsonl").read_text() == report

    ev = tmp_path / "eval"
    code = main(["eval", "--out", str(ev), "--set", f"eval.checkpoint={first / 'model.cpt'}",
                 "--set", "eval.point_counts=[8]"] + _data_args(dataset))
    assert code == 0
    rows = [json.loads(l) for l in (ev / "eval.jsonl").read_text().splitlines()]
    assert [r["points"] for r in rows] == [16, 8]


def test_eval_incompatible_checkpoint(dataset, tmp_path):
    bogus = tmp_path / "x.cpt"
    bogus.write_bytes(b"JUNKJUNKJUNK")
    code = main(["eval", "--out", str(tmp_path), "--set", f"eval.checkpoint={bogus}"] + _data_args(dataset))
    assert code == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code(dataset, tmp_path, capsys):
    args = TINY_MODEL + _data_args(dataset) + ["--set", "train.epochs=3", "--set", "train.lr0=1e300"]
    assert main(["train", "--out", str(tmp_path)] + args) == 3
    assert "epoch" in capsys.readouterr().err


def test_bench_knn_small(tmp_path, capsys):
    code = main(["bench-knn", "--out", str(tmp_path), "--set", "bench.sizes=[64,200]", "--set", "bench.ks=[4,20]"])
    assert code == 0
    rows = [json.loads(l) for l in (tmp_path / "bench_knn.jsonl").read_text().splitlines()]
    assert len(rows) == 4 and all(r["identical"] for r in rows)


def test_gradcheck_passes_on_small_network(tmp_path, capsys):
    small = '{"k": 3, "layer_dims": [4, 4], "interpoint_flags": [true, false], "shared_mlp_dim": 6, ' \
            '"head_mlp_dims": [4], "num_classes": 2}'
    code = main(["gradcheck", "--out", str(tmp_path), "--set", f"gradcheck.model={small}",
                 "--set", "gradcheck.points=8"])
    out = capsys.readouterr().out
    assert code == 0, out
    assert "layers.0.embedding.weight" in out


def test_gradcheck_failure_exit_code(tmp_path, capsys):
    # a tolerance of zero cannot be met by any finite-difference estimate
    small = '{"k": 3, "layer_dims": [4], "interpoint_flags": [false], "shared_mlp_dim": 4, ' \
            '"head_mlp_dims": [], "num_classes": 2}'
    code = main(["gradcheck", "--out", str(tmp_path), "--set", f"gradcheck.model={small}",
                 "--set", "gradcheck.points=6", "--set", "gradcheck.tolerance=0"])
    assert code == 1
    assert "FAILED" in capsys.readouterr().out
