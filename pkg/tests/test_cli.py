import csv
import filecmp
import json
import os

import pytest

from thermognn.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, load_config, main
from thermognn.graph import ConfigError, load_dataset

SMALL = ["--set", "generator.n_cases=5", "--set", "generator.n_steps=6", "--set", "generator.substeps=4"]
TINY_TRAIN = ["--set", "train.epochs=3", "--set", "train.batch_size=8", "--set", "model.hidden=6",
              "--set", "train.milestones=[]", "--quiet"]


def _same_tree(a, b):
    cmp = filecmp.dircmp(a, b)
    assert not cmp.left_only and not cmp.right_only
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    assert not mismatch and not errors, mismatch
    for d in cmp.common_dirs:
        _same_tree(os.path.join(a, d), os.path.join(b, d))


@pytest.fixture(scope="module")
def chain_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "chain"
    assert main(["generate", "--preset", "chain", *SMALL, "--out", str(out)]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def trained(chain_dir, tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    for v in ("tignn", "gnn"):
        code = main(["train", "--preset", "chain", *TINY_TRAIN, "--variant", v,
                     "--data", str(chain_dir), "--out", str(root / v)])
        assert code == EXIT_OK
    return root


def test_generate_chain_preset(chain_dir, capsys):
    assert os.path.exists(chain_dir / "manifest.ini")
    ds = load_dataset(chain_dir)
    assert len(ds) == 5 and ds.cases[0].n_steps == 6
    main(["inspect", "--data", str(chain_dir)])
    out = capsys.readouterr().out
    assert "cases     5" in out and "q, p, e" in out


def test_generate_is_byte_identical(chain_dir, tmp_path):
    again = tmp_path / "again"
    assert main(["generate", "--preset", "chain", *SMALL, "--out", str(again)]) == EXIT_OK
    _same_tree(chain_dir, again)


def test_unknown_key_names_it(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"generator": {"kind": "chain", "stifness": 2.0}}))
    code = main(["generate", "--config", str(cfg), "--out", str(tmp_path / "x")])
    assert code == EXIT_USAGE
    assert "stifness" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


def test_unknown_section_and_override(tmp_path, capsys):
    assert main(["generate", "--preset", "chain", "--set", "trian.epochs=3", "--out", str(tmp_path / "y")]) == EXIT_USAGE
    assert "trian" in capsys.readouterr().err


def test_config_file_merges_onto_preset(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"preset": "couette", "generator": {"n_cases": 20}}))
    merged = load_config(str(cfg), None)
    assert merged["generator"]["n_cases"] == 20
    assert merged["model"]["hidden"] == 10
    with pytest.raises(ConfigError):
        load_config(None, "couette", ["model.hiden=3"])


def test_couette_preset_case_count():
    assert load_config(None, "couette")["generator"]["n_cases"] == 100


def test_usage_errors():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == EXIT_USAGE
    assert main(["inspect"]) == EXIT_USAGE


def test_missing_data_is_data_error(tmp_path):
    assert main(["inspect", "--data", str(tmp_path / "nope")]) == EXIT_DATA


def test_train_writes_artifacts(trained):
    for v in ("tignn", "gnn"):
        d = trained / v
        for name in ("last", "best", "loss.csv"):
            assert os.path.exists(d / name), name
        with open(d / "loss.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 3


def test_train_spnn_variant(chain_dir, tmp_path, capsys):
    code = main(["train", "--preset", "chain", *TINY_TRAIN, "--epochs", "1", "--variant", "spnn",
                 "--data", str(chain_dir), "--out", str(tmp_path / "s")])
    assert code == EXIT_OK
    main(["inspect", "--checkpoint", str(tmp_path / "s" / "best")])
    assert "spnn" in capsys.readouterr().out


def test_resume_matches_uninterrupted(chain_dir, tmp_path):
    args = ["train", "--preset", "chain", *TINY_TRAIN, "--variant", "gnn", "--data", str(chain_dir)]
    assert main(args + ["--epochs", "4", "--out", str(tmp_path / "full")]) == EXIT_OK
    assert main(args + ["--epochs", "2", "--out", str(tmp_path / "half")]) == EXIT_OK
    assert main(["train", "--resume", str(tmp_path / "half" / "last"), "--epochs", "4", "--quiet",
                 "--data", str(chain_dir), "--out", str(tmp_path / "rest")]) == EXIT_OK
    a = (tmp_path / "full" / "loss.csv").read_text()
    b = (tmp_path / "rest" / "loss.csv").read_text()
    assert a == b


def test_evaluate_schema(chain_dir, trained, tmp_path):
    out = tmp_path / "ev"
    code = main(["evaluate", "--checkpoint", str(trained / "tignn" / "best"),
                 "--checkpoint", str(trained / "gnn" / "best"), "--data", str(chain_dir), "--out", str(out)])
    assert code == EXIT_OK
    with open(out / "boxplots.csv") as fh:
        rows = list(csv.DictReader(fh))
    keys = [(r["variable"], r["split"], r["method"]) for r in rows]
    assert len(keys) == len(set(keys))
    assert set(keys) == {(v, s, m) for v in "qpe" for s in ("train", "test") for m in ("tignn", "gnn")}
    for r in rows:
        vals = [float(r[k]) for k in ("lw", "lq", "med", "uq", "uw")]
        assert all(x >= 0 for x in vals)
        assert vals == sorted(vals)
    with open(out / "errors.csv") as fh:
        assert all(float(r["error"]) >= 0 for r in csv.DictReader(fh))
    traces = json.loads((out / "traces.json").read_text())
    assert "tignn" in traces["traces"] and "gnn" not in traces["traces"]


def test_evaluate_idempotent(chain_dir, trained, tmp_path):
    for name in ("a", "b"):
        assert main(["evaluate", "--checkpoint", str(trained / "tignn" / "best"), "--data", str(chain_dir),
                     "--out", str(tmp_path / name)]) == EXIT_OK
    _same_tree(tmp_path / "a", tmp_path / "b")


def test_rollout_command(chain_dir, trained, tmp_path):
    out = tmp_path / "r"
    assert main(["rollout", "--checkpoint", str(trained / "tignn" / "best"), "--data", str(chain_dir),
                 "--case", "1", "--out", str(out)]) == EXIT_OK
    pred = load_dataset(out)
    assert pred.cases[0].states.shape == load_dataset(chain_dir).cases[1].states.shape
    assert main(["rollout", "--checkpoint", str(trained / "tignn" / "best"), "--data", str(chain_dir),
                 "--case", "99", "--out", str(tmp_path / "r2")]) == EXIT_DATA


def test_layout_mismatch_is_data_error(trained, tmp_path, capsys):
    cou = tmp_path / "cou"
    code = main(["generate", "--preset", "couette", "--set", "generator.n_cases=3", "--set", "generator.n_steps=2",
                 "--out", str(cou)])
    assert code == EXIT_OK
    capsys.readouterr()
    code = main(["evaluate", "--checkpoint", str(trained / "tignn" / "best"), "--data", str(cou),
                 "--out", str(tmp_path / "ev")])
    assert code == EXIT_DATA
    assert "layout" in capsys.readouterr().err


def test_train_is_byte_identical(chain_dir, tmp_path):
    args = ["train", "--preset", "chain", *TINY_TRAIN, "--epochs", "2", "--variant", "tignn", "--data", str(chain_dir)]
    for name in ("a", "b"):
        assert main(args + ["--out", str(tmp_path / name)]) == EXIT_OK
    _same_tree(tmp_path / "a", tmp_path / "b")
