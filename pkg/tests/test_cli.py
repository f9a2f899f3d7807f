import csv
import json
import logging
import os
import stat

import numpy as np
import pytest

from tlpbench.cli import LAMBDA_GRID, main
from tlpbench.config import SCHEMA, ConfigError, coerce, parse_config
from tlpbench.graphdata import load_bundle, read_fsnb
from tlpbench.nn import load_checkpoint

SMALL = [
    "--nodes-per-class", "30", "--feature-dim", "8", "--max-epochs", "10", "--val-interval", "5",
    "--tasks", "5", "--repeats", "1", "--patience", "1", "--lr", "0.01",
]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


# configuration


def test_defaults_without_file_or_flags():
    cfg = parse_config()
    expected = {"lr": 0.001, "dropout": 0.5, "weight_decay": 1e-4, "hidden": 16, "val_interval": 10,
                "tasks": 100, "patience": 10, "max_epochs": 10000, "repeats": 5, "m_query": 10}
    assert {k: cfg[k] for k in expected} == expected
    assert set(cfg) == set(SCHEMA)


def test_empty_file_gives_defaults(tmp_path):
    path = tmp_path / "empty.ini"
    path.write_text("")
    assert dict(parse_config(path)) == dict(parse_config())


def test_flags_override_file(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[train]\nlr = 0.05\ndropout = 0.2\n[protocol]\npatience = 3\n")
    cfg = parse_config(path, {"lr": "0.5", "patience": None})
    assert cfg["lr"] == 0.5 and cfg["dropout"] == 0.2 and cfg["patience"] == 3


@pytest.mark.parametrize("text,match", [
    ("[train]\nlr = banana\n", "lr: expected float"),
    ("[train]\nlearning_rate = 0.1\n", "unknown config key 'learning_rate'"),
    ("[model]\nlr = 0.1\n", r"unknown section \[model\]"),
    ("[protocol]\nlr = 0.1\n", r"belongs in section \[train\]"),
    ("[protocol]\npatience = 0\n", "patience: 0 out of range"),
    ("[train]\ndropout = 1.0\n", "dropout"),
    ("[train]\nmethod = gat\n", "method: 'gat' is not one of"),
    ("[protocol]\npooled_ci = maybe\n", "pooled_ci: expected bool"),
    ("lr = 0.1\n", "section"),
])
def test_bad_config_files(tmp_path, text, match):
    path = tmp_path / "bad.ini"
    path.write_text(text)
    with pytest.raises(ConfigError, match=match):
        parse_config(path)


def test_unreadable_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read config file"):
        parse_config(tmp_path / "missing.ini")


def test_inconsistent_sbm_split():
    with pytest.raises(ConfigError, match="sbm_classes"):
        parse_config(None, {"sbm_classes": "7"})


def test_coerce_types():
    assert coerce("seed", "18446744073709551615") == 2**64 - 1
    assert coerce("standardize", "off") is False
    assert coerce("lr", 1) == 1.0
    with pytest.raises(ConfigError):
        coerce("seed", "-1")
    with pytest.raises(ConfigError):
        coerce("hidden", True)


def test_resolved_config_is_logged(caplog):
    with caplog.at_level(logging.INFO, logger="tlpbench.config"):
        parse_config(None, {"lr": "0.02"})
    assert "lr = 0.02" in caplog.text and "[protocol]" in caplog.text


def test_config_round_trips_through_ini(tmp_path):
    cfg = parse_config(None, {"lr": "0.02", "pooled_ci": "true", "method": "meta-maml"})
    path = tmp_path / "resolved.ini"
    path.write_text(cfg.to_ini())
    assert dict(parse_config(path)) == dict(cfg)


# exit codes


def test_unknown_command(capsys):
    code, _, err = run(capsys, "train")
    assert code == 1 and "usage:" in err


def test_no_command(capsys):
    code, _, err = run(capsys)
    assert code == 1 and "usage:" in err


def test_help_exits_zero(capsys):
    code, out, _ = run(capsys, "--help")
    assert code == 0 and "sweep-lambda" in out


def test_bad_flag_value_is_a_validation_error(capsys):
    code, _, err = run(capsys, "evaluate", "--lr", "banana")
    assert code == 1 and "lr" in err


def test_unknown_flag(capsys):
    code, _, err = run(capsys, "evaluate", "--learning-rate", "0.1")
    assert code == 1 and "unrecognized" in err


def test_missing_out_dir(capsys):
    code, _, err = run(capsys, "generate")
    assert code == 1 and "--out" in err


def test_missing_dataset(capsys, tmp_path):
    code, _, err = run(capsys, "evaluate", "--dataset", "cora", "--data-root", str(tmp_path))
    assert code == 1 and "cora" in err


def test_pool_too_small_for_episode(capsys):
    code, _, err = run(capsys, "evaluate", *SMALL, "--n", "3")
    assert code == 1 and "3-way episode" in err


def test_runtime_failure_exits_two(capsys, monkeypatch):
    import tlpbench.cli as cli

    def boom(*a, **k):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(cli, "run_protocol", boom)
    code, _, err = run(capsys, "evaluate", *SMALL)
    assert code == 2 and "disk on fire" in err


# commands


def test_gradcheck(capsys):
    code, out, _ = run(capsys, "gradcheck", "--draws", "3")
    report = json.loads(out)
    assert code == 0 and all(r["ok"] for r in report.values())
    assert {"CE+GCN", "InfoNCE", "JSD", "SupCon", "Bootstrap", "ProtoNet", "Probe"} <= set(report)


def test_evaluate_is_byte_identical(capsys, tmp_path):
    outs = []
    for i in range(2):
        code, out, _ = run(capsys, "evaluate", *SMALL, "--seed", "7", "--out", str(tmp_path / str(i)))
        assert code == 0
        outs.append(out)
    assert outs[0] == outs[1]
    assert (tmp_path / "0" / "result.json").read_bytes() == (tmp_path / "1" / "result.json").read_bytes()
    result = json.loads(outs[0])
    assert set(result) == {"method", "dataset", "N", "K", "M", "seeds", "per_repeat_acc", "mean_acc", "ci95",
                           "nmi", "ari", "epochs"}
    assert (result["N"], result["K"], result["M"]) == (2, 5, 10)
    rows = list(csv.DictReader((tmp_path / "0" / "summary.csv").open()))
    assert len(rows) == 1 and rows[0]["method"] == "tlp-infonce" and float(rows[0]["mean_acc"]) == result["mean_acc"]


def test_evaluate_from_config_file(capsys, tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[protocol]\ntasks = 5\nrepeats = 1\npatience = 1\nmax_epochs = 10\nval_interval = 5\n"
                    "[train]\nmethod = meta-protonet\n[sbm]\nnodes_per_class = 30\nfeature_dim = 8\n")
    code, out, _ = run(capsys, "evaluate", "--config", str(path))
    assert code == 0 and json.loads(out)["method"] == "meta-protonet"


def test_cluster_eval(capsys, tmp_path):
    code, out, _ = run(capsys, "cluster-eval", *SMALL, "--out", str(tmp_path))
    result = json.loads(out)
    assert code == 0 and 0.0 <= result["nmi"] <= 1.0 and -1.0 <= result["ari"] <= 1.0
    assert (tmp_path / "clusters.json").exists()


def test_generate_pretrain_export_round_trip(capsys, tmp_path):
    data = tmp_path / "graph"
    code, out, _ = run(capsys, "generate", *SMALL, "--out", str(data))
    assert code == 0
    g = load_bundle(data)
    assert g.num_nodes == 180 and g.feature_dim == 8 and g.split is not None

    ckpt = tmp_path / "ckpt"
    code, out, _ = run(capsys, "pretrain", *SMALL, "--dataset", str(data), "--out", str(ckpt))
    assert code == 0
    meta = json.loads((ckpt / "encoder.json").read_text())
    params = load_checkpoint(ckpt / "encoder.fsnp", meta["layers"])
    assert params["W1"].shape == (8, 16)

    emb = tmp_path / "emb"
    code, _, _ = run(capsys, "export-embeddings", *SMALL, "--dataset", str(data),
                     "--checkpoint", str(ckpt / "encoder.fsnp"), "--out", str(emb))
    assert code == 0
    z = read_fsnb(emb / "embeddings.bin")
    assert z.shape == (180, 16)
    lines = (emb / "embeddings.csv").read_text().splitlines()
    assert lines[0] == "node," + ",".join(f"z{j}" for j in range(16))
    from_csv = np.loadtxt(emb / "embeddings.csv", delimiter=",", skiprows=1)
    np.testing.assert_array_equal(from_csv[:, 0], np.arange(180))
    np.testing.assert_array_equal(from_csv[:, 1:].astype(np.float32), z.astype(np.float32))

    # export with training gives the same embeddings as pretrain followed by export
    emb2 = tmp_path / "emb2"
    code, _, _ = run(capsys, "export-embeddings", *SMALL, "--dataset", str(data), "--out", str(emb2))
    assert code == 0
    assert (emb2 / "embeddings.bin").read_bytes() == (emb / "embeddings.bin").read_bytes()


def test_outputs_are_written_atomically(capsys, tmp_path):
    code, _, _ = run(capsys, "generate", *SMALL, "--out", str(tmp_path))
    assert code == 0
    names = sorted(os.listdir(tmp_path))
    assert not [n for n in names if n.startswith(".") or n.endswith(".tmp")]
    umask = os.umask(0)
    os.umask(umask)
    for n in names:
        assert stat.S_IMODE((tmp_path / n).stat().st_mode) == 0o666 & ~umask


def test_sweep_lambda_emits_curve(capsys, tmp_path):
    small = [a for a in SMALL]
    small[small.index("--tasks") + 1] = "3"
    small[small.index("--max-epochs") + 1] = "5"
    code, out, _ = run(capsys, "sweep-lambda", *small, "--out", str(tmp_path))
    assert code == 0
    results = json.loads(out)
    assert len(results) == len(LAMBDA_GRID) == 11
    rows = list(csv.DictReader((tmp_path / "lambda_curve.csv").open()))
    assert [r["lambda"] for r in rows] == [f"{x:.1f}" for x in LAMBDA_GRID]
    assert [float(r["mean_acc"]) for r in rows] == [r["mean_acc"] for r in results]
    assert len(list(csv.DictReader((tmp_path / "summary.csv").open()))) == 11
