import csv
import io as _io
import json

import numpy as np
import pytest

from iss import cli
from iss.dataset import LabeledDataset, load_cifar_binary, read_itf1, write_cifar_binary


def fake_cifar(n, seed):
    rng = np.random.default_rng(seed)
    return LabeledDataset(rng.integers(0, 256, (n, 32, 32, 3), dtype=np.uint8), np.arange(n) % 10, np.zeros(n, bool))


@pytest.fixture()
def cifar_dir(tmp_path):
    d = tmp_path / "cifar"
    d.mkdir()
    for i in range(1, 6):
        write_cifar_binary(d / f"data_batch_{i}.bin", fake_cifar(20, i))
    write_cifar_binary(d / "test_batch.bin", fake_cifar(20, 99))
    return d


@pytest.fixture()
def small_bin(tmp_path):
    p = tmp_path / "small.bin"
    write_cifar_binary(p, fake_cifar(20, 0))
    return p


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_poison_writes_itf1_and_sidecar(tmp_path, small_bin, capsys):
    out = tmp_path / "lsp.itf1"
    code, stdout, err = run(capsys, "poison", "--method", "lsp", "--in", small_bin, "--out", out,
                            "--poisoned-out", tmp_path / "p.bin", "--seed", "3")
    assert code == 0, err
    deltas = read_itf1(out)
    assert deltas.shape == (20, 32, 32, 3) and deltas.dtype == np.float32
    side = json.loads((tmp_path / "lsp.itf1.json").read_text())
    assert side["method"] == "lsp" and side["norm"] == "l2" and side["seed"] == 3 and side["count"] == 20
    assert json.loads(stdout)["budget_ok"] is True
    assert "resolved_config" in err
    assert len(load_cifar_binary(tmp_path / "p.bin")) == 20


def test_compress_bdr8_is_identity(tmp_path, small_bin, capsys):
    out = tmp_path / "c.bin"
    code, _, _ = run(capsys, "compress", "--op", "bdr:8", "--in", small_bin, "--out", out)
    assert code == 0
    assert out.read_bytes() == small_bin.read_bytes()


def test_compress_itf1_gray(tmp_path, small_bin, capsys):
    from iss.dataset import write_itf1

    src = tmp_path / "x.itf1"
    write_itf1(src, load_cifar_binary(small_bin).images)
    code, _, _ = run(capsys, "compress", "--op", "gray", "--in", src, "--out", tmp_path / "g.itf1")
    assert code == 0
    g = read_itf1(tmp_path / "g.itf1")
    assert (g[..., 0] == g[..., 1]).all() and (g[..., 1] == g[..., 2]).all()


def test_train_then_eval(tmp_path, small_bin, capsys):
    model = tmp_path / "m.itm1"
    code, out, _ = run(capsys, "train", "--arch", "linear", "--epochs", "2", "--batch-size", "8",
                       "--op", "jpeg:10", "--in", small_bin, "--out", model)
    assert code == 0 and json.loads(out)["epoch"] == 2
    code, out, _ = run(capsys, "eval", "--model", model, "--in", small_bin)
    assert code == 0 and 0.0 <= json.loads(out)["accuracy"] <= 1.0


def test_analyze_csv(tmp_path, small_bin, capsys):
    pert = tmp_path / "a.itf1"
    assert run(capsys, "poison", "--method", "ar", "--in", small_bin, "--out", pert)[0] == 0
    code, out, _ = run(capsys, "analyze", "--method", "ar", "--in", pert, "--png-dir", tmp_path / "png",
                       "--png-count", "2")
    assert code == 0
    rows = list(csv.reader(_io.StringIO(out)))
    assert rows[0] == ["method", "seed", "ratio", "spread"] and len(rows) == 21
    assert sorted(p.name for p in (tmp_path / "png").iterdir()) == ["ar_0000.png", "ar_0001.png"]


def test_unknown_flag_exit_1(capsys):
    assert run(capsys, "poison", "--bogus")[0] == cli.EXIT_USAGE
    assert run(capsys)[0] == cli.EXIT_USAGE


def test_bad_parameter_exit_1(tmp_path, small_bin, capsys):
    code, _, _ = run(capsys, "compress", "--op", "jpeg:0", "--in", small_bin, "--out", tmp_path / "x")
    assert code == cli.EXIT_USAGE


def test_data_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"\x00" * 100)
    assert run(capsys, "poison", "--method", "lsp", "--in", bad, "--out", tmp_path / "o")[0] == cli.EXIT_DATA
    missing = tmp_path / "nope.bin"
    assert run(capsys, "eval", "--model", missing, "--in", missing)[0] == cli.EXIT_DATA


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_failure_exit_3(tmp_path, small_bin, capsys):
    code, _, err = run(capsys, "train", "--arch", "linear", "--epochs", "3", "--lr", "1e300",
                       "--momentum", "0", "--in", small_bin, "--out", tmp_path / "m")
    assert code == cli.EXIT_NUMERIC, err


def test_config_file_defaults_and_flag_override(tmp_path, small_bin, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"method": "lsp", "patch_size": 16, "seed": 5}))
    out = tmp_path / "p.itf1"
    code, _, err = run(capsys, "poison", "--config", cfg, "--seed", "7", "--in", small_bin, "--out", out)
    assert code == 0, err
    side = json.loads((tmp_path / "p.itf1.json").read_text())
    assert side["meta"]["patch_size"] == 16 and side["seed"] == 7
    resolved = json.loads(next(line for line in err.splitlines() if "resolved_config" in line))
    assert resolved["resolved_config"]["patch_size"] == 16


def test_config_unknown_key_exit_1(tmp_path, small_bin, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"colour": "red"}))
    code, _, err = run(capsys, "compress", "--config", cfg, "--op", "gray", "--in", small_bin, "--out", tmp_path / "o")
    assert code == cli.EXIT_USAGE and "colour" in err


def test_matrix_csv_and_json(tmp_path, cifar_dir, capsys):
    cfg = tmp_path / "m.json"
    cfg.write_text(json.dumps({
        "poisons": ["none", "lsp"], "countermeasures": ["identity", "gray"], "seeds": [0, 1],
        "arch": "linear", "train_count": 50, "test_count": 10,
        "train_cfg": {"epochs": 1, "batch_size": 10},
    }))
    code, out, err = run(capsys, "matrix", "--config", cfg, "--data-dir", cifar_dir,
                         "--out-csv", tmp_path / "r.csv", "--out-json", tmp_path / "r.json")
    assert code == 0, err
    rows = list(csv.reader(_io.StringIO(out)))
    assert rows[0] == ["poison", "identity_mean", "identity_std", "gray_mean", "gray_std"]
    assert [r[0] for r in rows[1:]] == ["none", "lsp"]
    assert (tmp_path / "r.csv").read_text() == out
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["table"]["lsp"]["gray"]["n"] == 2


def test_matrix_needs_config(cifar_dir, capsys):
    assert run(capsys, "matrix", "--data-dir", cifar_dir)[0] == cli.EXIT_USAGE


def test_ingest_balanced_subset(tmp_path, cifar_dir, capsys):
    out = tmp_path / "i.bin"
    code, stdout, _ = run(capsys, "ingest", "--data-dir", cifar_dir, "--count", "30", "--out", out)
    assert code == 0
    assert json.loads(stdout)["class_counts"] == [3] * 10
    assert len(load_cifar_binary(out)) == 30
