import os

import numpy as np
import pytest

from trimtrain import cli
from trimtrain.cli import (KEYS, ConfigError, export_plotdata, load_config, main,
                           parse_config_text, predicted_remaining)
from trimtrain.data import write_idx
from trimtrain.network import lenet5, slim_lenet
from trimtrain.tensor_core import Rng


@pytest.fixture(scope="module")
def tiny_mnist(tmp_path_factory):
    d = tmp_path_factory.mktemp("mnist")
    gen = np.random.default_rng(0)
    for prefix, n in (("train", 120), ("t10k", 40)):
        labels = np.arange(n) % 10
        images = gen.integers(0, 40, size=(n, 28, 28)).astype(np.uint8)
        for i, lab in enumerate(labels):
            images[i, 2 * lab:2 * lab + 6, 4:24] = 250
        write_idx(d / f"{prefix}-images-idx3-ubyte", images)
        write_idx(d / f"{prefix}-labels-idx1-ubyte", labels.astype(np.uint8))
    return str(d)


def test_help_lists_every_key(capsys):
    with pytest.raises(SystemExit) as e:
        main(["train", "--help"])
    assert e.value.code == 0
    out = " ".join(capsys.readouterr().out.split())
    for k in KEYS:
        flag = "--" + k.name.replace("_", "-")
        assert flag in out
        assert f"[default: {cli._show(k.default)}]" in out


@pytest.mark.parametrize("argv", [["train", "--no-such-flag", "1"], ["bogus"], [],
                                  ["train", "--r-set", "abc"], ["train", "--eif", "maybe"]])
def test_usage_errors_exit_1(argv, capsys):
    with pytest.raises(SystemExit) as e:
        main(argv)
    assert e.value.code == 1


def test_config_file_errors(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("r_set = 0.3\nnot_a_key = 1\n")
    assert main(["flops", "--config", str(bad)]) == 1
    dup = tmp_path / "dup.cfg"
    dup.write_text("r_set = 0.3\nr_set = 0.4\n")
    assert main(["flops", "--config", str(dup)]) == 1
    assert main(["flops", "--config", str(tmp_path / "missing.cfg")]) == 1
    assert "error" in capsys.readouterr().err


def test_config_parsing_and_precedence(tmp_path):
    cfg = parse_config_text("# comment\nr_set = 0.25  # trailing\n\nemp = off\n"
                            "lr_schedule = 10:0.5,20:0.1\n")
    assert cfg == {"r_set": 0.25, "emp": False, "lr_schedule": ((10, 0.5), (20, 0.1))}
    with pytest.raises(ConfigError):
        parse_config_text("r_set 0.3")
    p = tmp_path / "c.cfg"
    p.write_text("r_set = 0.25\nseed = 4\n")
    merged = load_config(str(p), {"r_set": 0.5, "seed": None})
    assert merged["r_set"] == 0.5 and merged["seed"] == 4 and merged["epochs"] == 5
    tc = cli.train_config(merged)
    assert tc.r_set == 0.5 and tc.alpha == 0.7
    assert parse_config_text(cli.format_config(merged)) == merged


def test_shipped_config_parses():
    here = os.path.dirname(__file__)
    cfg = load_config(os.path.join(here, "..", "configs", "lenet_mnist.cfg"), {})
    tc = cli.train_config(cfg)
    assert tc.batch_size == 64 and tc.r_set == 0.3 and tc.alpha == 0.7


def test_gradcheck_exit_0(capsys):
    assert main(["gradcheck"]) == 0
    assert "tensors within tolerance" in capsys.readouterr().out


def test_flops_identity(capsys):
    assert main(["flops", "--emp-alpha", "1", "--r-set", "1", "--eif", "off"]) == 0
    last = capsys.readouterr().out.strip().splitlines()[-1]
    assert "predicted_remaining_exclusive=1.000000" in last
    assert "predicted_remaining_inclusive=1.000000" in last


def test_flops_table_lenet(capsys):
    assert main(["flops"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    rows = {ln.split(",")[0]: ln.split(",") for ln in lines[1:-1]}
    assert rows["conv1"][2:4] == ["4", "6"]
    assert rows["conv2"][2:4] == ["11", "16"]
    assert rows["total"][4] == "416520"
    inc, exc = predicted_remaining(lenet5(Rng(0)), 0.7, 0.3, slim_lenet(Rng(0)))
    assert f"{exc:.6f}" in lines[-1] and f"{inc:.6f}" in lines[-1]


def test_flops_bad_r_set():
    assert main(["flops", "--r-set", "1.5"]) == 1


def write_metrics(path, rows, header=None):
    header = header or ",".join(cli_columns())
    with open(path, "w") as f:
        f.write("# metrics-schema: 1\n" + header + "\n")
        for r in rows:
            f.write(",".join(str(r.get(c, "")) for c in cli_columns()) + "\n")


def cli_columns():
    from trimtrain.trainer import METRICS_COLUMNS
    return METRICS_COLUMNS


def read_pairs(path):
    with open(path) as f:
        return [tuple(float(v) for v in ln.split()) for ln in f]


def test_export_empty_metrics(tmp_path):
    p = tmp_path / "m.csv"
    write_metrics(p, [])
    assert main(["export-plotdata", str(p)]) == 0
    for name in ("flops_vs_error.txt", "threshold.txt", "preserved.txt"):
        assert (tmp_path / name).read_text() == ""


def test_export_single_eval_row(tmp_path):
    p = tmp_path / "m.csv"
    write_metrics(p, [{"iteration": 0, "preserved_count": 10, "T_l": 2.3, "total": 100},
                      {"iteration": 1, "preserved_count": 12, "T_l": 2.5, "total": 180,
                       "test_acc": 0.75}])
    paths = export_plotdata(str(p), str(tmp_path / "out"))
    assert read_pairs(paths["flops_vs_error.txt"]) == [(180.0, 0.25)]
    assert read_pairs(paths["threshold.txt"]) == [(0.0, 2.3), (1.0, 2.5)]
    assert read_pairs(paths["preserved.txt"]) == [(0.0, 10.0), (1.0, 12.0)]


def test_export_missing_columns(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("iteration,total\n0,5\n")
    assert main(["export-plotdata", str(p)]) == 1
    assert main(["export-plotdata", str(tmp_path / "nope.csv")]) == 1


def test_train_eval_export_end_to_end(tiny_mnist, tmp_path, capsys):
    out = tmp_path / "run"
    argv = ["train", "--data-dir", tiny_mnist, "--train-subset", "0", "--epochs", "2",
            "--batch-size", "20", "--warmup-iters", "2", "--eval-every", "3",
            "--out-dir", str(out)]
    assert main(argv) == 0
    assert "test_acc=" in capsys.readouterr().out
    for name in ("config.cfg", "metrics.csv", "model.ckpt"):
        assert (out / name).exists()
    assert load_config(str(out / "config.cfg"), {})["batch_size"] == 20
    assert main(["eval", str(out / "model.ckpt"), "--data-dir", tiny_mnist]) == 0
    assert "instances=40" in capsys.readouterr().out
    assert main(["export-plotdata", str(out / "metrics.csv")]) == 0
    pts = read_pairs(out / "flops_vs_error.txt")
    assert len(pts) == 4  # iterations 2, 5, 8, 11 (the last is also the epoch end)
    flops = [a for a, _ in pts]
    assert flops == sorted(flops) and all(0 <= e <= 1 for _, e in pts)


def test_train_missing_data(tmp_path):
    assert main(["train", "--data-dir", str(tmp_path), "--out-dir", str(tmp_path / "o")]) == 1


def test_eval_bad_checkpoint(tiny_mnist, tmp_path):
    bad = tmp_path / "x.ckpt"
    bad.write_bytes(b"garbage!")
    assert main(["eval", str(bad), "--data-dir", tiny_mnist]) == 1
