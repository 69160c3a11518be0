import pytest

from lowprec.cli import main
from lowprec.scaling import read_exponent_file

TINY = """
[experiment]
name = {name}
output_dir = {out}
seed = 0

[data]
synthetic_train = 200
synthetic_test = 80
synthetic_seed = 3
n_train = 0
n_test = 0

[model]
hidden_units = 8
pieces = 2

[optimizer]
epochs = 1
batch_size = 50
lr_start = 0.05
lr_end = 0.05
lr_decay_epochs = 1

[precision]
prop = {prop}
update = {update}
{extra}
"""


def write_cfg(tmp_path, name="run", prop="exact", update="exact", extra=""):
    path = tmp_path / f"{name}.ini"
    path.write_text(TINY.format(name=name, out=tmp_path / name, prop=prop,
                                update=update, extra=extra))
    return path


def test_cost_prints_table_row(capsys):
    assert main(["cost", "--mult", "16", "--acc", "32"]) == 0
    out = capsys.readouterr().out
    assert "alms=138.0" in out and "(table)" in out


def test_cost_prints_model_estimate(capsys):
    assert main(["cost", "--mult", "10", "--acc", "24"]) == 0
    assert "(model)" in capsys.readouterr().out


def test_cost_rejects_inverted_widths(capsys):
    assert main(["cost", "--mult", "32", "--acc", "16"]) == 1
    assert "error:" in capsys.readouterr().err


def test_bad_usage_exits_one(capsys):
    assert main([]) == 1
    assert main(["launch"]) == 1
    assert main(["cost", "--mult", "16"]) == 1
    assert main(["--help"]) == 0


def test_missing_config_exits_one(tmp_path, capsys):
    assert main(["train", str(tmp_path / "absent.ini")]) == 1
    assert "config file not found" in capsys.readouterr().err


def test_train_end_to_end(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    assert main(["train", str(cfg)]) == 0
    out = capsys.readouterr().out
    assert "format,prop_bits,update_bits,test_error" in out
    assert "exact,64,64," in out
    assert (tmp_path / "run" / "summary.csv").exists()


def test_sweep_end_to_end(tmp_path, capsys):
    cfg = write_cfg(tmp_path, name="sw", prop="fixed:16@4", update="fixed:20@4")
    assert main(["sweep", str(cfg), "--var", "radix_exponent",
                 "--values", "4,5"]) == 0
    out = capsys.readouterr().out
    assert out.count("radix_exponent,") == 2
    assert (tmp_path / "sw" / "sweep.csv").exists()


def test_sweep_bad_values_list(tmp_path, capsys):
    cfg = write_cfg(tmp_path, name="swb", prop="fixed:16@4", update="fixed:20@4")
    assert main(["sweep", str(cfg), "--var", "radix_exponent",
                 "--values", "4,five"]) == 1
    assert "bad --values" in capsys.readouterr().err


def test_calibrate_writes_exponent_table(tmp_path, capsys):
    cfg = write_cfg(tmp_path, name="cal", prop="fixed:10@5", update="fixed:12@5",
                    extra="dynamic = true")
    out_file = tmp_path / "scales.tsv"
    assert main(["calibrate", str(cfg), "--out", str(out_file)]) == 0
    table = read_exponent_file(out_file)
    assert table["L0.output"] == 2
    printed = capsys.readouterr().out
    assert "L0.output\t2" in printed


def test_calibrate_requires_dynamic_config(tmp_path, capsys):
    cfg = write_cfg(tmp_path, name="nd")
    assert main(["calibrate", str(cfg)]) == 1
    assert "dynamic" in capsys.readouterr().err
