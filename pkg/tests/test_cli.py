import csv

import pytest

from mambafusion.cli import main
from mambafusion.flops import CSV_HEADER


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_scan_equiv(capsys):
    code, out, err = run(capsys, "scan-equiv", "--seed", "0")
    assert code == 0 and "max abs diff" in out and not err
    diff = float(out.split("max abs diff = ")[1].split()[0])
    assert diff < 1e-10


def test_gradcheck(capsys):
    code, out, _ = run(capsys, "gradcheck", "--tol", "1e-5")
    assert code == 0 and "all passed" in out


def test_gradcheck_failure_exit(capsys):
    code, out, _ = run(capsys, "gradcheck", "--tol", "1e-12")
    assert code == 1 and "FAILED" in out


def test_flops_sweep(tmp_path, capsys):
    out = tmp_path / "sweep.csv"
    code, _, _ = run(capsys, "flops-sweep", "--out", str(out), "--resolutions", "320", "640", "--text-lens", "4", "80")
    with open(out) as fh:
        rows = list(csv.reader(fh))
    assert code == 0 and rows[0] == CSV_HEADER and len(rows) == 9


def test_flops_sweep_empty_resolutions_is_usage_error(tmp_path, capsys):
    code, _, err = run(capsys, "flops-sweep", "--out", str(tmp_path / "x.csv"), "--resolutions")
    assert code == 2 and err.startswith("error kind=usage") and err.count("\n") == 1
    assert not (tmp_path / "x.csv").exists()


@pytest.mark.parametrize("argv", [[], ["bogus"], ["train-toy", "--steps", "3"], ["ablate"]])
def test_usage_errors(capsys, argv):
    code, out, err = run(capsys, *argv)
    assert code == 2 and "usage:" in out and err.count("\n") == 1 and "kind=usage" in err


def test_io_errors(tmp_path, capsys):
    code, _, err = run(capsys, "flops-sweep", "--out", str(tmp_path / "missing" / "x.csv"))
    assert code == 3 and "kind=io" in err
    code, _, err = run(capsys, "train-toy", "--config", str(tmp_path / "nope.cfg"))
    assert code == 3 and "kind=io" in err


def test_bad_config_is_usage_error(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("steps = 2\nwarmup = 5\n")
    code, _, err = run(capsys, "train-toy", "--config", str(cfg))
    assert code == 2 and "warmup" in err


def test_train_toy_with_config_and_checkpoint(tmp_path, capsys):
    cfg = tmp_path / "toy.cfg"
    cfg.write_text("# quick run\nsteps = 4\nn_train = 16\nn_val = 8\nlog_every = 2\n")
    metrics, ckpt = tmp_path / "m.csv", tmp_path / "w.ckpt"
    code, out, _ = run(capsys, "train-toy", "--config", str(cfg), "--seed", "3", "--out", str(metrics), "--checkpoint", str(ckpt))
    assert code == 0 and "final val_acc" in out
    assert metrics.read_text().splitlines()[0] == "step,loss,val_acc"
    assert ckpt.read_bytes()[:4] == b"MFCK"


def test_ablate_writes_twelve_rows(tmp_path, capsys):
    cfg = tmp_path / "abl.cfg"
    cfg.write_text("steps = 2\nn_train = 16\nn_val = 8\nlog_every = 1\n")
    out = tmp_path / "abl.csv"
    code, _, _ = run(capsys, "ablate", "--config", str(cfg), "--out", str(out), "--seed", "5")
    rows = out.read_text().splitlines()
    assert code == 0 and rows[0] == "t2i,i2t,seed,val_acc,toy_ap" and len(rows) == 13
    assert {r.split(",")[2] for r in rows[1:]} == {"5", "6", "7"}
