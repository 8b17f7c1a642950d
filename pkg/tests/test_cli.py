import csv
import io
import subprocess
import sys

import numpy as np
import pytest

from xcit.cli import main
from xcit.embed import write_raw_image
from xcit.export import read_pgm


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def csv_rows(text):
    return list(csv.reader(io.StringIO("\n".join(l for l in text.splitlines() if not l.startswith("#")))))


# ---------------------------------------------------------------- bench


@pytest.mark.parametrize("op", ["xca", "token_attn"])
def test_bench_three_rows_and_slope(capsys, op):
    code, out, _ = run(capsys, "bench", "--op", op, "--d", "64", "--heads", "8",
                       "--n-list", "196,784,3136")
    assert code == 0
    rows = csv_rows(out)
    assert rows[0] == ["op", "N", "d", "h", "wall_ns", "peak_bytes", "macs"]
    assert [r[1] for r in rows[1:]] == ["196", "784", "3136"]
    assert "# log-log slopes:" in out
    assert "multiply-accumulate" in out


def test_bench_writes_out_file(capsys, tmp_path):
    code, out, _ = run(capsys, "bench", "--op", "xca", "--d", "32", "--heads", "4",
                       "--n-list", "64,128,256,1024", "--out", str(tmp_path / "b.csv"))
    assert code == 0
    assert len((tmp_path / "b.csv").read_text().splitlines()) == 5
    assert "macs=1.000" in out and "note" not in out


@pytest.mark.parametrize("bad", ["", "5", "5,3", "4,4", "a,b", "0,8", "-1,8"])
def test_bench_bad_n_list(capsys, bad):
    code, _, err = run(capsys, "bench", "--op", "xca", "--n-list", bad)
    assert code == 2 and "n-list" in err


def test_bench_bad_heads(capsys):
    assert run(capsys, "bench", "--op", "xca", "--d", "30", "--heads", "8", "--n-list", "4,8")[0] == 2


# ---------------------------------------------------------------- count


def test_count_s12(capsys):
    code, out, _ = run(capsys, "count", "--preset", "S12", "--res", "224", "--patch", "16")
    assert code == 0
    params = int(out.split("params=")[1].split()[0])
    macs = int(out.split("macs=")[1].split()[0])
    assert abs(params / 26e6 - 1) < 0.10 and abs(macs / 4.8e9 - 1) < 0.15


def test_count_l24(capsys):
    code, out, _ = run(capsys, "count", "--preset", "L24")
    assert code == 0
    assert abs(int(out.split("params=")[1].split()[0]) / 189e6 - 1) < 0.10
    assert abs(int(out.split("macs=")[1].split()[0]) / 36.1e9 - 1) < 0.15


def test_count_bogus(capsys):
    code, _, err = run(capsys, "count", "--preset", "bogus")
    assert code == 2
    assert "N12" in err and "L24" in err


def test_usage_errors_exit_2(capsys):
    assert run(capsys)[0] == 2
    assert run(capsys, "nope")[0] == 2
    assert run(capsys, "count")[0] == 2


# ---------------------------------------------------------------- gradcheck


def test_gradcheck_op(capsys):
    code, out, _ = run(capsys, "gradcheck", "--config", "op")
    assert code == 0
    assert out.count("PASS") == 11


def test_gradcheck_small_sampled(capsys):
    code, out, _ = run(capsys, "gradcheck", "--config", "small", "--max-coords", "4")
    assert code == 0 and out.startswith("PASS model")


# ---------------------------------------------------------------- train-toy


def test_train_toy_seed7_loss_falls(capsys, tmp_path):
    code, out, _ = run(capsys, "train-toy", "--classes", "2", "--epochs", "6", "--seed", "7",
                       "--out", str(tmp_path / "t.csv"))
    assert code == 0
    rows = csv_rows((tmp_path / "t.csv").read_text())
    assert rows[0] == ["epoch", "loss", "holdout_acc"]
    losses = [float(r[1]) for r in rows[1:]]
    assert losses[1] > losses[-1]
    assert "epoch 6" in out


def test_train_toy_bad_classes(capsys):
    assert run(capsys, "train-toy", "--classes", "11")[0] == 2


# ---------------------------------------------------------------- dump-attn


def test_dump_pgm(capsys, tmp_path):
    code, out, _ = run(capsys, "dump-attn", "--preset", "N12", "--format", "pgm", "--out", str(tmp_path),
                       "--res", "64")
    assert code == 0
    files = sorted(tmp_path.glob("*.pgm"))
    assert len(files) == 4
    for f in files:
        pix = read_pgm(f.read_bytes())
        assert pix.shape == (4, 4)
        assert pix.min() == 0 and pix.max() == 255


def test_dump_csv_substochastic(capsys):
    code, out, _ = run(capsys, "dump-attn", "--depth", "1", "--d", "32", "--heads", "4", "--res", "64")
    assert code == 0
    rows = csv_rows(out)
    assert rows[0] == ["head", "row", "col", "value"]
    vals = np.array([[float(x) for x in r] for r in rows[1:]])
    assert len(vals) == 4 * 16
    for h in range(4):
        assert vals[vals[:, 0] == h, 3].sum() <= 1.0 + 1e-12


def test_dump_from_raw_image(capsys, tmp_path):
    img = np.random.default_rng(0).random((1, 3, 32, 48)).astype(np.float32)
    write_raw_image(tmp_path / "x.raw", img)
    code, out, _ = run(capsys, "dump-attn", "--depth", "1", "--d", "16", "--heads", "2",
                       "--image", str(tmp_path / "x.raw"))
    assert code == 0
    assert len(csv_rows(out)) == 1 + 2 * 2 * 3


def test_dump_malformed_image(capsys, tmp_path):
    (tmp_path / "bad.raw").write_bytes(b"JUNK" + bytes(30))
    code, _, err = run(capsys, "dump-attn", "--preset", "N12", "--image", str(tmp_path / "bad.raw"))
    assert code == 2 and "magic" in err


def test_dump_needs_model(capsys):
    assert run(capsys, "dump-attn")[0] == 2
    assert run(capsys, "dump-attn", "--preset", "N12", "--format", "pgm")[0] == 2


# ---------------------------------------------------------------- check and entry point


def test_check_quick(capsys):
    code, out, _ = run(capsys, "check", "--quick")
    assert code == 0
    assert "FAIL" not in out and "checks passed" in out


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "xcit.cli", "count", "--preset", "T12"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and "params=" in r.stdout
