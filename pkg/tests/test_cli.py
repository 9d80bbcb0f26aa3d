import csv

import numpy as np
import pytest

from adcluster.checkpoint import read_checkpoint
from adcluster.cli import cmd_eval, cmd_run, cmd_sweep_lambda, cmd_synth, main
from adcluster.trainer import HISTORY_COLUMNS

TINY = """\
# small enough for a unit test
n_identities_source = 10
n_identities_target = 10
samples_per_identity_per_camera = 4
n_cameras_source = 3
n_cameras_target = 3
raw_dim = 6
hidden_dim = 12
feat_dim = 6
source_epochs = 3
k1 = 6
k2 = 3
eps_quantile = 0.02
min_pts = 3
prefit_steps = 20
n_cluster_iterations = 2
epochs_per_iteration = 1
P = 4
queries_per_identity = 1
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_run_outputs(tiny, tmp_path):
    out = tmp_path / "run"
    assert cmd_run(tiny, out=out) == 0
    rows = read_rows(out / "history.csv")
    assert tuple(rows[0]) == HISTORY_COLUMNS
    assert len(rows) == 1 + 2
    metrics = read_rows(out / "final_metrics.csv")
    assert metrics[0][:3] == ["stage", "mode", "mAP"]
    assert [r[0] for r in metrics[1:]] == ["direct_transfer", "adapted"]
    assert sorted(p.name for p in (out / "checkpoints").iterdir()) == ["iter_000.adck", "iter_001.adck"]
    final = read_checkpoint(out / "final.adck")
    assert {"encoder.w1", "encoder.b2", "generator.u", "generator.v"} <= set(final)


def test_floats_round_trip_in_csv(tiny, tmp_path):
    out = tmp_path / "run"
    cmd_run(tiny, out=out)
    for row in read_rows(out / "history.csv")[1:]:
        for cell in row[3:]:
            assert repr(float(cell)) == cell or cell == "nan"


def test_run_is_deterministic_and_leaves_config(tiny, tmp_path):
    before = tiny.read_bytes()
    assert cmd_run(tiny, out=tmp_path / "a") == 0
    assert cmd_run(tiny, out=tmp_path / "b") == 0
    assert tiny.read_bytes() == before
    for name in ("history.csv", "final_metrics.csv", "final.adck", "checkpoints/iter_001.adck"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_mode_and_seed_overrides(tiny, tmp_path):
    assert cmd_run(tiny, "baseline", seed=3, out=tmp_path / "b") == 0
    rows = read_rows(tmp_path / "b" / "history.csv")
    assert all(r[HISTORY_COLUMNS.index("mean_L_div")] == "nan" for r in rows[1:])
    assert read_rows(tmp_path / "b" / "final_metrics.csv")[1][1] == "baseline"


def test_sweep_single_value_matches_plain_run(tiny, tmp_path):
    assert cmd_sweep_lambda(tiny, [0.03], out=tmp_path / "s") == 0
    assert cmd_run(tiny, "full", out=tmp_path / "r") == 0
    sweep = read_rows(tmp_path / "s" / "lambda_sweep.csv")
    plain = read_rows(tmp_path / "r" / "final_metrics.csv")[2]
    assert sweep[0] == ["lambda", "mAP", "rank1"]
    assert sweep[1] == ["0.03", plain[2], plain[3]]


def test_sweep_keeps_input_order(tiny, tmp_path):
    values = [1.0, 0.01, 0.1]
    assert cmd_sweep_lambda(tiny, values, out=tmp_path / "s") == 0
    rows = read_rows(tmp_path / "s" / "lambda_sweep.csv")[1:]
    assert [float(r[0]) for r in rows] == values
    assert all(0 <= float(r[1]) <= 1 for r in rows)


def test_sweep_rejects_nonpositive(tiny, tmp_path):
    assert cmd_sweep_lambda(tiny, [0.03, 0.0], out=tmp_path / "s") == 1


def test_eval_reproduces_final_metrics(tiny, tmp_path):
    out = tmp_path / "run"
    cmd_run(tiny, out=out)
    assert cmd_eval(tiny, out=out) == 0
    final = read_rows(out / "final_metrics.csv")[2]
    again = read_rows(out / "eval_metrics.csv")[1]
    assert again[2:] == final[2:]


def test_eval_bad_checkpoint(tiny, tmp_path):
    bad = tmp_path / "bad.adck"
    bad.write_bytes(b"XXXX" + bytes(8))
    assert cmd_eval(tiny, bad, out=tmp_path) == 2
    assert cmd_eval(tiny, tmp_path / "missing.adck", out=tmp_path) == 2


def test_synth_writes_dataset(tiny, tmp_path):
    assert cmd_synth(tiny, out=tmp_path / "d") == 0
    arrays = read_checkpoint(tmp_path / "d" / "dataset.adck")
    assert arrays["target.raw"].shape == (10 * 3 * 4, 6)
    assert set(np.unique(arrays["target.cameras"])) == {0.0, 1.0, 2.0}
    assert len(arrays["target.query"]) + len(arrays["target.gallery"]) == 120


def test_exit_codes(tmp_path, tiny, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("lambda = -1\n")
    assert main(["run", "--config", str(bad)]) == 1
    assert "lambda" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "nope.cfg")]) == 1
    assert main(["run"]) == 1
    assert main(["run", "--config", str(tiny), "--mode", "both"]) == 1
    # a config that cannot cluster: k1 larger than the target set
    broken = tmp_path / "broken.cfg"
    broken.write_text(TINY.replace("k1 = 6", "k1 = 500"))
    assert main(["run", "--config", str(broken), "--out", str(tmp_path / "x")]) == 2


def test_main_run(tiny, tmp_path):
    assert main(["run", "--config", str(tiny), "--out", str(tmp_path / "m"), "--seed", "1"]) == 0
    assert (tmp_path / "m" / "final.adck").exists()
