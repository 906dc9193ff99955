import json

import pytest

from feederid.cli import main


def test_feeder_validate(capsys, tmp_path):
    assert main(["feeder", "validate", "feeder4"]) == 0
    assert "4 buses" in capsys.readouterr().out
    bad = tmp_path / "bad.json"
    bad.write_text('{"buses": []}')
    assert main(["feeder", "validate", str(bad)]) == 2
    assert main(["feeder", "validate", str(tmp_path / "missing.json")]) == 2


def test_usage_errors(capsys):
    assert_exit(["bogus"], 1)
    assert_exit(["simulate", "feeder4"], 1)  # --out is required
    assert_exit(["evaluate", "--replicates", "0", "--out", "x"], 1)


def assert_exit(argv, code):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == code


def test_simulate_then_estimate(tmp_path, capsys):
    m = tmp_path / "m.csv"
    assert main(["simulate", "feeder4", "--samples", "1500", "--seed", "4", "--out", str(m)]) == 0
    assert m.exists() and (tmp_path / "m.csv.meta.json").exists()
    assert main(["simulate", "feeder4", "--samples", "1500", "--out", str(m)]) == 2  # exists, no --force
    e = tmp_path / "e.csv"
    assert main(["estimate", "feeder4", str(m), "--out", str(e)]) == 0
    out = capsys.readouterr().out
    assert "stage 2: converged" in out
    assert e.read_text().startswith("from,to,n,p,G_true")


def test_estimate_numerical_failure(tmp_path, capsys):
    m = tmp_path / "m.csv"
    with pytest.warns(UserWarning, match="TVE bound"):
        main(["simulate", "feeder4", "--samples", "400", "--noise", "0.5", "--out", str(m)])
    assert main(["estimate", "feeder4", str(m), "--out", str(tmp_path / "e.csv")]) == 3
    assert "numerical failure" in capsys.readouterr().err


def test_evaluate(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"noise_levels": [0.0], "replicates": 1, "samples": 800,
                               "stage2": {"n_snapshots": 30}}))
    out = tmp_path / "run"
    assert main(["evaluate", str(cfg), "--out", str(out), "--seed", "9"]) == 0
    assert json.loads((out / "config.json").read_text())["master_seed"] == 9
    assert main(["evaluate", str(cfg), "--out", str(out)]) == 2
    assert main(["evaluate", str(cfg), "--out", str(out), "--force", "--noise", "0,1e-5"]) == 0
    assert "noise 1e-05" in capsys.readouterr().out
    assert main(["evaluate", str(cfg)]) == 1  # nowhere to write
