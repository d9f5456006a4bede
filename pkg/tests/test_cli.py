import json
import os

import pytest
import yaml

from signfed import cli, dp, theory

BASE = {
    "schema_version": 1,
    "seed": 3,
    "data": {"source": "synthetic", "num_classes": 4, "dim": 6, "per_class": 100},
    "partition": {"per_client": 20},
    "protocol": {"name": "signfed", "N": 10, "C": 0.3, "rounds": 6, "gamma": 0.01},
    "adversary": {"kind": "random-update", "fraction": 0.2},
}


def write_cfg(tmp_path, **overrides):
    raw = json.loads(json.dumps(BASE))
    for section, vals in overrides.items():
        raw[section].update(vals)
    p = tmp_path / "cfg.yaml"
    p.write_text(yaml.safe_dump(raw))
    return str(p)


def test_run_writes_outputs(tmp_path):
    out = tmp_path / "out"
    assert cli.main(["run", write_cfg(tmp_path), "--out", str(out)]) == 0
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == ("round,accuracy,acc_class_0,acc_class_1,acc_class_2,acc_class_3,"
                        "attack_accuracy,cum_bits_per_client,test_loss,diverged")
    assert len(lines) == 7
    summary = json.loads((out / "summary.json").read_text())["summary"]
    assert summary["rounds"] == 6 and summary["diverged"] is False
    assert summary["bandwidth_bits"] == pytest.approx(0.3 * summary["best_round"] * summary["num_params"])
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 3 and manifest["config"]["protocol"]["N"] == 10


def test_floats_use_17_significant_digits():
    assert cli.fmt(0.1) == "0.10000000000000001"
    assert cli.fmt(float("nan")) == "nan"
    assert float(cli.fmt(1 / 3)) == 1 / 3


@pytest.mark.parametrize("proto", ["stdfed", "signfed", "dp-signfed", "dp-stdfed"])
def test_metrics_byte_identical_across_workers(tmp_path, proto):
    path = write_cfg(tmp_path, protocol={"name": proto})
    blobs = []
    for i, workers in enumerate((1, 1, 4)):
        out = tmp_path / f"o{i}"
        assert cli.main(["run", path, "--out", str(out), "--workers", str(workers)]) == 0
        blobs.append((out / "metrics.csv").read_bytes())
    assert blobs[0] == blobs[1] == blobs[2]


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env-out"))
    assert cli.main(["run", write_cfg(tmp_path)]) == 0
    assert os.path.exists(tmp_path / "env-out" / "metrics.csv")


def test_zero_rounds(tmp_path):
    out = tmp_path / "z"
    assert cli.main(["run", write_cfg(tmp_path, protocol={"rounds": 0}), "--out", str(out)]) == 0
    assert (out / "metrics.csv").read_text().count("\n") == 1
    assert json.loads((out / "summary.json").read_text())["summary"] is None


def test_divergence_exits_zero(tmp_path, capsys):
    path = write_cfg(tmp_path, protocol={"name": "stdfed", "rounds": 30},
                     adversary={"fraction": 0.3, "sigma_adv": 1e6})
    assert cli.main(["run", path, "--out", str(tmp_path / "d")]) == 0
    summary = json.loads((tmp_path / "d" / "summary.json").read_text())["summary"]
    assert summary["diverged"] is True
    assert "DIVERGED" in capsys.readouterr().out


def test_missing_dataset_path(tmp_path, capsys):
    path = write_cfg(tmp_path, data={"source": "mnist"})
    assert cli.main(["run", path, "--out", str(tmp_path / "m")]) == 2
    assert "data.path" in capsys.readouterr().err
    path = write_cfg(tmp_path, data={"source": "mnist", "path": str(tmp_path / "nowhere")})
    assert cli.main(["run", path, "--out", str(tmp_path / "m")]) == 2
    assert "data.path" in capsys.readouterr().err


def test_invalid_config_exit(tmp_path, capsys):
    path = write_cfg(tmp_path, protocol={"C": 2.0})
    assert cli.main(["run", path]) == 2
    assert "protocol.C" in capsys.readouterr().err


def _last_row(text):
    return text.strip().splitlines()[-1].split()


def test_accountant_epsilon_and_mechanisms(capsys):
    args = ["accountant", "epsilon", "--sigma", "0.9", "--C", "0.05", "--rounds", "50"]
    assert cli.main(args) == 0
    eps_cont = float(_last_row(capsys.readouterr().out)[1])
    assert eps_cont == pytest.approx(dp.epsilon_for_sigma(0.9, 1e-5, 0.05, 50), rel=1e-7)
    assert cli.main(args + ["--mechanism", "discrete", "--n", "1"]) == 0
    eps_disc = float(_last_row(capsys.readouterr().out)[1])
    assert eps_disc >= eps_cont


def test_accountant_round_trip(capsys):
    assert cli.main(["accountant", "sigma", "--epsilon", "2", "--C", "0.05", "--rounds", "50"]) == 0
    sigma, eps = map(float, _last_row(capsys.readouterr().out)[:2])
    assert eps <= 2
    assert cli.main(["accountant", "epsilon", "--sigma", repr(sigma), "--C", "0.05", "--rounds", "50"]) == 0
    eps2 = float(_last_row(capsys.readouterr().out)[1])
    assert eps2 == pytest.approx(eps, rel=1e-3)
    assert abs(eps2 - 2) / 2 < 1e-2


def test_accountant_failures(capsys):
    assert cli.main(["accountant", "sigma", "--epsilon", "1e-9", "--C", "1", "--rounds", "100"]) == 3
    assert cli.main(["accountant", "sigma", "--C", "1", "--rounds", "100"]) == 2
    assert "--epsilon" in capsys.readouterr().err


def test_bounds_sweep(capsys):
    args = ["bounds", "--tau", "1", "--L", "1", "--gap", "1", "--rounds", "100", "--C", "0.1",
            "--N", "1000", "--alpha", "0", "0.2", "0.4", "0.6"]
    assert cli.main(args) == 0
    rows = [line.split() for line in capsys.readouterr().out.strip().splitlines()[1:]]
    rand = [float(r[1]) for r in rows]
    assert all(a < b for a, b in zip(rand, rand[1:]))
    assert rand[1] == pytest.approx(0.23535533905932738, rel=1e-12)
    p0 = theory.BoundParams(1, 1, 1, 100, 0.1, 1000)
    assert rand[0] == pytest.approx(theory.bound_random_attack(p0), rel=1e-15)
    assert float(rows[0][2]) == pytest.approx(theory.bound_dp(p0), rel=1e-15)
