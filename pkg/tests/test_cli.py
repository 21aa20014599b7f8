import csv
import json
import subprocess
import sys

import pytest

from normcrit.cli import run

CUBIC = """
[domain]
kind = "interval"
bounds = [0.0, 1.0]
n = 128
[nonlinearity]
terms = [{a = 1.0, p = 4.0}]
[gn]
starts = 2
"""


def write(tmp_path, text, name="run.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_solve_writes_artifacts(tmp_path, capsys):
    cfg = write(tmp_path, "mu = 0.05\n" + CUBIC)
    out = tmp_path / "out"
    assert run(["solve", "--config", cfg, "--out", str(out)]) == 0
    recs = json.loads((out / "records.json").read_text())
    assert recs[0]["case"] == "MassAttained" and len(recs[0]["u"]) == 127
    cert = json.loads((out / "certificate.json").read_text())
    assert cert["flags"]["verdicts"][0]["passed"]
    assert all("anchor" in v for v in cert["constants"].values())
    rows = list(csv.reader(open(out / "solution_0.csv")))
    assert rows[0] == ["node", "x", "value"] and len(rows) == 130
    assert float(rows[1][2]) == 0.0
    assert "plot 'solution_0.csv'" in (out / "plot_0.gp").read_text()
    trace = list(csv.DictReader(open(out / "trace.csv")))
    assert trace[0]["r"] == "2.0"
    assert "MassAttained" in capsys.readouterr().out
    # verify reuses the records
    assert run(["verify", "--config", cfg, "--out", str(out)]) == 0


def test_records_are_deterministic(tmp_path):
    cfg = write(tmp_path, "mu = 0.05\n" + CUBIC)
    for d in ("a", "b"):
        assert run(["solve", "--config", cfg, "--out", str(tmp_path / d)]) == 0
    assert (tmp_path / "a" / "records.json").read_bytes() == (tmp_path / "b" / "records.json").read_bytes()


def test_eigs(tmp_path):
    cfg = write(tmp_path, "mu = 1.0\n[spectrum]\ncount = 3\ndump_vectors = true\n" + CUBIC)
    out = tmp_path / "out"
    assert run(["eigs", "--config", cfg, "--out", str(out)]) == 0
    rows = json.loads((out / "spectrum.json").read_text())
    assert len(rows) == 3 and rows[0]["lambda"] == pytest.approx(9.87, rel=1e-3)
    assert (out / "eigenvectors.bin").stat().st_size == 16 + 8 * 127 * 3


def test_thresholds_unit_case(tmp_path):
    text = """mu = 1.0
[thresholds]
lambda1 = 1.0
C = 1.0
K2 = 0.0
Kp = 1.0
p = 4.0
q = 4.0
N = 1
"""
    out = tmp_path / "out"
    assert run(["thresholds", "--config", write(tmp_path, text), "--out", str(out)]) == 0
    c = json.loads((out / "certificate.json").read_text())["constants"]
    assert c["mu_star_th3"]["value"] == 1.0
    assert c["mu_star_th3"]["estimate_based"] is False


def test_thresholds_from_domain_are_estimate_based(tmp_path):
    out = tmp_path / "out"
    assert run(["thresholds", "--config", write(tmp_path, "mu = 0.05\n" + CUBIC), "--out", str(out)]) == 0
    c = json.loads((out / "certificate.json").read_text())["constants"]
    assert c["C_pN"]["estimate_based"] and c["mu_star"]["value"] > 5.0


def test_multiplicity(tmp_path):
    text = "mu = 0.002\n[multiplicity]\nm = 3\nframes = [2, 3]\n" + CUBIC
    out = tmp_path / "out"
    assert run(["multiplicity", "--config", write(tmp_path, text), "--out", str(out)]) == 0
    recs = json.loads((out / "records.json").read_text())
    assert [r["sign_changes"] for r in recs] == [0, 1, 2]
    assert (out / "solution_2.csv").exists()


def test_multiplicity_found_fewer_exits_one(tmp_path):
    text = "mu = 0.002\n[multiplicity]\nm = 3\nframes = [2, 2]\n" + CUBIC
    assert run(["multiplicity", "--config", write(tmp_path, text), "--out", str(tmp_path / "o")]) == 1


def test_scan_mu(tmp_path, capsys):
    text = "[mu_scan]\nfrom = 0.01\nto = 1.0\nsteps = 3\nlog = true\n" + CUBIC
    out = tmp_path / "out"
    assert run(["scan-mu", "--config", write(tmp_path, text), "--out", str(out), "--jobs", "2"]) == 0
    rows = list(csv.DictReader(open(out / "scan.csv")))
    assert [r["case"] for r in rows] == ["MassAttained"] * 3
    assert float(rows[2]["mu"]) == pytest.approx(1.0)
    assert "certificate mu*" in capsys.readouterr().out


def test_config_errors_exit_two(tmp_path, capsys):
    assert run(["solve", "--config", write(tmp_path, "mu = 1\nbogus = 2\n")]) == 2
    assert "bogus" in capsys.readouterr().err
    assert run(["solve", "--config", str(tmp_path / "nope.toml")]) == 2
    assert run(["solve", "--config", write(tmp_path, "mu = 1\n", "x.toml"), "--out", str(tmp_path / "o")]) == 2
    assert run(["solve", "--config", write(tmp_path, "mu = 1\n" + CUBIC, "y.toml"), "--jobs", "0"]) == 2


def test_verify_without_records_fails(tmp_path):
    cfg = write(tmp_path, "mu = 0.05\n" + CUBIC)
    assert run(["verify", "--config", cfg, "--out", str(tmp_path / "empty")]) == 1


def test_module_entry_point(tmp_path):
    cfg = write(tmp_path, "mu = 0.05\n" + CUBIC)
    res = subprocess.run([sys.executable, "-m", "normcrit", "eigs", "--config", cfg, "--out", str(tmp_path / "o")],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "k=1" in res.stdout


def test_robin_thresholds_with_gn_grid(tmp_path):
    text = """mu = 0.05
[domain]
kind = "interval"
bounds = [0.0, 1.0]
n = 64
[boundary]
mode = "robin"
[nonlinearity]
terms = [{a = 1.0, p = 4.0}]
[nonlinearity.g]
terms = [{a = 1.0, p = 3.0}]
[gn]
starts = 1
n = 32
"""
    out = tmp_path / "out"
    assert run(["thresholds", "--config", write(tmp_path, text), "--out", str(out)]) == 0
    c = json.loads((out / "certificate.json").read_text())["constants"]
    assert c["lambda_tilde"]["value"] == pytest.approx(1.0)
    assert c["mu_doublestar"]["value"] > 0
