import json
import subprocess
import sys

import pytest

from bigjump.cli import ConfigError, main, parse_config_text, run, verify

SCAN = """\
# one-jump weight along gamma
experiment = scan
law.family = ZrpOccupation
law.b = 4
n = [10000]
x_rule = gamma
x_values = [-2, 0, 2]
"""


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_key_value_and_json_agree():
    kv = parse_config_text(SCAN)
    js = parse_config_text(kv.to_json())
    assert kv == js
    assert kv.law == {"family": "ZrpOccupation", "b": 4}
    assert kv.x_values == [-2, 0, 2]


@pytest.mark.parametrize("text,line", [
    ("experiment = scan\nlaw.family = Bounded\nn = []\nx_values = [1]\n", 3),
    ("experiment = scan\nbogus\n", 2),
    ("experiment = scan\nn = [1\n", 2),
    ("experiment = scan\nexperiment = exact\n", 2),
    ("experiment = scan\nlaw.family = Bounded\nn = [10]\nx_values = [1]\nwhat = 3\n", 5),
])
def test_config_errors_carry_line_numbers(text, line):
    with pytest.raises(ConfigError) as exc:
        parse_config_text(text)
    assert exc.value.line == line


def test_empty_grid_exits_with_usage_error(tmp_path, capsys):
    cfg = write(tmp_path, "bad.cfg", "experiment = exact\nlaw.family = Bounded\nn = []\nx_values = [1]\n")
    assert main(["exact", "--config", str(cfg)]) == 2
    assert "line 3" in capsys.readouterr().err


def test_wrong_subcommand_for_config(tmp_path):
    cfg = write(tmp_path, "scan.cfg", SCAN)
    assert main(["exact", "--config", str(cfg)]) == 2


def test_scan_rows_and_reproducibility(tmp_path):
    cfg = write(tmp_path, "scan.cfg", SCAN)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["scan", "--config", str(cfg), "--out", str(a)]) == 0
    assert main(["scan", "--config", str(cfg), "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    lines = a.read_text().splitlines()
    assert lines[0] == "n,x,exact,predictor,ratio,gamma,s_pred,s_exact"
    assert len(lines) == 4
    gammas = [float(l.split(",")[5]) for l in lines[1:]]
    assert gammas == pytest.approx([-2, 0, 2], abs=1e-9)
    sidecar = json.loads((tmp_path / "a.csv.json").read_text())
    assert sidecar["experiment"] == "scan"


def test_verify_round_trip(tmp_path):
    cfg = write(tmp_path, "scan.cfg", SCAN)
    out = tmp_path / "s.csv"
    assert main(["scan", "--config", str(cfg), "--out", str(out)]) == 0
    assert verify(out, fraction=1.0) == (3, 0)
    # tamper with one number and verify must notice
    text = out.read_text().splitlines()
    fields = text[1].split(",")
    fields[2] = repr(float(fields[2]) * 1.01)
    text[1] = ",".join(fields)
    out.write_text("\n".join(text) + "\n")
    assert verify(out, fraction=1.0)[1] == 1
    assert main(["verify", str(out), "--fraction", "1"]) == 1


def test_mc_runs_are_deterministic(tmp_path):
    text = ("experiment = mc\nlaw.family = ZrpOccupation\nlaw.b = 4\nlaw.K_cap = 65536\n"
            "n = [50]\nx_rule = a_n\nx_values = [3]\nbudget = 2000\nseed = 4\n")
    cfg = write(tmp_path, "mc.cfg", text)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["mc", "--config", str(cfg), "--out", str(a)]) == 0
    assert main(["mc", "--config", str(cfg), "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert main(["mc", "--config", str(cfg), "--out", str(b), "--seed", "5"]) == 0
    assert a.read_bytes() != b.read_bytes()


def test_tolerance_failure_gives_exit_one(tmp_path):
    text = ("experiment = predict\nlaw.family = ZrpOccupation\nlaw.b = 4\nn = [1000]\n"
            "x_rule = a_n\nx_values = [1]\ntolerance = 1e-6\n")
    cfg = write(tmp_path, "p.cfg", text)
    assert main(["predict", "--config", str(cfg), "--out", str(tmp_path / "p.csv")]) == 1


def test_norms_and_zrp(tmp_path):
    norms = write(tmp_path, "n.cfg", "experiment = norms\nlaw.family = ParetoZeta\nlaw.beta = 2.5\nn = [100, 1000]\n")
    out = tmp_path / "n.csv"
    assert main(["norms", "--config", str(norms), "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 3
    zrp = write(tmp_path, "z.cfg", "experiment = zrp\nlaw.b = 4\nn = [200]\nx_rule = gamma_prime\nx_values = [0]\n")
    zout = tmp_path / "z.csv"
    assert main(["zrp", "--config", str(zout.with_suffix(".missing"))]) == 2
    assert main(["zrp", "--config", str(zrp), "--out", str(zout)]) == 0
    row = zout.read_text().splitlines()[1].split(",")
    assert 0.0 <= float(row[4]) <= 1.0


def test_law_check(capsys):
    assert main(["law", "check", "family=ParetoZeta", "beta=2.5"]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["family"] == "ParetoZeta" and info["beta"] == 2.5
    assert main(["law", "check"]) == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "bigjump", "law", "check", "family=Bounded",
                          "values=[0,1]", "masses=[0.5,0.5]"], capture_output=True, text=True)
    assert res.returncode == 0
    assert json.loads(res.stdout)["mean"] == 0.5


def test_config_run_function(tmp_path):
    cfg = parse_config_text(SCAN.replace("[-2, 0, 2]", "[0]"))
    cfg.out = str(tmp_path / "one.csv")
    assert run(cfg) == 0
