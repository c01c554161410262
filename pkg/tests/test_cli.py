import json
import subprocess
import sys

import pytest

from autoplan.cli import build_parser, main, parse_extents
from autoplan.errors import InputError
from autoplan.fixtures import fixture_path

GPT = str(fixture_path("gpt_block"))
MLP = str(fixture_path("mlp_2layer"))
TOPO = str(fixture_path("topology_8gpu"))


def test_parse_extents():
    assert parse_extents("4x2") == [4, 2]
    assert parse_extents("8") == [8]
    with pytest.raises(InputError):
        parse_extents("4xa")
    with pytest.raises(InputError):
        parse_extents("0x2")


def test_subcommands_exist():
    sub = next(a for a in build_parser()._actions if a.dest == "command")
    assert set(sub.choices) == {"profile", "mesh", "convert", "intraop", "ckpt", "run"}


def test_profile(capsys):
    assert main(["profile", "--graph", GPT, "--topology", TOPO]) == 0
    out = capsys.readouterr().out
    assert "qkv" in out and "total flops" in out


def test_mesh(capsys):
    assert main(["mesh", "--topology", TOPO, "--shape", "4x2"]) == 0
    out = capsys.readouterr().out
    assert "mesh shape 4x2" in out and "axis 1" in out


def test_convert(capsys):
    assert main(["convert", "--from", "S0R", "--to", "RS0", "--mesh", "2x4", "--shape", "8x8"]) == 0
    out = capsys.readouterr().out
    assert "all-to-all" in out and "steps 1" in out


def test_intraop_then_ckpt(tmp_path, capsys):
    sol = tmp_path / "sol.json"
    sched = tmp_path / "sched.json"
    assert main(["intraop", "--graph", MLP, "--topology", TOPO, "--mesh", "4x2",
                 "--budget-bytes", "1e9", "-o", str(sol)]) == 0
    assert "selection" in json.loads(sol.read_text())
    assert main(["ckpt", "--graph", MLP, "--intraop-solution", str(sol), "--budget-bytes", "4e9",
                 "-o", str(sched)]) == 0
    doc = json.loads(sched.read_text())
    assert len(doc["decisions"]) == len(doc["blocks"])
    assert "F_all" in capsys.readouterr().out


def test_run_writes_identical_plans(tmp_path, capsys):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    args = ["run", "--graph", GPT, "--topology", TOPO, "--mesh", "4x2", "--device-budget-bytes", "24000000"]
    assert main(args + ["-o", str(a), "--report", str(tmp_path / "r.txt")]) == 0
    assert main(args + ["-o", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "r.txt").read_text() in capsys.readouterr().out


def test_exit_codes(tmp_path, capsys):
    assert main(["run", "--graph", GPT, "--topology", TOPO, "--mesh", "4x2", "--device-budget-bytes", "1000"]) == 2
    assert main(["intraop", "--graph", MLP, "--topology", TOPO, "--mesh", "4x2", "--budget-bytes", "10"]) == 2
    assert main(["profile", "--graph", str(tmp_path / "missing.json")]) == 3
    assert main(["mesh", "--topology", TOPO, "--shape", "3x3"]) == 3
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert main(["profile", "--graph", str(bad)]) == 3
    assert main(["convert", "--from", "S0R", "--to", "S9R", "--mesh", "2x4", "--shape", "8x8"]) == 3
    capsys.readouterr()


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "autoplan", "convert", "--from", "RR", "--to", "S01R",
                          "--mesh", "2x4", "--shape", "8x8"], capture_output=True, text=True)
    assert res.returncode == 0 and "shard-slice" in res.stdout
