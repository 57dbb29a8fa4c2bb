import subprocess
import sys

import pytest

from dnbd.cli import build_parser, main


def test_help_documents_everything(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    text = capsys.readouterr().out
    for word in ("run", "verify", "costs", "render", "DNBD_CONFIG_DIR"):
        assert word in text
    sub = build_parser()._subparsers._group_actions[0].choices
    run_help = sub["run"].format_help()
    for flag in ("--seed", "--out", "--workers", "--repetitions"):
        assert flag in run_help
    assert "--full" in sub["verify"].format_help()
    for flag in ("--J", "--N", "--S", "--mode"):
        assert flag in sub["costs"].format_help()


def test_costs(capsys):
    assert main(["costs", "--J", "4", "--N", "6", "--S", "2"]) == 0
    out = capsys.readouterr().out
    assert "J(2S+1)" in out and "13824" in out


def test_verify_quick(capsys):
    assert main(["verify"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") >= 6 and "FAIL" not in out


def test_run_smoke(tmp_path, capsys):
    code = main(["run", "smoke.yaml", "--out", str(tmp_path), "--seed", "3", "--repetitions", "1",
                 "--workers", "1"])
    assert code == 0
    assert (tmp_path / "smoke.csv").exists() and (tmp_path / "smoke.dat").exists()
    assert "dnbd_lcmv" in capsys.readouterr().out


def test_run_from_config_dir(tmp_path, monkeypatch):
    (tmp_path / "tiny.yaml").write_text(
        "name: tiny\nbeamformers: [dnds]\nradii_m: [0.0]\nvad_errors: [0.0]\nrepetitions: 1\nduration_s: 2.0\n")
    monkeypatch.setenv("DNBD_CONFIG_DIR", str(tmp_path))
    assert main(["run", "tiny.yaml", "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "tiny.csv").exists()


def test_missing_spec(capsys):
    assert main(["run", "does_not_exist.yaml"]) == 2
    assert "not found" in capsys.readouterr().err


def test_render(tmp_path, capsys):
    assert main(["render", "scene_default.yaml", "--duration", "1", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "mixture.wav").exists() and (tmp_path / "vad.txt").exists()
    assert "TDOA" in capsys.readouterr().out


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "dnbd", "costs", "--mode", "recursive"],
                          capture_output=True, text=True, check=True)
    assert "DNBD-LCMV/DNBD-LCMP" in proc.stdout
