import json
from pathlib import Path

import pytest

from pblab.cli import build_parser, main

CONFIGS = Path(__file__).parent / "configs"


@pytest.fixture
def out(tmp_path, monkeypatch):
    monkeypatch.delenv("PBL_OUT", raising=False)
    return tmp_path


def _run(cmd, cfg, out, *extra):
    return main([cmd, "--config", str(CONFIGS / cfg), "--out", str(out), *extra])


def test_parser_lists_commands():
    p = build_parser()
    for c in ("gen-data", "pretrain", "poison", "finetune", "shadows", "attack", "game",
              "probe-params", "probe-neurons", "report"):
        assert p.parse_args([c]).command == c


def test_bad_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("game: {targetz: 3}\n")
    assert main(["game", "--config", str(bad)]) == 2
    assert "unknown" in capsys.readouterr().err
    assert main(["game", "--config", str(tmp_path / "missing.yaml")]) == 2


def test_classifier_step_by_step(out, capsys):
    cfg = "tiny_classifier.yaml"
    assert _run("gen-data", cfg, out) == 0
    assert (out / "seed7" / "universal.npz").exists()
    assert _run("pretrain", cfg, out) == 0
    assert (out / "pretrained.pbck").exists()
    # finetuning from the poisoned model needs the poison step first
    assert _run("finetune", cfg, out, "--from", "poisoned") == 1
    assert "poison command" in capsys.readouterr().err
    assert _run("poison", cfg, out) == 0
    assert json.loads((out / "seed7" / "poison_report.json").read_text())["kind"] == "classifier"
    for start in ("pretrained", "poisoned"):
        assert _run("finetune", cfg, out, "--from", start) == 0
        assert _run("shadows", cfg, out, "--from", start) == 0
        assert _run("attack", cfg, out, "--from", start) == 0
        assert (out / "seed7" / f"scores_{start}.csv").exists()
    assert "AUC" in capsys.readouterr().out


def test_game_and_report(out, capsys):
    cfg = "tiny_classifier.yaml"
    assert _run("game", cfg, out) == 0
    assert (out / "seed7" / "poisoned" / "transcript.csv").exists()
    assert _run("report", cfg, out) == 0
    for name in ("results.csv", "roc.csv", "bundle.json", "report.md"):
        assert (out / name).exists(), name
    assert "| Setting | Arm |" in capsys.readouterr().out
    assert _run("report", cfg, out, "--bundle", str(out / "bundle.json"), "--format", "markdown") == 0


def test_dump_config(out, capsys):
    assert _run("pretrain", "tiny_lm.yaml", out, "--dump-config") == 0
    assert "kind: lm" in capsys.readouterr().out


def test_probes_on_lm(out, capsys):
    cfg = "tiny_lm.yaml"
    assert _run("probe-params", cfg, out) == 0
    assert (out / "probes" / "param_overlap.csv").exists()
    assert _run("probe-neurons", cfg, out, "--layer", "1") == 0
    assert "exposure before" in (out / "probes" / "neuron_summary.txt").read_text()
    assert _run("probe-params", "tiny_classifier.yaml", out) == 1


def test_env_out_overrides_flag(tmp_path, monkeypatch):
    monkeypatch.setenv("PBL_OUT", str(tmp_path / "env"))
    assert main(["gen-data", "--config", str(CONFIGS / "tiny_classifier.yaml"), "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "env" / "seed7").exists()
    assert not (tmp_path / "flag").exists()
