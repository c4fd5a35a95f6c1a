import csv
import json

import pytest
import yaml

from noisetrace.cli import main
from noisetrace.config import dump_config, load_config, parse_config
from noisetrace.detector import tiny_config
from noisetrace.errors import ConfigError


@pytest.fixture
def run_cfg(tmp_path):
    cfg = {
        "seed": 3,
        "out": str(tmp_path / "run"),
        "synth": {"n_tracks": 10, "duration_s": 0.5},
        "detector": tiny_config(512).to_dict(),
        "train": {"epochs": 2, "early_stop_patience": 1, "batch_size": 4, "learning_rate": 1e-3},
        "attacks": ["clean", "lp-6000"],
    }
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def test_pipeline_end_to_end(tmp_path, run_cfg, capsys):
    out = tmp_path / "run"
    assert main(["synth", "--config", str(run_cfg)]) == 0
    manifest = out / "corpus" / "manifest.csv"
    assert manifest.exists()
    assert main(["validate", "--config", str(run_cfg), "--manifest", str(manifest)]) == 0
    assert main(["separate", "--config", str(run_cfg), "--manifest", str(manifest)]) == 0
    comps = out / "components"
    assert (comps / "s" / "synth_00000.wav").exists() and (comps / "n" / "synth_00019.wav").exists()
    assert (comps / "run_separate.json").exists() and (comps / "config_snapshot.yaml").exists()
    for col in ("x", "n"):
        assert main(["train", "--config", str(run_cfg), "--manifest", str(manifest), "--component", col,
                     "--components", str(comps), "--deterministic"]) == 0
        assert (out / "models" / f"D_{col}.ntd").exists()
    rows = list(csv.DictReader(open(out / "train_n" / "metrics.csv")))
    assert 1 <= len(rows) <= 2
    assert main(["eval", "--config", str(run_cfg), "--manifest", str(manifest),
                 "--model", f"x={out / 'models' / 'D_x.ntd'}", "--model", f"n={out / 'models' / 'D_n.ntd'}"]) == 0
    table = json.loads((out / "eval" / "comparison.json").read_text())
    assert {(r["condition"], r["component"]) for r in table} == {("clean", "x"), ("clean", "n"),
                                                                 ("lp-6000", "x"), ("lp-6000", "n")}
    assert (out / "eval" / "scores" / "synth__lp-6000__n.csv").exists()
    assert main(["report", "--config", str(run_cfg)]) == 0
    assert "lp-6000" in capsys.readouterr().out


def test_attack_command(tmp_path, run_cfg):
    assert main(["synth", "--config", str(run_cfg)]) == 0
    manifest = tmp_path / "run" / "corpus" / "manifest.csv"
    assert main(["attack", "--config", str(run_cfg), "--manifest", str(manifest), "--attack", "lp-4000"]) == 0
    assert (tmp_path / "run" / "attacked" / "lp-4000" / "manifest.csv").exists()


def test_ingest_protocol(tmp_path, capsys):
    proto = tmp_path / "p.txt"
    proto.write_text("LA_0079 LA_T_1 - - bonafide\nLA_0080 LA_T_2 - A01 spoof\n")
    dst = tmp_path / "m.csv"
    assert main(["ingest", "--protocol", str(proto), "--audio-dir", str(tmp_path), "--output", str(dst)]) == 0
    assert "2 unresolved" in capsys.readouterr().out
    assert len(dst.read_text().strip().splitlines()) == 3


@pytest.mark.parametrize("argv", [
    ["separate"],
    ["eval", "--manifest", "does/not/exist.csv"],
    ["train", "--component", "n", "--manifest", "does/not/exist.csv"],
    ["ingest"],
])
def test_errors_exit_2(tmp_path, argv, capsys):
    assert main(argv + ["--out", str(tmp_path / "o")]) == 2
    assert "error" in capsys.readouterr().err


def test_bad_config_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: 1\nlearning_rate: 0.1\n")
    assert main(["validate", "--config", str(bad)]) == 2
    assert "learning_rate" in capsys.readouterr().err


def test_config_roundtrip_and_strictness(tmp_path):
    cfg = parse_config({"seed": 9, "attacks": ["clean", "mp3-64"], "train": {"epochs": 20},
                        "separator": {"kind": "external", "external": {"name": "DMCS", "speech_dir": "/x"}}})
    assert cfg.train.epochs == 20 and cfg.separator.external.name == "DMCS"
    back = load_config(dump_config(cfg, tmp_path / "c.yaml"))
    assert back.to_dict() == cfg.to_dict()
    for bad in ({"version": 2}, {"train": {"epoch": 3}}, {"attacks": ["gsm"]}, {"separator": {"kind": "magic"}},
                {"separator": {"kind": "external"}}, {"eval": {"thresh": 0.4}}, {"detector": {"gru": 3}}):
        with pytest.raises(ConfigError):
            parse_config(bad)
