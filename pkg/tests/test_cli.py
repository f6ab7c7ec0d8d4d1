import json

import pytest

from sohgp.cli import main


def write_config(tmp_path, **fleet):
    cfg = {"input_dir": str(tmp_path / "in"), "work_dir": str(tmp_path / "work"),
           "output_dir": str(tmp_path / "out"),
           "fleet": {"n_batteries": 2, "length_days": [400, 405], **fleet}}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture(scope="module")
def simulated(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write_config(tmp)
    assert main(["--config", cfg, "simulate"]) == 0
    return tmp, cfg


def test_stage_before_its_prerequisite_names_the_manifest(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["--config", cfg, "classify"]) == 2
    err = capsys.readouterr().err
    assert "calibrate.json" in err


def test_zero_batteries_is_a_config_error(tmp_path, capsys):
    cfg = write_config(tmp_path, n_batteries=0)
    assert main(["--config", cfg, "simulate"]) == 2
    assert "n_batteries" in capsys.readouterr().err


def test_unknown_config_key_rejected(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"fleet": {"n_batterys": 3}}))
    assert main(["--config", str(path), "simulate"]) == 2


def test_simulate_refuses_to_overwrite(simulated, capsys):
    _, cfg = simulated
    assert main(["--config", cfg, "simulate"]) == 2
    assert "--force" in capsys.readouterr().err


def test_simulate_manifest_contents(simulated):
    tmp, _ = simulated
    m = json.loads((tmp / "in" / "manifest.json").read_text())
    assert m["stage"] == "simulate" and m["seed"] == 7
    assert m["counts"]["batteries"] == 2
    assert "telemetry/B0000.csv" in m["outputs"]


def test_ingest_resumes_and_detects_tampering(simulated, capsys):
    tmp, cfg = simulated
    assert main(["--config", cfg, "ingest"]) == 0
    manifest = tmp / "work" / "manifests" / "ingest.json"
    first = manifest.read_bytes()
    capsys.readouterr()
    assert main(["--config", cfg, "ingest"]) == 0
    assert "up to date" in capsys.readouterr().out
    assert manifest.read_bytes() == first
    seg = tmp / "work" / "segments" / "B0000.csv"
    seg.write_text(seg.read_text() + "\n")
    assert main(["--config", cfg, "ingest"]) == 0
    assert "up to date" not in capsys.readouterr().out
    assert manifest.read_bytes() == first
    assert main(["--config", cfg, "--force", "ingest"]) == 0
    assert manifest.read_bytes() == first


def test_seed_override_changes_config_hash(simulated, tmp_path):
    tmp, cfg = simulated
    other = write_config(tmp_path)
    assert main(["--config", other, "--seed", "8", "simulate"]) == 0
    a = json.loads((tmp / "in" / "manifest.json").read_text())
    b = json.loads((tmp_path / "in" / "manifest.json").read_text())
    assert a["config_hash"] != b["config_hash"] and b["seed"] == 8
