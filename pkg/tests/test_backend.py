import json
import subprocess
import sys

import pytest

from locwatch.backend import ALL_ROLES, BackendConfig
from locwatch.cli import main as locwatch_main


def test_config_from_toml(tmp_path):
    path = tmp_path / "cfg.toml"
    path.write_text(
        "[backend]\nroles = ['gateway', 'guardian']\nbroker_url = 'tcp://127.0.0.1:7070'\n"
        "[function]\nmax_workers = 1\n"
        "[scaling.gateway]\nmax_replicas = 1\n"
        "[guardian]\nk_volunteers = 3\n")
    cfg = BackendConfig.load(path)
    assert cfg.roles == frozenset({"gateway", "guardian"})
    assert cfg.function.max_workers == 1
    assert cfg.gateway_scaling.max_replicas == 1
    assert cfg.guardian.k_volunteers == 3
    assert cfg.ingest_scaling.max_replicas == 8


def test_config_from_json_and_unknown_keys(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"ingest": {"flush_threshold": 7}}))
    assert BackendConfig.load(path).ingest.flush_threshold == 7
    for bad in ({"nope": {}}, {"ingest": {"nope": 1}}, {"backend": {"nope": 1}}):
        with pytest.raises(ValueError):
            BackendConfig.from_mapping(bad)


def test_cli_role_validation(capsys):
    assert locwatch_main(["serve", "--roles", "gateway,wizard"]) == 2
    assert locwatch_main(["serve", "--roles", "gateway"]) == 2
    assert "tcp://" in capsys.readouterr().err


def test_cli_help_runs():
    out = subprocess.run([sys.executable, "-m", "locwatch.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "serve" in out.stdout
    assert ALL_ROLES == {"gateway", "ingest", "faas", "guardian"}
