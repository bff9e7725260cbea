import io
import json

import numpy as np
import pytest

import run as cli
from blowup_modules import crud
from blowup_modules.database import SessionLocal, init_db
from blowup_modules.errors import ConvergenceError
from blowup_modules.schemas import CommandName, RunConfig


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    monkeypatch.delenv("BLOWUP_CACHE_DIR", raising=False)
    monkeypatch.delenv("BLOWUP_DATABASE_URL", raising=False)


def _config(argv):
    return cli.build_config(cli.build_parser().parse_args(argv))


def _records(cache_dir):
    init_db(f"sqlite:///{cache_dir / 'blowup_cache.db'}")
    db = SessionLocal()
    try:
        return [(r.command, r.status) for r in crud.list_run_records(db)]
    finally:
        db.close()


def test_flags_override_defaults(tmp_path):
    config = _config(["solve", "--alpha", "0.3", "--n-xi", "301", "--cache-dir", str(tmp_path), "--format", "json"])
    assert config.command == CommandName.solve
    assert config.params.alpha == 0.3
    assert config.params.grid_xi.n == 301
    assert config.params.grid_xi.min == 1e-8
    assert config.cache_dir == tmp_path
    assert config.format.value == "json"


def test_flags_override_the_config_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"params": {"alpha": 0.3, "k": 2, "bigN": 4}, "max_iter": 4}))
    config = _config(["verify", "--config", str(path), "--alpha", "0.4"])
    assert config.params.alpha == 0.4
    assert config.params.k == 2
    assert config.max_iter == 4


def test_cache_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("BLOWUP_CACHE_DIR", str(tmp_path / "env"))
    assert _config(["export"]).cache_dir == tmp_path / "env"


def test_invalid_configuration_exits_with_2(tmp_path):
    assert cli.main(["solve", "--alpha", "0.6", "--cache-dir", str(tmp_path)]) == cli.EXIT_BAD_CONFIG
    assert cli.main(["solve", "--config", str(tmp_path / "missing.json")]) == cli.EXIT_BAD_CONFIG


def test_held_lock_exits_with_2(tmp_path):
    (tmp_path / "run.lock").write_text("123")
    assert cli.main(["export", "--cache-dir", str(tmp_path)]) == cli.EXIT_BAD_CONFIG


def test_export_without_cache_exits_with_3(tmp_path):
    assert cli.main(["export", "--cache-dir", str(tmp_path)]) == cli.EXIT_NUMERICAL
    assert _records(tmp_path) == [("export", "failed")]
    assert not (tmp_path / "run.lock").exists()


def test_artifact_csv_is_deterministic():
    artifact = cli.Artifact(["x", "y"], [[1.0, 2.0], [3.0, 4.0]], {"b": 1, "a": [1.0, np.float64(2.0)]})
    text = artifact.to_csv("abc", "solve")
    assert text == artifact.to_csv("abc", "solve")
    header = [line for line in text.splitlines() if line.startswith("#")]
    assert header == ["# config_hash=abc", "# command=solve", "# columns=x,y", "# a=[1.0, 2.0]", "# b=1"]
    assert np.array_equal(np.loadtxt(io.StringIO(text), delimiter=","), [[1.0, 2.0], [3.0, 4.0]])


def test_artifact_json():
    artifact = cli.Artifact(["x"], [[1.0]], {"bad": float("nan"), "z": 1 + 2j}, {"report": {"ok": np.bool_(True)}})
    payload = json.loads(artifact.to_json("abc", "verify"))
    assert payload["schema_version"] == 1
    assert payload["metrics"] == {"bad": None, "z": [1.0, 2.0]}
    assert payload["report"] == {"ok": True}
    assert payload["rows"] == [[1.0]]


def test_run_writes_artifact_and_record(tmp_path, monkeypatch):
    monkeypatch.setitem(cli.COMMANDS, CommandName.build_profile, lambda config, db: cli.Artifact(["x"], [[1.0]], {"value": 2.0}))
    config = RunConfig(command="build-profile", cache_dir=tmp_path)
    assert cli.run(config) == cli.EXIT_OK
    text = (tmp_path / "build-profile.csv").read_text()
    assert f"# config_hash={config.params.config_hash()}" in text
    assert _records(tmp_path) == [("build-profile", "ok")]
    assert not (tmp_path / "run.lock").exists()


def test_failed_acceptance_exits_with_1(tmp_path, monkeypatch):
    failing = cli.Artifact([], None, {"passed": False, "failed": ["contraction"]})
    monkeypatch.setitem(cli.COMMANDS, CommandName.verify, lambda config, db: failing)
    assert cli.main(["verify", "--cache-dir", str(tmp_path), "--format", "json"]) == cli.EXIT_CHECK_FAILED
    assert json.loads((tmp_path / "verify.json").read_text())["metrics"]["failed"] == ["contraction"]


def test_numerical_failure_exits_with_3(tmp_path, monkeypatch):
    def diverging(config, db):
        raise ConvergenceError("series did not converge")

    monkeypatch.setitem(cli.COMMANDS, CommandName.solve, diverging)
    assert cli.main(["solve", "--cache-dir", str(tmp_path)]) == cli.EXIT_NUMERICAL
    assert _records(tmp_path) == [("solve", "failed")]
