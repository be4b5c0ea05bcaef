import pytest
from fastapi.testclient import TestClient

from pigs.api import create_app
from pigs.errors import ConfigurationError
from pigs.registry import RESULT_FILE, RunRegistry, RunRegistryDB, get_registry
from pigs.schemas import RunSummary


def summary(run_id="helmholtz-abc", created_at="2024-01-01T00:00:00+00:00", **fields):
    values = dict(run_id=run_id, problem="helmholtz", seed=0, config_hash="0" * 64, output_dir="",
                  iterations=100, final_rel_l2=0.05, best_rel_l2=0.04, final_loss=1.5, created_at=created_at)
    values.update(fields)
    return RunSummary(**values)


@pytest.fixture
def runs_root(tmp_path):
    root = tmp_path / "runs"
    for s in (summary("helmholtz-abc"),
              summary("allen_cahn_inverse-def", problem="allen_cahn_inverse", coeffs={"reaction": 4.9},
                      created_at="2024-01-02T00:00:00+00:00", final_rel_l2=None, status="diverged")):
        directory = root / s.run_id
        directory.mkdir(parents=True)
        (directory / RESULT_FILE).write_text(s.model_copy(update={"output_dir": str(directory)}).model_dump_json())
    (root / "broken").mkdir()
    (root / "broken" / RESULT_FILE).write_text("{not json")
    return root


@pytest.fixture
def client(runs_root):
    return TestClient(create_app(RunRegistry(runs_root)))


def test_root(client):
    response = client.get("/")
    assert response.status_code == 200
    assert response.json()["endpoints"]["list_runs"] == "GET /runs"


def test_problems(client):
    response = client.get("/problems")
    assert response.status_code == 200
    problems = {p["name"]: p for p in response.json()}
    assert set(problems) == {"allen_cahn", "allen_cahn_inverse", "helmholtz", "klein_gordon", "flow_mixing",
                             "nl_diffusion", "ode_eq15", "ode_eq30"}
    assert problems["helmholtz"]["has_exact"] is True
    assert problems["klein_gordon"]["dimension"] == 3
    assert problems["allen_cahn"]["time_dependent"] is True
    assert "data" in problems["allen_cahn_inverse"]["constraints"]
    assert "reaction" not in problems["allen_cahn_inverse"]["coefficients"]


def test_presets(client):
    response = client.get("/presets")
    assert response.status_code == 200
    assert "helmholtz" in response.json()


def test_list_runs_skips_unreadable_summaries(client):
    response = client.get("/runs")
    assert response.status_code == 200
    assert [r["run_id"] for r in response.json()] == ["helmholtz-abc", "allen_cahn_inverse-def"]


def test_get_run(client):
    response = client.get("/runs/allen_cahn_inverse-def")
    assert response.status_code == 200
    body = response.json()
    assert body["status"] == "diverged"
    assert body["coeffs"] == {"reaction": 4.9}
    assert body["final_rel_l2"] is None


def test_get_unknown_run(client):
    response = client.get("/runs/nope")
    assert response.status_code == 404
    assert response.json()["detail"] == "Run not found"


def test_missing_root_lists_nothing(tmp_path):
    assert RunRegistry(tmp_path / "absent").list_runs() == []


def test_database_registry_round_trip(tmp_path):
    registry = RunRegistryDB(f"sqlite:///{tmp_path / 'runs.db'}")
    registry.record(summary("b-run", created_at="2024-01-02T00:00:00+00:00"))
    registry.record(summary("a-run", coeffs={"reaction": 5.0}))
    registry.record(summary("a-run", coeffs={"reaction": 5.0}, status="diverged"))
    assert [r.run_id for r in registry.list_runs()] == ["a-run", "b-run"]
    stored = registry.get_run("a-run")
    assert stored.status == "diverged"
    assert stored.coeffs == {"reaction": 5.0}
    assert registry.get_run("missing") is None


def test_registry_selection(monkeypatch, tmp_path):
    assert isinstance(get_registry(tmp_path), RunRegistry)
    monkeypatch.setenv("PIGS_DATABASE_URL", f"sqlite:///{tmp_path / 'runs.db'}")
    assert isinstance(get_registry(tmp_path), RunRegistryDB)


def test_directory_registry_record_writes_missing_and_stale_summaries(runs_root):
    registry = RunRegistry(runs_root)
    fresh = summary("ode_eq15-123", problem="ode_eq15", output_dir=str(runs_root / "ode_eq15-123"))
    registry.record(fresh)
    assert registry.get_run("ode_eq15-123") == fresh

    registry.record(fresh.model_copy(update={"status": "diverged"}))
    assert registry.get_run("ode_eq15-123").status == "diverged"
    assert "ode_eq15-123" in [r.run_id for r in registry.list_runs()]

    path = runs_root / "ode_eq15-123" / RESULT_FILE
    compact = registry.get_run("ode_eq15-123").model_dump_json()
    path.write_text(compact)
    registry.record(registry.get_run("ode_eq15-123"))
    assert path.read_text() == compact


def test_directory_registry_record_needs_an_output_directory(runs_root):
    with pytest.raises(ConfigurationError):
        RunRegistry(runs_root).record(summary())
