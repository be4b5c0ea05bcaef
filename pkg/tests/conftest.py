import numpy as np
import pytest

from pigs.config import (
    EvalConfig, ModelConfig, PhaseConfig, RunConfig, RunSection, SamplerConfig,
)
from pigs.trainer import build_model


@pytest.fixture(autouse=True)
def isolated_env(monkeypatch, tmp_path):
    """Keep runs and the registry inside the test's temporary directory."""
    monkeypatch.setenv("PIGS_OUTPUT_DIR", str(tmp_path / "runs"))
    monkeypatch.delenv("PIGS_DATABASE_URL", raising=False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_model_config(**overrides) -> ModelConfig:
    values = {"n_gaussians": 5, "feature_dim": 2, "hidden": 4}
    values.update(overrides)
    return ModelConfig(**values)


def tiny_model(problem, seed=0, **overrides):
    return build_model(problem, tiny_model_config(**overrides), seed)


def tiny_run_config(problem="helmholtz", iterations=20, every=5, phases=None, **sections) -> RunConfig:
    values = {
        "run": RunSection(problem=problem, seed=0),
        "model": tiny_model_config(),
        "sampler": SamplerConfig(interior=32, boundary=8, initial=8, data=8),
        "phase": phases or [PhaseConfig(iterations=iterations, lr=1e-2)],
        "eval": EvalConfig(every=every, resolution=8, snapshot_every=0),
    }
    values.update(sections)
    return RunConfig(**values)
