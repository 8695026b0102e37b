import numpy as np
import pytest

from functions.phy.helpers import OfdmConfig


@pytest.fixture
def cfg() -> OfdmConfig:
    return OfdmConfig()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def ledger(tmp_path, monkeypatch):
    """Isolated sqlite ledger for the duration of a test."""
    path = tmp_path / "ledger.db"
    monkeypatch.setenv("DATABASE_PATH", str(path))
    return path
