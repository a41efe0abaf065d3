from dataclasses import replace

import pytest

from squeezelab.scenario import ENV_OUTPUT_DIR, ENV_SEED, load_scenario


@pytest.fixture(autouse=True)
def _clean_environment(monkeypatch):
    monkeypatch.delenv(ENV_SEED, raising=False)
    monkeypatch.delenv(ENV_OUTPUT_DIR, raising=False)


@pytest.fixture(scope="session")
def default_scenario():
    return load_scenario()


@pytest.fixture
def short_lock(default_scenario):
    """Default servo shortened to a fraction of a second."""
    return replace(default_scenario.lock, duration=0.2)
