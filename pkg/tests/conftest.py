import pytest

from comp_cse.pipeline import simulate_records
from comp_cse.simgen import SystemConfig

SMALL_SYSTEM = SystemConfig(frames_per_second=10, seed=7)


@pytest.fixture(scope="session")
def small_records():
    kept, _ = simulate_records(SMALL_SYSTEM, 600)
    return kept
