from pathlib import Path

import pytest

from src.models.data import Dataset, EmissionFactors, Prices
from src.tests.factories import make_dataset

REPO_ROOT = Path(__file__).resolve().parents[2]

@pytest.fixture
def fixture_csv() -> Path:
    return REPO_ROOT / "data" / "plants_2022_synthetic.csv"

@pytest.fixture
def fixture_schema() -> Path:
    return REPO_ROOT / "data" / "plants_schema.json"

@pytest.fixture
def small_dataset() -> Dataset:
    return make_dataset(seed=11, n=8)

@pytest.fixture
def medium_dataset() -> Dataset:
    return make_dataset(seed=23, n=15)

@pytest.fixture
def factors() -> EmissionFactors:
    return EmissionFactors(u=[0.09404])

@pytest.fixture
def unit_prices():
    def build(n: int, p: float = 1.0, w: float = 100.0) -> Prices:
        return Prices.uniform([p], [w], n)
    return build
