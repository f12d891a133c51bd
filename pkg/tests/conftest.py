from pathlib import Path

import pytest

from ontolabel.ontology import load_ontology

FIXTURES = Path(__file__).resolve().parents[1] / "fixtures"


@pytest.fixture(scope="session")
def sample_ontology():
    return load_ontology(FIXTURES / "sample_ontology.txt")


@pytest.fixture(scope="session")
def bench_ontology():
    return load_ontology(FIXTURES / "bench_ontology.txt")


@pytest.fixture(scope="session")
def fixtures_dir():
    return FIXTURES
