import pytest

from tagrec.synthetic import make_retrieval_dataset, make_world


@pytest.fixture(scope="session")
def world():
    return make_world(seed=0)


@pytest.fixture(scope="session")
def dataset(world):
    return make_retrieval_dataset(world)
