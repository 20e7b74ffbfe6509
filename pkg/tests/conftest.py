import pytest

from mbpire.env import build_iid_env, build_markov_env
from mbpire.laws import FiniteLaw, LawTables, MinorizationSpec

from helpers import BERN, F, one_type


@pytest.fixture(scope="session")
def const_env():
    return build_iid_env([1.0])


@pytest.fixture(scope="session")
def bern():
    return one_type([BERN], [BERN])


@pytest.fixture(scope="session")
def bern_spec():
    return MinorizationSpec(0.4, (FiniteLaw.point(0),), FiniteLaw.point(0))


@pytest.fixture(scope="session")
def two_type():
    p1 = F([((0, 0), 0.4), ((1, 0), 0.5), ((0, 1), 0.1)])
    p2 = F([((0, 0), 0.4), ((1, 0), 0.2), ((0, 1), 0.4)])
    q = F([((0, 0), 0.5), ((1, 0), 0.25), ((0, 1), 0.25)])
    return LawTables.from_lists([[p1, p2]], [q])


@pytest.fixture(scope="session")
def iid_env():
    return build_iid_env([0.5, 0.5])


@pytest.fixture(scope="session")
def iidenv_tables():
    a = F([(0, 0.75), (1, 0.25)])
    b = F([(0, 0.25), (1, 0.75)])
    return one_type([a, b], [BERN, BERN])


@pytest.fixture(scope="session")
def markov_env():
    return build_markov_env([[0.9, 0.1], [0.1, 0.9]])


@pytest.fixture(scope="session")
def markov_tables():
    a = F([(0, 0.5), (1, 0.3), (2, 0.2)])
    b = F([(0, 0.7), (1, 0.3)])
    return one_type([a, b], [F([(0, 0.5), (1, 0.5)]), F([(0, 0.3), (1, 0.4), (2, 0.3)])])


@pytest.fixture(scope="session")
def counterex_env():
    return build_markov_env([[0.6, 0.4], [0.3, 0.7]])


@pytest.fixture(scope="session")
def counterex_tables():
    one = FiniteLaw.point(1)
    return one_type([one, FiniteLaw.point(0)], [one, one])


@pytest.fixture(scope="session")
def no_immigration():
    return one_type([BERN], [FiniteLaw.point(0)])
