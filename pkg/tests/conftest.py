from __future__ import annotations

import pytest

from crossphase import data_path
from crossphase.netmodel import load_feeder, load_profile, load_pv_pool


@pytest.fixture(scope="session")
def twobus():
    return load_feeder(data_path("twobus.json"))


@pytest.fixture(scope="session")
def hipv():
    return load_feeder(data_path("hipv.json"))


@pytest.fixture(scope="session")
def day():
    return load_profile(data_path("day.csv"))


@pytest.fixture(scope="session")
def coupled30():
    return load_feeder(data_path("coupled30.json"))


@pytest.fixture(scope="session")
def coupled30_pool():
    return load_pv_pool(data_path("coupled30.json"))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)
