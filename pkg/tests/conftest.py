"""Shared primal solves; the larger grids are expensive, so each is solved once per session."""

import pytest

from screendual.model import ModelConfig
from screendual.primal import PrimalOptions, solve_primal

_CACHE = {}


def primal_solution(a: float, n: int, **opts):
    key = (a, n, tuple(sorted(opts.items())))
    if key not in _CACHE:
        cfg = ModelConfig(a=a, n_grid=n)
        _CACHE[key] = (cfg, *solve_primal(cfg, PrimalOptions(**opts)))
    return _CACHE[key]


@pytest.fixture(scope="session")
def primal32():
    return primal_solution(0.0, 32)


@pytest.fixture(scope="session")
def primal64():
    return primal_solution(0.0, 64)


@pytest.fixture(scope="session")
def primal128():
    return primal_solution(0.0, 128)


# acceptance verdicts, one line per criterion, echoed after the test run
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
