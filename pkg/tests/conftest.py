import time

import pytest

from mambafusion.toy.train import TrainConfig, ablate

_ACCEPTANCE: dict[int, str] = {}


def record(n: int, name: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {n} {name}: {detail}"
    _ACCEPTANCE[n] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])


@pytest.fixture(scope="session")
def ablation():
    """The default 2x2 x 3-seed ablation, run once per session (a few minutes on one core)."""
    results = {}
    t = time.perf_counter()
    rows = ablate(TrainConfig(), on_result=lambda cfg, res: results.__setitem__((cfg.t2i, cfg.i2t, cfg.seed), res))
    return rows, results, time.perf_counter() - t
