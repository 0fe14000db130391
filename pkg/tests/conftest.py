import numpy as np
import pytest

from relayrank.model import ModelConfig


@pytest.fixture
def toy():
    return ModelConfig(layers=2, dim=16, elem_bytes=8, seed=42)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting -------------------------------------------------------

_VERDICTS: list[str] = []


class _Verdict:
    def __init__(self, number: int, title: str):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        line = f"ACCEPTANCE {self.number} {status}: {self.title}"
        if self.detail:
            line += f" [{self.detail}]"
        if exc_type is not None and exc is not None:
            line += f" -- {exc}".splitlines()[0]
        _VERDICTS.append(line)
        print(line)
        return False


@pytest.fixture
def verdict():
    return _Verdict


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
