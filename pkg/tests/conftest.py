import numpy as np
import pytest

from bridgecond.comprehension import VocabSpec
from bridgecond.gradcheck import TINY_MODEL
from bridgecond.model import EditModel

# criterion lines collected by the acceptance tests, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def gate():
    """Record one acceptance line, print it, then fail the test if the criterion failed."""

    def record(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def vocab():
    return VocabSpec.default(4)


@pytest.fixture
def tiny_model():
    return EditModel(TINY_MODEL, VocabSpec.default(TINY_MODEL.r))


@pytest.fixture(scope="session")
def removal_dir(tmp_path_factory):
    """Small template-only removal dataset shared by training tests."""
    from bridgecond.datapipe.pipeline import PipelineConfig, run_pipeline

    out = tmp_path_factory.mktemp("removal")
    run_pipeline(8, PipelineConfig(seed=0, tasks=("removal",), modes=("template",)), out)
    return out
