import numpy as np
import pytest

from rapforge import data as D
from rapforge import nets
from rapforge import train as T


@pytest.fixture(scope="session")
def digits_small():
    return D.synth_domain(D.DomainSpec("synthetic", "digits", seed=0, size=1200, params={"subset": "train"}))


@pytest.fixture(scope="session")
def small_classifier(digits_small):
    """A quickly trained convnet-s; weak but far from chance."""
    clf = nets.build_classifier("convnet-s", 0)
    T.train_classifier(clf, digits_small, epochs=2, lr=2e-3, seed=0)
    return clf.freeze()


_VERDICTS: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record one line per acceptance criterion; printed in the terminal summary."""

    def record(number: int, passed: bool, detail: str) -> bool:
        _VERDICTS[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[n])
