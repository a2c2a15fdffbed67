import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

import pytest

from resampnet.dataset import generate_synthetic_sources


@pytest.fixture(scope="session")
def sources(tmp_path_factory):
    """Eight synthetic 192x192 RGB sources: 9 tiles of 64 each."""
    d = tmp_path_factory.mktemp("sources")
    generate_synthetic_sources(d, 8, 192, seed=0)
    return d


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
