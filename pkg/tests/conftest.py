from __future__ import annotations

import pytest

from ipbac.provenance import ProvenanceChain

from helpers import T0, add


@pytest.fixture
def chain() -> ProvenanceChain:
    return ProvenanceChain("alice")


@pytest.fixture
def seven_three() -> ProvenanceChain:
    """7 successes and 3 failures, interleaved, one minute apart."""
    c = ProvenanceChain("alice")
    pattern = "SSFSSFSFSS"
    for i, ch in enumerate(pattern):
        add(c, T0 + i * 60_000, outcome="success" if ch == "S" else "failure", resource=f"incident/{i}")
    return c


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
