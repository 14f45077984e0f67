from __future__ import annotations

import numpy as np
import pytest

from glioseg.network import NetworkConfig
from glioseg.synth import PhantomSpec, generate


@pytest.fixture(scope="session")
def tiny_cfg():
    return NetworkConfig.tiny()


@pytest.fixture(scope="session")
def phantoms():
    return generate(PhantomSpec(dims=(32, 64, 64), count=3, seed=11))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one ``criterion N: PASS|FAIL`` line; all lines print in the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        lines.append((number, f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"))
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
