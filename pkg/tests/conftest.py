import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "pacekit", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("pacekit")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


VERDICTS = pytest.StashKey[dict]()


@pytest.fixture
def verdict(request):
    """Record one acceptance line; returns the pass flag."""
    table = request.config.stash.setdefault(VERDICTS, {})

    def record(label, ok, detail):
        line = f"ACCEPTANCE {label:>3}: {'PASS' if ok else 'FAIL'}  {detail}"
        table[label] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    table = config.stash.get(VERDICTS, {})
    if table:
        terminalreporter.section("acceptance criteria")
        for label in sorted(table, key=lambda s: (int("".join(filter(str.isdigit, s))), s)):
            terminalreporter.write_line(table[label])
