import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

ACCEPTANCE_SEEDS = (0, 1, 2)
EXTRA_M = 50

# criterion number -> (title, passed); filled by test_acceptance
VERDICTS: dict[int, tuple[str, bool]] = {}


@pytest.fixture(scope="session")
def experiments():
    """Toy-profile pipeline for every acceptance seed (teacher, m=20 and m=50 students, sweeps, gap)."""
    from fast_st.pipeline import get_profile, run_experiment

    return [run_experiment(get_profile("toy", s), extra_m=(EXTRA_M,)) for s in ACCEPTANCE_SEEDS]


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        title, ok = VERDICTS[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {n:2d} {title}")
