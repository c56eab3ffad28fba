import numpy as np
import pytest

from mpapkit import cohort


@pytest.fixture(scope="session")
def small_synthetic():
    return cohort.synth_cohort(cohort.SynthConfig(n_patients=40, seed=5, pilot_size=100))


@pytest.fixture
def complete_cohort():
    """Six fully observed records with easy-to-check numbers."""
    rows = []
    for i in range(6):
        rec = {name: float(10 * i + j) for j, name in enumerate(cohort.COLUMNS)}
        rec["gender"] = "female" if i % 2 else "male"
        rec["mpap"] = 18.0 + 5.0 * i
        rows.append([rec[c] for c in cohort.COLUMNS])
    return cohort.Cohort(cohort._frame_from_rows(rows))


def blank_column(c, name, rows):
    values = c.frame[name].tolist()
    for r in rows:
        values[r] = None if name == "gender" else np.nan
    return c.with_columns({name: values})


ACCEPTANCE_LINES = []


def record(criterion, passed, detail):
    line = f"{'PASS' if passed else 'FAIL'} criterion {criterion:>2}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
