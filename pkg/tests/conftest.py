import re

import numpy as np
import pytest

from infantmotion import synth
from infantmotion.core import CHANNEL_NAMES, N_CHANNELS, Recording


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_recording(T=300, seed=0, subject_id="S00", rate=52.0):
    x = np.random.default_rng(seed).normal(size=(T, N_CHANNELS))
    return Recording(subject_id, rate, x, np.ones(T, dtype=bool))


def recording_csv(rows, columns=CHANNEL_NAMES, t_index=None):
    t_index = range(len(rows)) if t_index is None else t_index
    lines = [",".join(("t_index",) + tuple(columns))]
    for t, row in zip(t_index, rows):
        lines.append(f"{t}," + ",".join(str(v) for v in row))
    return "\n".join(lines) + "\n"


@pytest.fixture(scope="session")
def small_scenario():
    return synth.Scenario(duration_s=180.0)


@pytest.fixture(scope="session")
def small_dataset(small_scenario):
    return synth.make_dataset(small_scenario, 4, seed=7)


# --- acceptance summary -------------------------------------------------------

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_criterion_(\d+)", report.nodeid)
    if m is None:
        return
    if report.when == "call" or report.failed:
        detail = dict(report.user_properties).get("detail", "")
        _CRITERIA[int(m.group(1))] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_CRITERIA):
        outcome, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {outcome}  {detail}")
