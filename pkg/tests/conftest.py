import pytest

from primal_sim.config import preset, toy_hardware, with_lora
from primal_sim.numerics import Arith


@pytest.fixture
def toy_hw():
    return toy_hardware()


@pytest.fixture
def toy_model():
    """Hidden 16, 2 heads of 8, LoRA rank 2 on Q and V."""
    return with_lora(preset("toy"), 2, ("Q", "V"), 1.0)


@pytest.fixture
def fixed():
    return Arith("fixed", 8)


# --- acceptance reporting ----------------------------------------------------------

_CRITERIA: dict = {}


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when != "call":
        return
    number, title, budget = mark.args
    ok = call.excinfo is None
    _CRITERIA[number] = (title, ok, call.duration, budget)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok, secs, budget = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}  "
                                    f"({secs:.2f} s, budget {budget:g} s)")
