import pytest

from moocgrade import simgen
from moocgrade.eventlog import CourseCatalog, EventKind, EventRecord, group_events

T0 = 1_401_580_800  # a UTC midnight


def event(t, kind, target, student="u1", **payload):
    """Shorthand EventRecord constructor for hand-built logs."""
    kind = EventKind(kind)
    if kind.is_video:
        payload.setdefault("pos", 0.0)
    if kind is EventKind.QUIZ_ATTEMPT:
        payload.setdefault("att", 1)
        payload.setdefault("g", 1.0)
    if kind is EventKind.HOMEWORK_SUBMIT:
        payload.setdefault("g", 1.0)
    return EventRecord(student, int(t), kind, target, payload)


@pytest.fixture
def catalog():
    return CourseCatalog(
        homeworks=("h1", "h2", "h3"),
        quizzes={"qA": "h1", "qB": "h1", "qC": "h2", "qD": "h2", "qE": "h3"},
        videos={"v1": "qA", "v2": "qB", "v3": "qC"},
        video_lengths={"v1": 600.0, "v2": 600.0, "v3": 300.0},
    )


@pytest.fixture(scope="session")
def small_sim():
    cfg = simgen.SimConfig(seed=3, n_students=60, n_homeworks=4)
    return cfg, simgen.generate_logs(cfg)


@pytest.fixture(scope="session")
def small_events(small_sim):
    return group_events(small_sim[1].events)


_CRITERIA: dict[str, str] = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_criterion_"):
        return
    if report.when == "call" or report.outcome != "passed":
        _CRITERIA.setdefault(name, "PASS" if report.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA):
        number, label = name[len("test_criterion_"):].split("_", 1)
        terminalreporter.write_line(f"criterion {int(number):2d} {_CRITERIA[name]}: "
                                    f"{label.replace('_', ' ')}")
