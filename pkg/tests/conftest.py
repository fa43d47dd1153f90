import pytest

_criteria: dict[int, list[tuple[str, str]]] = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    n = _CRITERION.get(report.nodeid)
    if n is not None:
        _criteria.setdefault(n, []).append((report.nodeid, report.outcome))


_CRITERION: dict[str, int] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        marker = item.get_closest_marker("acceptance")
        if marker is not None:
            _CRITERION[item.nodeid] = marker.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        outcomes = _criteria[n]
        ok = all(o == "passed" for _, o in outcomes)
        names = ", ".join(nid.split("::")[-1] for nid, _ in outcomes)
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  ({names})")


@pytest.fixture(scope="session")
def toy_model():
    from lfdlab.model import build_toy_model

    return build_toy_model()


@pytest.fixture(scope="session")
def small_corpus():
    from lfdlab.harness import generate_corpus

    return generate_corpus(12, seed=3, pool_size=40)
