import pytest

from fedbucket.model import ModelSpec

_acceptance: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n): acceptance criterion number n")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    number = dict(report.user_properties).get("criterion")
    if number is None:
        return
    detail = dict(report.user_properties).get("detail", "")
    _acceptance[number] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_acceptance):
        status, detail = _acceptance[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {detail}")


@pytest.fixture
def criterion(request):
    """Tag a test with its criterion number; call the returned function with a detail string."""
    marker = request.node.get_closest_marker("acceptance")
    request.node.user_properties.append(("criterion", marker.args[0]))

    def note(detail: str) -> None:
        request.node.user_properties.append(("detail", detail))
        print(f"criterion {marker.args[0]}: {detail}")

    return note


@pytest.fixture
def small_spec():
    return ModelSpec.mlp([6, 5, 3])
