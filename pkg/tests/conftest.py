import pytest

from specmap import autodiff as ad

# criterion number -> (passed, detail); filled by the acceptance tests
ACCEPTANCE: dict = {}


@pytest.fixture(autouse=True)
def _float64():
    ad.set_precision("float64")
    yield
    ad.set_precision("float64")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.rstrip("abcde")), k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {key}: {detail}")
