import pytest

from gamp_lab.experiment import ExperimentConfig, run_se

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record(number, title, passed, detail):
    ACCEPTANCE[number] = (title, bool(passed), detail)
    print(f"ACCEPTANCE {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")


@pytest.fixture(scope="session")
def nl_se():
    """SE traces of the sparse sigmoid reference setting."""
    config = ExperimentConfig()
    return {sel: run_se(config, sel) for sel in ("nl_gamp", "lin_gamp")}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'} - {title} ({detail})")
