import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"


@pytest.fixture(scope="session")
def oracle():
    import oracles
    return oracles.load()


# criterion number -> list of (passed, text); filled by test_acceptance
CRITERIA: dict[int, list] = {}


def record(number: int, passed: bool, text: str):
    CRITERIA.setdefault(number, []).append((bool(passed), text))


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for k in sorted(CRITERIA):
        rows = CRITERIA[k]
        verdict = "PASS" if all(ok for ok, _ in rows) else "FAIL"
        terminalreporter.write_line(f"criterion {k}: {verdict} | " + " ; ".join(t for _, t in rows))
