import os
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
ML100K = Path(os.environ.get("CFCT_ML100K", ROOT / "data" / "ml-100k" / "u.data"))


@pytest.fixture(scope="session")
def ml100k_path():
    if not ML100K.exists():
        pytest.skip(f"MovieLens-100k not found at {ML100K}; run scripts/fetch_ml100k.py")
    return ML100K


@pytest.fixture(scope="session")
def ml100k(ml100k_path):
    from cfct.ingest import load_dataset

    return load_dataset(ml100k_path, "tsv-4col", 0.2, seed=0)


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture
def record_criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion and print it."""

    def record(number, name, ok, detail=""):
        line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {name}: {detail}"
        request.config.acceptance_lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
