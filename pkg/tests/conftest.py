from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

import artifacts  # noqa: E402


@pytest.fixture(scope="session")
def dataset_dir() -> Path:
    return artifacts.data_dir()


@pytest.fixture(scope="session")
def test_set(dataset_dir):
    from splitent.data import load_dataset

    return load_dataset(dataset_dir, "test")


@pytest.fixture(scope="session")
def trained_fp(test_set):
    return artifacts.load("FP"), test_set


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = mod.summary_lines() if mod is not None else []
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
