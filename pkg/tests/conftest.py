import os
from pathlib import Path

import pytest

from invspread.dataio import CIFAR_TEST_FILES, CIFAR_TRAIN_FILES


def cifar_dir() -> Path:
    return Path(os.environ.get("CIFAR10_DIR", "data/cifar-10-batches-bin"))


def have_cifar() -> bool:
    d = cifar_dir()
    return all((d / f).is_file() for f in CIFAR_TRAIN_FILES + CIFAR_TEST_FILES)


needs_cifar = pytest.mark.skipif(not have_cifar(), reason="CIFAR-10 binaries not found (set CIFAR10_DIR)")


# criterion number -> (passed, detail); filled in by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
