import os
from pathlib import Path

import pytest

CIFAR_DIR = Path(os.environ.get("ISS_CIFAR_DIR", "/root/data/cifar-10-batches-bin"))


def _have_cifar() -> bool:
    return all((CIFAR_DIR / f).is_file() for f in
               [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"])


@pytest.fixture(scope="session")
def cifar():
    """Full CIFAR-10 train and test splits, or skip when the binaries are absent."""
    if not _have_cifar():
        pytest.skip(f"CIFAR-10 binaries not found in {CIFAR_DIR} (set ISS_CIFAR_DIR)")
    from iss.dataset import load_cifar_dir

    return load_cifar_dir(CIFAR_DIR, True), load_cifar_dir(CIFAR_DIR, False)


_CRITERIA: list[str] = []


@pytest.fixture(scope="session")
def criterion_log():
    """Collects one PASS/FAIL line per acceptance criterion for the run summary."""
    return _CRITERIA


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
