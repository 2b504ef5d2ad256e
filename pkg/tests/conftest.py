import os
from pathlib import Path

import numpy as np
import pytest

from pixelwarden.dataset_io import CIFAR10_RECORD, DATA_ROOT_ENV, generate_synthetic


def write_fake_cifar(root: Path, records_per_file: int = 40, seed: int = 0) -> Path:
    """Random bytes laid out like the CIFAR-10 binary release."""
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]
    for name in names:
        rec = rng.integers(0, 256, size=(records_per_file, CIFAR10_RECORD), dtype=np.uint8)
        rec[:, 0] = np.arange(records_per_file) % 10
        rec.tofile(root / name)
    (root / "batches.meta.txt").write_text(
        "airplane\nautomobile\nbird\ncat\ndeer\ndog\nfrog\nhorse\nship\ntruck\n\n"
    )
    return root


@pytest.fixture(scope="session")
def fake_cifar(tmp_path_factory):
    return write_fake_cifar(tmp_path_factory.mktemp("cifar") / "cifar-10-batches-bin")


@pytest.fixture
def toy():
    return generate_synthetic(3, 12, 8, 8, seed=5)


def real_cifar_dir():
    root = os.environ.get(DATA_ROOT_ENV)
    if not root:
        return None
    path = Path(root) / "cifar-10-batches-bin"
    return path if (path / "test_batch.bin").is_file() else None


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
