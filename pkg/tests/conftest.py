import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

# filled by tests/test_acceptance.py, printed at the end of the run
CRITERIA_LINES = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(CRITERIA_LINES):
        terminalreporter.write_line(CRITERIA_LINES[key])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def write_cifar_dir(path, n_per_file=10_000, seed=0):
    """Files in the CIFAR-10 binary layout with random pixels and labels."""
    rng = np.random.default_rng(seed)
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]
    for name in names:
        rec = rng.integers(0, 256, (n_per_file, 3073), dtype=np.uint8)
        rec[:, 0] = rng.integers(0, 10, n_per_file)
        (path / name).write_bytes(rec.tobytes())
    return path


@pytest.fixture(scope="session")
def cifar_dir(tmp_path_factory):
    return write_cifar_dir(tmp_path_factory.mktemp("cifar"))
