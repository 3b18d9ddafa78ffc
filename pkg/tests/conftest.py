import numpy as np
import pytest

from dcardnet.data import generate_synthetic_dataset
from dcardnet.tensor import make_rng


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """12 samples (6 per class) of 56x56 synthetic stacks on disk."""
    out = tmp_path_factory.mktemp("tiny_data")
    samples, rows = generate_synthetic_dataset(6, 2, 56, seed=0, out_dir=out)
    return out, samples


TINY_CONFIG = """\
input_size = 56
f = 8
total_steps = 20
step_stop = 20
eval_every = 10
folds = 2
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CONFIG)
    return path


def assert_close(a, b, tol):
    assert np.max(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))) <= tol


@pytest.fixture(scope="session")
def criteria(request):
    """Collects one status line per acceptance criterion for the terminal summary."""
    lines = request.config.__dict__.setdefault("_acceptance_lines", {})

    def record(number, title, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title}" + (f" ({detail})" if detail else "")
        lines[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
