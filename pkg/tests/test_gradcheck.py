import numpy as np
import pytest

from dcardnet import gradsuite, ops
from dcardnet.gradcheck import NonDeterministicError, finite_diff_check
from dcardnet.tensor import Parameter, make_rng


def test_every_primitive_passes():
    results = gradsuite.run_ops_suite(seed=0)
    names = {r.name for r in results}
    assert {"conv2d 3x3 s1 p1", "max pool 3x3 s2 p1", "batch norm (train)", "soft cross entropy"} <= names
    for r in results:
        assert r.passed, f"{r.name}: {r.report.format()}"
        assert r.report.max_rel_error < 1e-5


def test_conv_example_below_1e6():
    rng = make_rng(3)
    x = Parameter(rng.standard_normal((2, 3, 5, 5)), "x", dtype=np.float64)
    w = Parameter(rng.standard_normal((4, 3, 3, 3)), "w", dtype=np.float64)
    r = rng.standard_normal((2, 4, 5, 5))
    report = finite_diff_check(lambda: gradsuite.project(ops.conv2d(x, w, stride=1, pad=1), r), [x, w])
    assert report.max_rel_error < 1e-6


def test_injected_bug_is_caught(monkeypatch):
    original = ops.ReLU.backward
    monkeypatch.setattr(ops.ReLU, "backward", lambda self, g: (original(self, g)[0] * 1.01,))
    results = gradsuite.run_ops_suite(seed=0)
    failing = {r.name for r in results if not r.passed}
    assert failing == {"relu"}


def test_non_deterministic_function_is_rejected():
    p = Parameter(np.ones((1, 1, 2, 2)), "p", dtype=np.float64)
    rng = make_rng(0)
    with pytest.raises(NonDeterministicError):
        finite_diff_check(lambda: ops.dropout(p, 0.5, "train", rng).sum(), [p])
