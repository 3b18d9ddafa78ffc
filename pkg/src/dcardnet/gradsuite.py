"""Finite-difference suites over every primitive and a reduced DcardNet.

All checks run in float64 with central differences (epsilon 1e-5). Each
primitive's output is reduced to a scalar by a fixed random projection so
every output element contributes a distinct weight.
"""

import time
from dataclasses import dataclass

import numpy as np

from dcardnet import ops
from dcardnet.gradcheck import finite_diff_check
from dcardnet.model import ModelConfig, build_model
from dcardnet.tensor import Function, Parameter, Tensor, make_rng

OPS_TOLERANCE = 1e-5
MODEL_TOLERANCE = 1e-4
EPSILON = 1e-5
REDUCED_MODEL = ModelConfig(C=2, f=4, M=1, input_channels=6, input_size=16, num_classes=3)


class Project(Function):
    """sum(x * r) for a constant array r."""

    def forward(self, x, r):
        self.r = r
        return np.asarray((x * r).sum(), dtype=x.dtype)

    def backward(self, grad):
        return (grad * self.r,)


def project(t, r):
    return Project.apply(t, r=r)


@dataclass
class SuiteResult:
    name: str
    report: object
    seconds: float

    @property
    def passed(self):
        return self.report.passed


def _param(rng, shape, name, scale=1.0, avoid=0.0):
    data = rng.standard_normal(shape) * scale
    if avoid:
        data = np.where(np.abs(data) < avoid, np.sign(data + 1e-300) * (avoid + np.abs(data)), data)
    return Parameter(data, name, dtype=np.float64)


def _projected(fn, out_shape, rng):
    r = rng.standard_normal(out_shape)
    return lambda: project(fn(), r)


def _op_cases(rng):
    """(name, f, params) for every primitive."""
    cases = []

    x = _param(rng, (2, 3, 5, 5), "x")
    w = _param(rng, (4, 3, 3, 3), "weight", 0.3)
    b = _param(rng, (4,), "bias")
    cases.append(("conv2d 3x3 s1 p1", _projected(lambda: ops.conv2d(x, w, b, 1, 1), (2, 4, 5, 5), rng), [x, w, b]))

    x2 = _param(rng, (2, 3, 7, 7), "x")
    w2 = _param(rng, (4, 3, 3, 3), "weight", 0.3)
    cases.append(("conv2d 3x3 s2 p1", _projected(lambda: ops.conv2d(x2, w2, None, 2, 1), (2, 4, 4, 4), rng), [x2, w2]))

    x3 = _param(rng, (2, 5, 4, 4), "x")
    w3 = _param(rng, (6, 5, 1, 1), "weight", 0.3)
    cases.append(("conv2d 1x1", _projected(lambda: ops.conv2d(x3, w3), (2, 6, 4, 4), rng), [x3, w3]))

    # distinct values keep every max strictly unique
    xm = Parameter(rng.permutation(2 * 3 * 7 * 7).reshape(2, 3, 7, 7) * 0.1, "x", dtype=np.float64)
    cases.append(("max pool 3x3 s2 p1", _projected(lambda: ops.pool2d(xm, "max", 3, 2, 1), (2, 3, 4, 4), rng), [xm]))

    xa = _param(rng, (2, 3, 5, 5), "x")
    cases.append(("avg pool 2x2 s2", _projected(lambda: ops.pool2d(xa, "avg", 2, 2, 0), (2, 3, 2, 2), rng), [xa]))

    xg = _param(rng, (2, 4, 3, 3), "x")
    cases.append(("global avg pool", _projected(lambda: ops.pool2d(xg, "global_avg"), (2, 4), rng), [xg]))

    xb = _param(rng, (3, 4, 3, 3), "x", 2.0)
    gamma = Parameter(rng.uniform(0.5, 1.5, 4), "gamma", dtype=np.float64)
    beta = _param(rng, (4,), "beta")
    state = ops.BatchNormState(4, dtype=np.float64)
    cases.append((
        "batch norm (train)",
        _projected(lambda: ops.batch_norm(xb, gamma, beta, state, "train"), (3, 4, 3, 3), rng),
        [xb, gamma, beta],
    ))
    state_i = ops.BatchNormState(4, dtype=np.float64)
    state_i.running_mean[...] = rng.standard_normal(4)
    state_i.running_var[...] = rng.uniform(0.5, 2.0, 4)
    state_i.recorded = True
    xi = _param(rng, (2, 4, 3, 3), "x")
    gi = Parameter(rng.uniform(0.5, 1.5, 4), "gamma", dtype=np.float64)
    bi = _param(rng, (4,), "beta")
    cases.append((
        "batch norm (infer)",
        _projected(lambda: ops.batch_norm(xi, gi, bi, state_i, "infer"), (2, 4, 3, 3), rng),
        [xi, gi, bi],
    ))

    xr = _param(rng, (2, 3, 4, 4), "x", avoid=1e-3)
    cases.append(("relu", _projected(lambda: ops.relu(xr), (2, 3, 4, 4), rng), [xr]))

    xd = _param(rng, (2, 3, 4, 4), "x")
    cases.append((
        "dropout 0.3",
        _projected(lambda: ops.dropout(xd, 0.3, "train", make_rng(7)), (2, 3, 4, 4), rng),
        [xd],
    ))

    xc1 = _param(rng, (2, 2, 3, 3), "a")
    xc2 = _param(rng, (2, 3, 3, 3), "b")
    cases.append(("concat", _projected(lambda: ops.concat_channels([xc1, xc2]), (2, 5, 3, 3), rng), [xc1, xc2]))

    xf = _param(rng, (3, 6), "x")
    wf = _param(rng, (4, 6), "weight")
    bf = _param(rng, (4,), "bias")
    cases.append(("fully connected", _projected(lambda: ops.fully_connected(xf, wf, bf), (3, 4), rng), [xf, wf, bf]))

    logits = _param(rng, (4, 3), "logits")
    labels = rng.dirichlet(np.ones(3), size=4)
    weights = rng.uniform(0.5, 2.0, 4)
    cases.append((
        "soft cross entropy",
        lambda: ops.softmax_cross_entropy_soft(logits, labels, weights=weights)[0],
        [logits],
    ))
    return cases


def run_ops_suite(seed=0):
    rng = make_rng(seed)
    results = []
    for name, f, params in _op_cases(rng):
        t0 = time.perf_counter()
        report = finite_diff_check(f, params, epsilon=EPSILON, tolerance=OPS_TOLERANCE)
        results.append(SuiteResult(name, report, time.perf_counter() - t0))
    return results


def run_model_suite(seed=0, cfg=REDUCED_MODEL, batch=4, max_entries=None):
    """End-to-end check of every parameter of a small float64 DcardNet in train mode.

    Dropout masks are fixed by re-seeding the dropout generator on every call.
    """
    rng = make_rng(seed)
    model = build_model(cfg, rng, dtype=np.float64)
    x = Tensor(rng.random((batch, cfg.input_channels, cfg.input_size, cfg.input_size)), dtype=np.float64)
    labels = rng.dirichlet(np.ones(cfg.num_classes), size=batch)

    def f():
        logits = model.forward(x, mode="train", rng=make_rng(seed + 1))
        return ops.softmax_cross_entropy_soft(logits, labels)[0]

    t0 = time.perf_counter()
    report = finite_diff_check(f, model.parameters(), epsilon=EPSILON, tolerance=MODEL_TOLERANCE,
                               max_entries=max_entries, rng=make_rng(seed + 2))
    return [SuiteResult("reduced DcardNet (train mode)", report, time.perf_counter() - t0)]


def format_results(results):
    lines = [f"{'check':<30} {'max rel err':>12} {'tol':>8} {'time':>7}  status"]
    for r in results:
        status = "ok" if r.passed else "FAIL"
        lines.append(
            f"{r.name:<30} {r.report.max_rel_error:>12.3e} {r.report.tolerance:>8.0e} {r.seconds:>6.1f}s  {status}"
        )
    return "\n".join(lines)
