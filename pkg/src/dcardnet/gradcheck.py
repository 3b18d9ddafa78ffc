"""Central finite-difference verification of analytic gradients."""

from dataclasses import dataclass, field

import numpy as np

from dcardnet.tensor import Tensor, no_grad


class NonDeterministicError(RuntimeError):
    pass


@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    worst_index: tuple
    checked: int
    flagged: bool


@dataclass
class GradCheckReport:
    tolerance: float
    epsilon: float
    params: list = field(default_factory=list)

    @property
    def passed(self):
        return not any(p.flagged for p in self.params)

    @property
    def max_rel_error(self):
        return max((p.max_rel_error for p in self.params), default=0.0)

    def format(self):
        lines = [f"{'parameter':<32} {'entries':>8} {'max rel err':>12}  status"]
        for p in self.params:
            status = "FAIL" if p.flagged else "ok"
            lines.append(f"{p.name:<32} {p.checked:>8} {p.max_rel_error:>12.3e}  {status}")
        return "\n".join(lines)


def _value(out):
    if isinstance(out, Tensor):
        return float(out.data)
    return float(out)


def relative_error(analytic, numeric):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return np.abs(analytic - numeric) / denom


def finite_diff_check(f, params, epsilon=1e-5, tolerance=1e-5, max_entries=None, rng=None):
    """Compare backprop gradients of scalar ``f()`` with central differences.

    ``f`` is called with no arguments and must be deterministic; it reads the
    current values of ``params`` (tensors with ``requires_grad``). Each entry
    is perturbed in place by +/- ``epsilon``. Relative error per entry is
    ``|g_a - g_n| / max(|g_a|, |g_n|, 1e-12)``; a parameter is flagged when its
    worst entry exceeds ``tolerance``.

    ``max_entries`` caps the entries probed per parameter (a seeded random
    subset) for large tensors.
    """
    params = list(params)
    for p in params:
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
        p.grad = None
    loss = f()
    base = _value(loss)
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    with no_grad():
        again = _value(f())
    if again != base:
        raise NonDeterministicError(f"f() is not deterministic: {base!r} then {again!r}")

    rng = rng if rng is not None else np.random.default_rng(0)
    report = GradCheckReport(tolerance=tolerance, epsilon=epsilon)
    for idx_p, (p, g_a) in enumerate(zip(params, analytic)):
        flat = p.data.reshape(-1)
        n = flat.size
        if max_entries is not None and n > max_entries:
            entries = np.sort(rng.choice(n, size=max_entries, replace=False))
        else:
            entries = np.arange(n)
        numeric = np.empty(len(entries))
        with no_grad():
            for out_i, i in enumerate(entries):
                orig = flat[i]
                flat[i] = orig + epsilon
                plus = _value(f())
                flat[i] = orig - epsilon
                minus = _value(f())
                flat[i] = orig
                numeric[out_i] = (plus - minus) / (2.0 * epsilon)
        err = relative_error(g_a.reshape(-1)[entries].astype(np.float64), numeric)
        worst = int(np.argmax(err)) if err.size else 0
        max_err = float(err[worst]) if err.size else 0.0
        name = p.name or f"param[{idx_p}]"
        report.params.append(
            ParamCheck(
                name=name,
                max_rel_error=max_err,
                worst_index=tuple(int(v) for v in np.unravel_index(entries[worst], p.shape)) if err.size else (),
                checked=len(entries),
                flagged=max_err > tolerance,
            )
        )
    return report
