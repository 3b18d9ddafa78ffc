import numpy as np
import pytest

from dcardnet.optim import CosineSchedule, NesterovSGD, cosine_lr, sgd_nesterov_step
from dcardnet.tensor import Parameter


def test_cosine_endpoints():
    assert cosine_lr(0) == 0.01
    assert cosine_lr(6000) == 0.01 * 0.03
    assert cosine_lr(8000) == cosine_lr(6000)
    assert abs(cosine_lr(3000) - 0.00515) <= 1e-9


def test_cosine_is_monotone_and_validated():
    lrs = [cosine_lr(s) for s in range(0, 6001, 100)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        cosine_lr(-1)
    with pytest.raises(ValueError):
        cosine_lr(0, CosineSchedule(step_stop=0))


def test_zero_momentum_is_plain_sgd():
    rng = np.random.default_rng(0)
    p = Parameter(rng.standard_normal(5), "p", dtype=np.float64)
    start = p.data.copy()
    g = rng.standard_normal(5)
    p.grad = g.copy()
    sgd_nesterov_step([p], [np.zeros(5)], 0.0, 0.1)
    np.testing.assert_array_equal(p.data, start - 0.1 * g)
    assert p.grad is None


def test_nesterov_two_steps_by_hand():
    p = Parameter(np.array([1.0]), "p", dtype=np.float64)
    opt = NesterovSGD([p], momentum=0.9)
    p.grad = np.array([1.0])
    opt.step(0.1)
    # v = -0.1; p = 1 + 0.9 * -0.1 - 0.1
    assert p.data[0] == pytest.approx(0.81)
    p.grad = np.array([1.0])
    opt.step(0.1)
    # v = -0.19; p = 0.81 - 0.171 - 0.1
    assert p.data[0] == pytest.approx(0.539)


def test_quadratic_converges():
    p = Parameter(np.array([3.0, -2.0]), "p", dtype=np.float64)
    opt = NesterovSGD([p], momentum=0.9)
    for _ in range(500):
        p.grad = 2 * p.data
        opt.step(0.01)
    assert np.all(np.abs(p.data) < 1e-3)


def test_skips_missing_gradients_and_checks_shape():
    p = Parameter(np.ones(2), "p", dtype=np.float64)
    opt = NesterovSGD([p])
    opt.step(0.1)
    np.testing.assert_array_equal(p.data, 1.0)
    p.grad = np.ones(3)
    with pytest.raises(ValueError):
        opt.step(0.1)
    with pytest.raises(ValueError):
        NesterovSGD([p], momentum=1.0)
