import numpy as np
import pytest

from models import OptimizerName
from nn.optim import SGD, Adam, build_optimizer
from nn.tensor import Parameter

def with_grad(value, grad):
    p = Parameter(np.array(value, dtype=float))
    p.grad = np.array(grad, dtype=float)
    return p

def test_sgd_momentum_accumulates():
    p = with_grad([1.0], [0.5])
    opt = SGD([p], lr=0.1, momentum=0.9)
    opt.step()
    np.testing.assert_allclose(p.data, [0.95])
    opt.step()
    np.testing.assert_allclose(p.data, [0.95 - 0.1 * (0.9 * 0.5 + 0.5)])

def test_adam_first_step_is_lr_times_sign():
    p = with_grad([1.0, -2.0], [3.0, -0.01])
    Adam([p], lr=0.01).step()
    np.testing.assert_allclose(p.data, [0.99, -1.99], atol=1e-6)

@pytest.mark.parametrize("name", list(OptimizerName))
def test_zero_learning_rate_leaves_parameters(name):
    p = with_grad([1.0, 2.0], [0.3, -0.7])
    opt = build_optimizer(name, [p], 0.0)
    for _ in range(3):
        opt.step()
    np.testing.assert_array_equal(p.data, [1.0, 2.0])

def test_missing_gradient_is_skipped():
    p = Parameter(np.ones(2))
    Adam([p], lr=0.1).step()
    np.testing.assert_array_equal(p.data, np.ones(2))

def test_negative_learning_rate():
    with pytest.raises(ValueError):
        SGD([Parameter(np.ones(1))], lr=-1.0)

def test_float32_parameters_stay_float32():
    p = Parameter(np.ones(3, dtype=np.float32))
    p.grad = np.full(3, 0.5, dtype=np.float32)
    Adam([p], lr=0.1).step()
    assert p.dtype == np.float32
