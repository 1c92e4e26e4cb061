import math

import numpy as np
import pytest

from vitcomer.autodiff import NonFiniteError, Tensor, parameter
from vitcomer.model import CoMer, CoMerConfig
from vitcomer.toydata import make_dataset
from vitcomer.train import SGD, DivergenceError, train, train_step

TOY32 = CoMerConfig.from_variant("toy", dtype="f32")


@pytest.fixture(scope="module")
def data():
    return make_dataset(0, 6, dtype=np.float32)


def test_sgd_momentum_rule():
    p = parameter(np.array([1.0, 2.0]))
    opt = SGD([p], lr=0.1, momentum=0.5)
    p.grad = np.array([1.0, -1.0])
    opt.step()
    np.testing.assert_allclose(p.data, [0.9, 2.1])
    opt.step()  # v = 0.5 * g + g
    np.testing.assert_allclose(p.data, [0.75, 2.25])


def test_gradient_clipping():
    p = parameter(np.array([0.0, 0.0]))
    opt = SGD([p], lr=1.0, momentum=0.0, clip_norm=1.0)
    p.grad = np.array([3.0, 4.0])
    opt.step()
    np.testing.assert_allclose(p.data, [-0.6, -0.8])
    assert opt.last_norm == 5.0


def test_zero_lr_leaves_parameters(data):
    model = CoMer(TOY32)
    before = {k: v.copy() for k, v in model.state_dict().items()}
    losses = train(model, *data, steps=3, lr=0.0, batch=2).losses
    assert all(np.array_equal(before[k], v) for k, v in model.state_dict().items())
    assert all(abs(v - math.log(4)) < 1e-6 for v in losses)


def test_step_updates_every_parameter(data):
    # float64: the first CTI updates are ~1e-8, below float32 resolution around 1.0
    model = CoMer(TOY32.with_(dtype="f64"))
    opt = SGD(model.parameters(), 0.05, 0.9, 1.0)
    before = {k: v.copy() for k, v in model.state_dict().items()}
    # zero-initialized parameters unlock the ones behind them one step at a time:
    # heads, then gates, then the gated CTI blocks with their zero offset and
    # weight projections, then the query projections that feed those
    for i in range(4):
        train_step(model, opt, data[0][i:i + 2].astype(np.float64), data[1][i:i + 2])
    for name, v in model.state_dict().items():
        assert not np.array_equal(before[name], v), name


def test_training_is_bitwise_reproducible(data):
    a = train(CoMer(TOY32), *data, steps=6, lr=0.05, batch=3).losses
    b = train(CoMer(TOY32), *data, steps=6, lr=0.05, batch=3).losses
    assert a == b and a[-1] < a[0]


def test_divergence_aborts(data):
    with pytest.raises(DivergenceError):
        train(CoMer(TOY32), *data, steps=30, lr=50.0, batch=2, clip_norm=None)


def test_non_finite_loss_aborts(data):
    model = CoMer(TOY32)
    model.head[0].weight.data[...] = np.nan
    with pytest.raises(NonFiniteError):
        train(model, *data, steps=1, lr=0.05, batch=1)
