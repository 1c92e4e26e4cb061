import numpy as np

from vitcomer.autodiff import Tensor, reduce_sum
from vitcomer.gradcheck import FLOOR, avoid_sampling_kinks, check_function, group_report, rel_error
from vitcomer.harness import gradcheck_model
from vitcomer.model import CoMer, CoMerConfig


def test_rel_error_definition():
    assert rel_error(1.0, 1.0) == 0.0
    np.testing.assert_allclose(rel_error(2.0, 1.0), 0.5)
    np.testing.assert_allclose(rel_error(0.0, 1e-12), 1e-12 / FLOOR)


def test_detects_a_wrong_gradient():
    from vitcomer.autodiff import record

    def bad_square(x):
        return record("bad", (x,), x.data ** 2, lambda g: (g * 3 * x.data,))

    assert check_function(bad_square, [np.array([0.7, -1.3])]) > 0.1


def test_group_report_strips_indices():
    groups = group_report({"a.0.w": 1e-6, "a.1.w": 3e-6, "b": 2e-7})
    assert groups == {"a.w": 3e-6, "b": 2e-7}


def test_kink_avoidance_margin():
    model = CoMer(CoMerConfig.from_variant("toy"))
    img = Tensor(np.random.default_rng(0).standard_normal((3, 64, 64)))
    margin = avoid_sampling_kinks(model, lambda m: m.forward(img))
    assert margin > 0.01
    for i in range(model.cfg.stages):
        pix = model.cti_to_cnn[i].attn.last_pix
        frac = pix % 1.0
        assert np.minimum(frac, 1 - frac).min() >= margin - 1e-12


def test_zero_tolerance_fails():
    rep = gradcheck_model(CoMerConfig.from_variant("toy").with_(depth=2, stages=1), tol=0.0,
                          samples=1)
    assert not rep.ok
