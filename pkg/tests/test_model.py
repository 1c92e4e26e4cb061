import math

import numpy as np
import pytest

from vitcomer.autodiff import Tape, Tensor, no_tape
from vitcomer.cnn import MRFP
from vitcomer.cti import CTI
from vitcomer.model import CoMer, CoMerConfig, allocated_count, param_count
from vitcomer.toydata import make_dataset

TOY = CoMerConfig.from_variant("toy")


def _image(rng, cfg=TOY):
    return Tensor(rng.standard_normal((3, cfg.img_h, cfg.img_w)))


def test_toy_output_levels(rng):
    out = CoMer(TOY)(_image(rng))
    assert [lv.shape for lv in out.levels] == [(16, 8, 8), (16, 4, 4), (16, 2, 2)]
    assert out.vit.shape == (16, 16)


@pytest.mark.parametrize("hw", [(64, 96), (96, 96), (128, 64)])
def test_stride_contract_for_other_sizes(rng, hw):
    cfg = TOY.with_(img_h=hw[0], img_w=hw[1])
    out = CoMer(cfg)(_image(rng, cfg))
    h, w = hw
    assert [lv.shape[1:] for lv in out.levels] == [(h // s, w // s) for s in (8, 16, 32)]


def test_forward_is_deterministic(rng):
    img = _image(rng)
    a = CoMer(TOY)(img).levels
    b = CoMer(TOY)(img).levels
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a, b))


def test_config_invariants():
    with pytest.raises(ValueError):
        TOY.with_(depth=5)
    with pytest.raises(ValueError):
        TOY.with_(img_h=65)
    with pytest.raises(ValueError):
        TOY.with_(mrfp_kernels=(3, 5, 7))  # D' = 8 is not divisible by 3
    with pytest.raises(ValueError):
        CoMerConfig.from_variant("XL")


@pytest.mark.parametrize("name, dims", [("T", (12, 192, 3)), ("S", (12, 384, 6)),
                                        ("B", (12, 768, 12)), ("L", (24, 1024, 16))])
def test_named_variants(name, dims):
    cfg = CoMerConfig.from_variant(name)
    assert (cfg.depth, cfg.dim, cfg.heads, cfg.stages) == (*dims, 4)


def test_analytic_count_equals_allocation():
    counts = param_count(TOY)
    alloc = allocated_count(CoMer(TOY))
    for key, n in alloc.items():
        assert counts[key] == n, key
    assert counts["total"] == 48750


def test_toggle_accounting_is_predicted():
    none = TOY.with_(mrfp_enabled=False, cti_to_vit=False, cti_to_cnn=False)
    d, n = TOY.dim, TOY.stages
    c0 = param_count(none)["total"]
    c1 = param_count(none.with_(mrfp_enabled=True))["total"]
    c2 = param_count(none.with_(mrfp_enabled=True, cti_to_vit=True))["total"]
    c3 = param_count(TOY)["total"]
    cti = (d, TOY.cti_heads, TOY.cti_points, TOY.cti_ffn_ratio, TOY.cti_value_ratio)
    assert c1 - c0 == n * MRFP.count(d, TOY.mrfp_hidden, TOY.mrfp_kernels)
    assert c2 - c1 == n * CTI.count(*cti, gated=True)
    assert c3 - c2 == n * CTI.count(*cti, gated=False)
    counts = param_count(none)
    assert counts["total"] == counts["vit"] + counts["stem"] + counts["head"]


def test_kernel_set_count_grows():
    base = TOY.with_(depth=12, dim=24)
    totals = [param_count(base.with_(mrfp_kernels=ks))["total"]
              for ks in ((3,), (3, 5), (3, 5, 7), (3, 5, 7, 9))]
    assert all(b > a for a, b in zip(totals, totals[1:]))


def test_initial_loss_is_ln4():
    x, y = make_dataset(0, 2)
    model = CoMer(TOY)
    with no_tape():
        for img, lab in zip(x, y):
            assert abs(model.loss(Tensor(img), lab).item() - math.log(4)) < 1e-12


def test_every_parameter_gets_a_gradient(rng):
    model = CoMer(TOY)
    for _, p in model.named_parameters():
        p.data = p.data + rng.normal(0, 0.05, p.shape)
    x, y = make_dataset(1, 1)
    with Tape() as tape:
        tape.backward(model.loss(Tensor(x[0]), y[0]))
    for name, p in model.named_parameters():
        assert p.grad is not None and p.grad.shape == p.shape, name
        assert np.any(p.grad != 0), name


def test_transparency_without_cnn_injection(rng):
    cfg = TOY.with_(cti_to_cnn=False)
    model = CoMer(cfg)
    img = _image(rng)
    ours = model(img, trace=True).trace
    ref = []
    model.plain_vit()(img, ref)
    assert all(np.array_equal(a, b) for a, b in zip(ours, ref))


def test_nonzero_gate_breaks_transparency(rng):
    model = CoMer(TOY)
    for a in model.alphas():
        a.data[...] = 0.1
    img = _image(rng)
    ours = model(img, trace=True).trace
    ref = []
    model.plain_vit()(img, ref)
    assert np.array_equal(ours[0], ref[0]) and not np.array_equal(ours[-1], ref[-1])


def test_quarter_level_flag(rng):
    cfg = TOY.with_(quarter_level=True)
    model = CoMer(cfg)
    out = model(_image(rng))
    assert out.quarter.shape == (16, 16, 16)
    assert param_count(cfg)["quarter"] == 16 * 16 * 4 + 16 == model.quarter.num_parameters()


def test_f32_model(rng):
    cfg = TOY.with_(dtype="f32")
    model = CoMer(cfg)
    out = model(Tensor(rng.standard_normal((3, 64, 64)).astype(np.float32)))
    assert all(lv.dtype == np.float32 for lv in out.levels)


def test_config_text_lists_every_field():
    text = TOY.to_text()
    assert "mrfp_kernels = 3,5" in text and "cti_to_vit = true" in text
