import math
import subprocess
import sys

import numpy as np
import pytest

from vitcomer.checkpoint import save
from vitcomer.cli import main
from vitcomer.model import CoMer, CoMerConfig


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def lines(text):
    return [ln.split(": ") for ln in text.strip().splitlines()]


@pytest.fixture
def cfg_file(tmp_path):
    def write(text):
        p = tmp_path / "run.cfg"
        p.write_text(text, encoding="utf-8")
        return str(p)
    return write


def test_report_lines_have_four_fields(capsys):
    code, out, _ = run(capsys, "shapes")
    assert code == 0
    assert all(len(f) == 4 for f in lines(out))
    assert "level_1/8: PASS: 16x8x8: 16x8x8" in out
    assert "level_1/32: PASS: 16x2x2: 16x2x2" in out


def test_shapes_96(capsys, cfg_file):
    code, out, _ = run(capsys, "shapes", "--config", cfg_file("img_h = 96\nimg_w = 96\n"))
    assert code == 0
    for s, n in ((8, 144), (16, 36), (32, 9)):
        assert f"tokens_1/{s}: PASS: {n}: {n}" in out


def test_indivisible_height_is_usage_error(capsys, cfg_file):
    code, out, err = run(capsys, "shapes", "--config", cfg_file("img_h = 65\n"))
    assert code == 2 and out == "" and "divisible by 32" in err


def test_unknown_key_is_usage_error(capsys, cfg_file):
    code, _, err = run(capsys, "shapes", "--config", cfg_file("kernel_sizes = 3\n"))
    assert code == 2 and "unknown" in err


def test_bad_flag_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["shapes", "--dtype", "f16"])
    assert exc.value.code == 2


def test_gradcheck_zero_tolerance_fails(capsys, cfg_file):
    cfg = cfg_file("depth = 2\nstages = 1\n")
    code, out, _ = run(capsys, "gradcheck", "--config", cfg, "--tol", "0", "--samples", "1")
    assert code == 1 and ": FAIL: " in out
    assert "alpha_grad[0]: PASS" in out


def test_gradcheck_small_config_passes(capsys, cfg_file):
    cfg = cfg_file("depth = 2\nstages = 1\n")
    code, out, _ = run(capsys, "gradcheck", "--config", cfg, "--samples", "2")
    assert code == 0, out


def test_equiv_init(capsys, cfg_file):
    code, out, _ = run(capsys, "equiv-init")
    assert code == 0 and "layer_4: PASS: max|d|=0.000e+00: 0" in out
    code, out, _ = run(capsys, "equiv-init", "--set-alpha", "0.1")
    assert code == 1 and "first_mismatch_layer: INFO: 1" in out
    code, _, _ = run(capsys, "equiv-init", "--set-alpha", "0.1",
                     "--config", cfg_file("cti_to_vit = false\n"))
    assert code == 0


def test_oracle(capsys):
    code, out, _ = run(capsys, "oracle", "--seeds", "2")
    assert code == 0
    names = [f[0] for f in lines(out)]
    assert names == ["oracle[deform_attn]", "oracle[conv2d]", "oracle[mhsa]", "oracle[mrfp]",
                     "oracle[zero_offset_reference]"]


def test_params(capsys):
    code, out, _ = run(capsys, "params", "--variant", "T")
    assert code == 0 and "overhead_vs_3M: PASS" in out and "plain_vit: INFO: " in out
    code, out, _ = run(capsys, "params")
    assert code == 0 and "allocated[total]: PASS: 48750: 48750" in out


def _curve(path):
    rows = path.read_text().strip().splitlines()
    assert rows[0] == "step,loss"
    return [float(r.split(",")[1]) for r in rows[1:]]


def test_train_toy_short_run(capsys, tmp_path, cfg_file):
    cfg = cfg_file("train_images = 4\nbatch = 2\n")
    code, out, _ = run(capsys, "train-toy", "--config", cfg, "--steps", "3",
                       "--out", str(tmp_path / "a"))
    assert code == 1 and "final_loss: FAIL" in out  # three steps cannot reach the target
    assert (tmp_path / "a" / "toy.vcmr").exists()
    run(capsys, "train-toy", "--config", cfg, "--steps", "3", "--out", str(tmp_path / "b"))
    a, b = _curve(tmp_path / "a" / "loss.csv"), _curve(tmp_path / "b" / "loss.csv")
    assert len(a) == 3 and a == b


def test_train_toy_zero_lr_is_flat(capsys, tmp_path, cfg_file):
    cfg = cfg_file("train_images = 4\nbatch = 2\n")
    run(capsys, "train-toy", "--config", cfg, "--steps", "4", "--lr", "0", "--out", str(tmp_path))
    curve = _curve(tmp_path / "loss.csv")
    assert all(abs(v - math.log(4)) < 1e-6 for v in curve)


def test_export_features(capsys, tmp_path):
    ckpt = tmp_path / "m.vcmr"
    save(CoMer(CoMerConfig.from_variant("toy")), ckpt)
    code, out, _ = run(capsys, "export-features", "--checkpoint", str(ckpt), "--image", "shapes",
                       "--out", str(tmp_path / "maps"))
    assert code == 0
    files = sorted(p.name for p in (tmp_path / "maps").iterdir())
    assert files == sorted(f"{b}_{s}.pgm" for b in ("vit", "cnn", "fused") for s in (8, 16, 32))
    raw = (tmp_path / "maps" / "fused_8.pgm").read_bytes()
    assert raw.startswith(b"P5\n8 8\n255\n") and len(raw) == len(b"P5\n8 8\n255\n") + 64


def test_export_from_ppm(capsys, tmp_path):
    ckpt = tmp_path / "m.vcmr"
    save(CoMer(CoMerConfig.from_variant("toy")), ckpt)
    img = np.random.default_rng(0).integers(0, 256, (64, 96, 3), dtype=np.uint8)
    (tmp_path / "in.ppm").write_bytes(b"P6\n96 64\n255\n" + img.tobytes())
    code, _, _ = run(capsys, "export-features", "--checkpoint", str(ckpt), "--image",
                     str(tmp_path / "in.ppm"), "--out", str(tmp_path / "maps"))
    assert code == 0
    assert (tmp_path / "maps" / "cnn_32.pgm").read_bytes().startswith(b"P5\n3 2\n255\n")


def test_export_unreadable_inputs(capsys, tmp_path):
    code, _, err = run(capsys, "export-features", "--checkpoint", str(tmp_path / "none.vcmr"),
                       "--image", "shapes")
    assert code == 2 and "checkpoint" in err


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "vitcomer.cli", "params", "--variant", "S"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "overhead_vs_6M: PASS" in proc.stdout
