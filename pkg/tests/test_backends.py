import os
import runpy
import subprocess
import sys
from pathlib import Path

import pytest

from vitcomer import kernels

ROOT = Path(__file__).resolve().parents[1]


def _backend_under(value):
    env = {k: v for k, v in os.environ.items() if k != "VITCOMER_KERNELS"}
    if value is not None:
        env["VITCOMER_KERNELS"] = value
    return subprocess.run([sys.executable, "-c", "from vitcomer import kernels; print(kernels.backend())"],
                          capture_output=True, text=True, env=env)


def test_env_flag_selects_numpy():
    proc = _backend_under("numpy")
    assert proc.returncode == 0 and proc.stdout.strip() == "numpy"


def test_default_backend_is_numba():
    assert _backend_under(None).stdout.strip() == "numba"


def test_unknown_backend_fails_at_import():
    proc = _backend_under("cuda")
    assert proc.returncode != 0 and "unavailable" in proc.stderr


def test_use_rejects_unknown():
    with pytest.raises(ValueError):
        kernels.use("fortran")


def test_benchmark_runs(capsys):
    bench = runpy.run_path(str(ROOT / "benchmarks" / "bench_kernels.py"))
    before = kernels.backend()
    bench["run"]("toy", 1)
    assert kernels.backend() == before
    rows = capsys.readouterr().out.strip().splitlines()[2:]
    assert len(rows) == 6
    # the two backends must agree on every benchmarked kernel
    assert all(float(r.split()[-1]) < 1e-10 for r in rows)
