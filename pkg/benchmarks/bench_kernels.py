"""Time the numba and numpy kernel backends on model-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--size toy|small]

Each kernel is warmed up once per backend (numba compiles on first call),
then timed as the best of ``--repeat`` runs. Outputs of the two backends are
compared so a speedup is never reported for a wrong answer.
"""
import argparse
import time

import numpy as np

from vitcomer import kernels

SIZES = {
    # (image side, width, deformable heads, points)
    "toy": (64, 16, 4, 4),
    "small": (224, 96, 8, 4),
}


def conv_cases(rng, side, dim):
    h = side // 8
    yield "conv3x3 stem s2", (rng.standard_normal((3, side, side)),
                              rng.standard_normal((dim // 2, 3, 3, 3)), 2, 1, 1)
    yield "conv depthwise 5x5", (rng.standard_normal((dim, h, h)),
                                 rng.standard_normal((dim, 1, 5, 5)), 1, 2, dim)


def deform_case(rng, side, dim, heads, points):
    shapes = np.array([(side // s, side // s) for s in (8, 16, 32)], dtype=np.int64)
    sizes = shapes.prod(axis=1)
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
    q = int(sizes.sum())
    value = rng.standard_normal((q, heads, max(dim // 2 // heads, 1)))
    pix = rng.uniform(-1.0, side / 8, (q, heads, 3, points, 2))
    attw = rng.random((q, heads, 3, points))
    return value, shapes, starts, pix, attw


def best_time(fn, args, repeat):
    fn(*args)  # warm-up / compile
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def run(size, repeat):
    side, dim, heads, points = SIZES[size]
    rng = np.random.default_rng(0)
    jobs = []
    for name, (x, w, stride, pad, groups) in conv_cases(rng, side, dim):
        out = kernels.conv2d_forward(x, w, stride, pad, groups)
        g = rng.standard_normal(out.shape)
        jobs.append((name + " fwd", kernels.conv2d_forward, (x, w, stride, pad, groups)))
        jobs.append((name + " bwd", kernels.conv2d_backward, (x, w, g, stride, pad, groups)))
    args = deform_case(rng, side, dim, heads, points)
    g = rng.standard_normal(kernels.deform_forward(*args).shape)
    jobs.append(("deform sampling fwd", kernels.deform_forward, args))
    jobs.append(("deform sampling bwd", kernels.deform_backward, args + (g,)))

    backends = kernels.available()
    original = kernels.backend()
    print(f"size={size} repeat={repeat} backends={','.join(backends)}")
    print(f"{'kernel':<26}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}{'max|d|':>11}")
    for name, fn, fargs in jobs:
        times, outs = {}, {}
        try:
            for b in backends:
                kernels.use(b)
                times[b] = best_time(fn, fargs, repeat)
                outs[b] = fn(*fargs)
        finally:
            kernels.use(original)
        diff = 0.0
        if len(backends) == 2:
            pair = [o if isinstance(o, tuple) else (o,) for o in outs.values()]
            diff = max(float(np.abs(a - b).max()) for a, b in zip(*pair))
        speed = times["numpy"] / times["numba"] if "numba" in times else float("nan")
        print(f"{name:<26}" + "".join(f"{times[b] * 1e3:>10.3f}ms" for b in backends)
              + f"{speed:>9.1f}x{diff:>11.1e}")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--size", choices=sorted(SIZES), default="toy")
    args = parser.parse_args()
    run(args.size, args.repeat)


if __name__ == "__main__":
    main()
