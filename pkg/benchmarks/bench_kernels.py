"""Compare the numba kernels against the numpy / scipy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5]

Also times one conv3 backward pass end to end under each backend by
re-running itself in a subprocess with SIPNET_NUMBA set.
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def kernel_table(repeat):
    from sipnet import _kernels as k

    if not k.HAVE_NUMBA:
        print("numba unavailable; nothing to compare")
        return
    rng = np.random.default_rng(0)
    rows = []
    for C, G in ((16, (8, 24, 24)), (64, (4, 12, 12)), (32, (16, 48, 48))):
        cols = rng.standard_normal((C, 3, 3, 3) + G).astype(np.float32)
        pad = tuple(g + 2 for g in G)
        ref = k._col2im_numpy(cols, np.zeros((C,) + pad, np.float32), (1, 1, 1))
        got = k._col2im3_nb(cols, np.zeros((C,) + pad, np.float32), 1, 1, 1)
        assert np.allclose(ref, got, atol=1e-5)
        t_np = best_of(lambda: k._col2im_numpy(cols, np.zeros((C,) + pad, np.float32), (1, 1, 1)), repeat)
        t_nb = best_of(lambda: k._col2im3_nb(cols, np.zeros((C,) + pad, np.float32), 1, 1, 1), repeat)
        rows.append((f"col2im C={C} grid={G}", t_np, t_nb))
    for shape in ((16, 96, 96), (64, 128, 128)):
        mask = rng.random(shape) < 0.01
        sp = (1.5, 0.625, 0.625)
        assert np.allclose(k._edt_scipy(mask, sp), k._edt_numba(mask, sp), rtol=1e-9)
        t_np = best_of(lambda: k._edt_scipy(mask, sp), repeat)
        t_nb = best_of(lambda: k._edt_numba(mask, sp), repeat)
        rows.append((f"squared_edt {shape}", t_np, t_nb))
    print(f"{'kernel':<40}{'fallback s':>12}{'numba s':>12}{'speedup':>10}")
    for name, a, b in rows:
        print(f"{name:<40}{a:>12.4f}{b:>12.4f}{a / b:>10.2f}")


def conv_backward_time(repeat):
    from sipnet import ops
    from sipnet._kernels import backend
    from sipnet.tensor import Tensor, backward

    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((4, 16, 16, 32, 32)).astype(np.float32), requires_grad=True)
    w = Tensor(rng.standard_normal((16, 16, 3, 3, 3)).astype(np.float32) * 0.1, requires_grad=True)

    def step():
        backward(ops.sum(ops.conv3(x, w, None, 1, 1)))

    step()  # compile / warm up
    print(f"{backend()} {best_of(step, repeat):.4f}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--conv-only", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.conv_only:
        conv_backward_time(args.repeat)
        return
    kernel_table(args.repeat)
    print()
    print("conv3 forward+backward, x (4,16,16,32,32), w (16,16,3,3,3):")
    for flag in ("1", "0"):
        env = dict(os.environ, SIPNET_NUMBA=flag)
        out = subprocess.run(
            [sys.executable, __file__, "--conv-only", "--repeat", str(args.repeat)],
            env=env, capture_output=True, text=True, check=True,
        )
        name, t = out.stdout.split()
        print(f"  {name:<8}{float(t):.4f} s")


if __name__ == "__main__":
    main()
