"""Time the numba kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Kernels are timed in-process (both implementations are importable side by
side).  The full training step is timed in two subprocesses, one with
``FEDGIN_DISABLE_NUMBA=1``, because the backend is chosen at import time.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from fedgin import kernels

STEP_SNIPPET = """
import timeit, numpy as np
from fedgin import kernels
from fedgin.fedcore import FederationConfig, train_step
from fedgin.model import UNetConfig, init_params
from fedgin.optim import AdamWState
cfg = FederationConfig(unet=UNetConfig())
rng = np.random.default_rng(0)
p = init_params(cfg.unet, rng)
x = rng.standard_normal((8, 1, 32, 32)).astype(np.float32)
y = rng.integers(0, 3, (8, 32, 32))
opt = AdamWState(lr=1e-4)
train_step(p, x, y, cfg, opt, None)
t = min(timeit.repeat(lambda: train_step(p, x, y, cfg, opt, None), number=1, repeat={repeat}))
print(kernels.backend(), t)
"""


def best(fn, repeat):
    fn()  # warm-up (numba compiles here)
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_cases():
    rng = np.random.default_rng(0)
    xp = rng.standard_normal((8, 16, 34, 34)).astype(np.float32)
    ho = wo = 32
    cols = kernels.im2col_numpy(xp, 3, 1, ho, wo)
    x = rng.standard_normal((8, 16, 32, 32)).astype(np.float32)
    out, idx = kernels.maxpool2_numpy(x)
    g = rng.standard_normal(out.shape).astype(np.float32)
    return {
        "im2col 8x16x32x32 k3": (lambda f: lambda: f(xp, 3, 1, ho, wo), "im2col"),
        "col2im 8x16x32x32 k3": (lambda f: lambda: f(cols, xp.shape, 3, 1, ho, wo), "col2im"),
        "maxpool2 8x16x32x32": (lambda f: lambda: f(x), "maxpool2"),
        "maxpool2 backward": (lambda f: lambda: f(g, idx), "maxpool2_backward"),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)

    print(f"{'case':28s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, (make, base) in kernel_cases().items():
        t_np = best(make(getattr(kernels, f"{base}_numpy")), args.repeat)
        if kernels.HAS_NUMBA:
            t_nb = best(make(getattr(kernels, f"{base}_numba")), args.repeat)
            print(f"{name:28s} {t_np * 1e3:10.3f} {t_nb * 1e3:10.3f} {t_np / t_nb:7.2f}x")
        else:
            print(f"{name:28s} {t_np * 1e3:10.3f} {'n/a':>10s}")

    times = {}
    for disabled in ("1", "0"):
        env = dict(os.environ, FEDGIN_DISABLE_NUMBA=disabled)
        res = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(repeat=max(3, args.repeat // 4))],
                             env=env, capture_output=True, text=True, check=True)
        backend, t = res.stdout.split()
        times[backend] = float(t)
    line = "  ".join(f"{b} {t * 1e3:.1f} ms" for b, t in times.items())
    print(f"train step (batch 8, 32x32, default U-Net): {line}")


if __name__ == "__main__":
    main()
