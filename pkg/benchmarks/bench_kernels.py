"""Compiled vs numpy convolution kernels.

Kernel timings use both implementations side by side in one process. The
end-to-end timing trains one teacher in a subprocess per backend, since the
backend is fixed at import (``FEDSA_PURE_PYTHON=1`` forces numpy).

    python benchmarks/bench_kernels.py [--repeat 200]
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from fedsa import _kernels_py as numpy_kernels

try:
    from fedsa import _kernels as compiled_kernels
except ImportError:
    compiled_kernels = None

# (input NHWC, kernel) pairs that occur in the reference architectures
SHAPES = [
    ((16, 12, 12, 1), (3, 3, 1, 8)),
    ((16, 6, 6, 8), (3, 3, 8, 16)),
    ((16, 6, 6, 12), (3, 3, 12, 24)),
    ((16, 3, 3, 16), (1, 1, 16, 8)),
    ((200, 12, 12, 1), (3, 3, 1, 8)),
    ((200, 6, 6, 8), (3, 3, 8, 16)),
]

E2E = """
import time
from fedsa import archs, data as D, federation as F, nn, BACKEND
task = D.standard_scenario().teachers[0]
spec = archs.small()
train, _ = D.synth_generate(task, 0)
params = nn.build(spec, 0)
t = time.perf_counter()
F.train_supervised(params, spec, train, 5, 0.05, F.rng_for(0), 16)
print(BACKEND, time.perf_counter() - t)
"""


def time_kernels(mod, x, w, g, repeat):
    def step():
        mod.conv2d_forward(x, w)
        mod.conv2d_backward_input(g, w)
        mod.conv2d_backward_weight(x, g, w.shape)
    return min(timeit.repeat(step, number=repeat, repeat=3)) / repeat


def end_to_end(pure: bool) -> tuple[str, float]:
    env = dict(os.environ, FEDSA_PURE_PYTHON="1" if pure else "0")
    out = subprocess.run([sys.executable, "-c", E2E], env=env, capture_output=True, text=True, check=True)
    name, secs = out.stdout.split()
    return name, float(secs)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args(argv)
    if compiled_kernels is None:
        print("compiled extension not built; only the numpy kernels are available")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'input':<18}{'kernel':<16}{'numpy us':>10}{'compiled us':>13}{'speedup':>9}")
    for xs, ws in SHAPES:
        x = rng.random(xs)
        w = rng.normal(size=ws)
        g = rng.normal(size=xs[:3] + (ws[3],))
        t_np = time_kernels(numpy_kernels, x, w, g, args.repeat)
        t_c = time_kernels(compiled_kernels, x, w, g, args.repeat)
        print(f"{str(xs):<18}{str(ws):<16}{t_np * 1e6:>10.1f}{t_c * 1e6:>13.1f}{t_np / t_c:>8.2f}x")
    print("\nend to end, 5 epochs of teacher training (400 samples):")
    for pure in (True, False):
        name, secs = end_to_end(pure)
        print(f"  {name:<8} {secs:.2f} s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
