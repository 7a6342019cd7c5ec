"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Per-kernel timings use shapes from the cnn-a forward and backward pass on a
batch of 64 images. The end-to-end row times one input gradient of a cnn-a
model on 256 images, run in a subprocess per backend because the backend is
fixed at import time.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from ngiattack import _pykernels

try:
    from ngiattack import _ckernels
except ImportError:
    _ckernels = None

E2E = """
import timeit, numpy as np
from ngiattack import BACKEND, models as M
spec = M.ModelSpec.from_arch("cnn-a", (1, 28, 28))
model = M.Classifier(M.ModelWeights(spec, M.init_params(spec, np.random.default_rng(0))))
x = np.random.default_rng(1).random((256, 1, 28, 28))
y = np.arange(256) % 10
model.loss_and_input_gradient(x, y)
print(BACKEND, min(timeit.repeat(lambda: model.loss_and_input_gradient(x, y), number=1, repeat={repeat})))
"""


def cases(rng):
    x = rng.normal(size=(64, 16, 32, 32))
    cols = _pykernels.im2col(x, 3, 3, 1)
    feat = rng.normal(size=(64, 32, 28, 28))
    pooled, arg = _pykernels.maxpool_forward(feat, 2)
    index = rng.integers(-1, 28 * 28, size=(64, 28, 28))
    img = rng.normal(size=(64, 1, 28, 28))
    return {
        "im2col 3x3": ("im2col", (x, 3, 3, 1)),
        "col2im 3x3": ("col2im", (cols, 32, 32, 1)),
        "maxpool fwd": ("maxpool_forward", (feat, 2)),
        "maxpool bwd": ("maxpool_backward", (pooled, arg, 28, 28, 2)),
        "gather": ("gather", (img, index)),
        "scatter_add": ("scatter_add", (img, index, 28, 28)),
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(np.array_equal(p, q) for p, q in zip(a, b))
    return np.array_equal(a, b)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    print(f"{'kernel':<14}{'python ms':>11}{'cython ms':>11}{'speedup':>9}  identical")
    for name, (fn, fargs) in cases(np.random.default_rng(0)).items():
        py = getattr(_pykernels, fn)
        t_py = min(timeit.repeat(lambda: py(*fargs), number=1, repeat=args.repeat)) * 1e3
        if _ckernels is None:
            print(f"{name:<14}{t_py:>11.2f}{'n/a':>11}{'':>9}  -")
            continue
        cy = getattr(_ckernels, fn)
        t_cy = min(timeit.repeat(lambda: cy(*fargs), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<14}{t_py:>11.2f}{t_cy:>11.2f}{t_py / t_cy:>8.1f}x  {_same(py(*fargs), cy(*fargs))}")

    print("\nend-to-end cnn-a input gradient, 256 images")
    for pure in ("1", "0"):
        env = dict(os.environ, NGIATTACK_PURE_PYTHON=pure)
        out = subprocess.run(
            [sys.executable, "-c", E2E.format(repeat=args.repeat)], env=env, capture_output=True, text=True, check=True
        ).stdout.split()
        print(f"  {out[0]:<8}{float(out[1]) * 1e3:8.1f} ms")


if __name__ == "__main__":
    main()
