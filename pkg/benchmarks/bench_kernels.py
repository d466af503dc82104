"""Compiled kernels vs the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Times each kernel on shapes typical of a round (batch 16-200, width 16,
20 clients x 200 items x 10 classes for the KL matrix), checks that both
backends agree, then times one end-to-end synthesis per backend in a
subprocess so the import-time backend switch is honoured.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from distfl import _kernels_py

try:
    from distfl import _kernels as _compiled
except ImportError:
    _compiled = None

SYNTH_SNIPPET = """
import time, numpy as np
from distfl import kernels, nn
from distfl.extraction import ExtractionConfig, synthesize
m = nn.init_model(16, [16, 16], 10, np.random.default_rng(0))
t = time.perf_counter()
synthesize(m, ExtractionConfig(z=200, synth_steps=200))
print(kernels.BACKEND, time.perf_counter() - t)
"""


def cases(rng):
    x = rng.normal(size=(200, 16))
    gamma = rng.uniform(0.5, 1.5, 16)
    beta = rng.normal(size=16)
    _, xhat, _, _, inv_std = _kernels_py.bn_forward_train(x, gamma, beta, 1e-5)
    dy = rng.normal(size=x.shape)
    resp = rng.dirichlet(np.ones(10), size=(20, 200)).reshape(20, -1)
    return {
        "batch_mean_var": (x,),
        "bn_forward_train": (x, gamma, beta, 1e-5),
        "bn_backward_train": (dy, xhat, gamma, inv_std),
        "kl_matrix": (resp, 1e-12),
    }


def _flat(out):
    return out if isinstance(out, tuple) else (out,)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--repeat", type=int, default=200)
    args = p.parse_args(argv)
    if _compiled is None:
        print("compiled extension not built; run `pip install -e .` with Cython available")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20}{'numpy us':>12}{'cython us':>12}{'speedup':>10}")
    for name, inputs in cases(rng).items():
        py_fn, c_fn = getattr(_kernels_py, name), getattr(_compiled, name)
        for a, b in zip(_flat(py_fn(*inputs)), _flat(c_fn(*inputs))):
            np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)
        t_py = min(timeit.repeat(lambda: py_fn(*inputs), number=args.repeat, repeat=3)) / args.repeat
        t_c = min(timeit.repeat(lambda: c_fn(*inputs), number=args.repeat, repeat=3)) / args.repeat
        print(f"{name:<20}{t_py * 1e6:>12.1f}{t_c * 1e6:>12.1f}{t_py / t_c:>9.2f}x")

    print("\nsynthesis, z=200, 200 steps:")
    for pure in ("0", "1"):
        env = dict(os.environ, DISTFL_PURE_PYTHON=pure)
        out = subprocess.run([sys.executable, "-c", SYNTH_SNIPPET], env=env, capture_output=True, text=True, check=True)
        backend, secs = out.stdout.split()
        print(f"  {backend:<8}{float(secs):8.3f} s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
