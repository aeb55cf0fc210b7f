"""Compiled kernels vs the numpy fallback on the shapes a desk-scale training step uses.

    python benchmarks/bench_kernels.py            # per-kernel timings
    python benchmarks/bench_kernels.py --step     # also one forward+backward per backend
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from morphoformer import _kernels_py

try:
    from morphoformer import _kernels
except ImportError:
    _kernels = None

B, TOK, D0, HEADS = 64, 81, 96, 3


def cases(rng):
    x = rng.normal(size=(B * TOK, D0))
    hidden = rng.normal(size=(B * TOK, 4 * D0))
    scores = rng.normal(size=(B * HEADS * TOK, TOK))
    gamma, beta = rng.normal(size=D0), rng.normal(size=D0)
    r = rng.normal(scale=3.0, size=B)
    codes = rng.integers(-1, 3, size=(120, 120)).astype(np.int8)
    centers = np.argwhere(codes == 2)[:2000].astype(np.int64)

    def run(k):
        y, xhat, rstd = k.layernorm_fwd(x, gamma, beta, 1e-5)
        sm = k.softmax_fwd(scores)
        return {
            "gelu_fwd": lambda: k.gelu_fwd(hidden),
            "gelu_bwd": lambda: k.gelu_bwd(hidden, hidden),
            "layernorm_fwd": lambda: k.layernorm_fwd(x, gamma, beta, 1e-5),
            "layernorm_bwd": lambda: k.layernorm_bwd(x, xhat, rstd, gamma),
            "softmax_fwd": lambda: k.softmax_fwd(scores),
            "softmax_bwd": lambda: k.softmax_bwd(sm, scores),
            "huber_fwd": lambda: k.huber_fwd(r, 2.0),
            "window_counts": lambda: k.window_counts(codes, centers, 4, 3),
        }
    return run


def best_of(fn, repeat):
    n, _ = timeit.Timer(fn).autorange()
    return min(timeit.repeat(fn, number=n, repeat=repeat)) / n


STEP_SNIPPET = """
import time, numpy as np
from morphoformer import kernels, tensor as T
from morphoformer.model import MorphoFormer, desk_config
from morphoformer.training import total_loss
m = MorphoFormer(desk_config(), seed=0)
x = np.random.default_rng(0).normal(size=(%d, 9, 90, 90))
y = np.tile([[0.3, 10.0]], (len(x), 1))
best = 1e9
for _ in range(3):
    t = time.perf_counter()
    with T.Tape() as tape:
        loss, _ = total_loss(m.forward(x), y, m.params["loss.log_var_h"], m.params["loss.log_var_f"], 0.2)
    T.backward(tape, loss)
    best = min(best, time.perf_counter() - t)
print(kernels.BACKEND, best)
"""


def step_times(batch):
    out = {}
    for pure in ("1", "0"):
        env = dict(os.environ, MORPHOFORMER_PURE_PYTHON=pure)
        res = subprocess.run([sys.executable, "-c", STEP_SNIPPET % batch], env=env, capture_output=True,
                             text=True, check=True)
        name, secs = res.stdout.split()
        out[name] = float(secs)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--step", action="store_true", help="time a full training step under each backend")
    ap.add_argument("--batch", type=int, default=16, help="batch size for --step")
    args = ap.parse_args()
    if _kernels is None:
        sys.exit("compiled extension not built; run `pip install -e . --no-build-isolation` first")
    run = cases(np.random.default_rng(0))
    py, cy = run(_kernels_py), run(_kernels)
    print(f"{'kernel':<16} {'numpy ms':>10} {'compiled ms':>12} {'speedup':>8}")
    for name in py:
        a, b = best_of(py[name], args.repeat), best_of(cy[name], args.repeat)
        print(f"{name:<16} {a * 1e3:>10.3f} {b * 1e3:>12.3f} {a / b:>7.2f}x")
    if args.step:
        t = step_times(args.batch)
        print(f"\ntraining step, batch {args.batch}: " +
              ", ".join(f"{k} {v:.3f} s" for k, v in sorted(t.items())))


if __name__ == "__main__":
    main()
