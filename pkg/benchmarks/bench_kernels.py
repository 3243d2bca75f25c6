"""Compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 200] [--epoch]

Shapes match training: 6 bidder networks or one 6-logit network, minibatch
256, input width 10.  ``--epoch`` also times full CVS and PPO training epochs
under each backend in a subprocess.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from modcredit import _kernels_py as pure

try:
    from modcredit import _kernels as compiled
except ImportError:
    compiled = None


def cases(M, B=256, n_in=10, n_out=1, seed=0):
    rng = np.random.default_rng(seed)
    sizes = (n_in, 20, 20, n_out)
    params = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        params += [rng.normal(size=(M, a, b)) / np.sqrt(a), rng.normal(size=(M, b))]
    x = np.ascontiguousarray(rng.random((B, n_in)))
    h1, h2, out = pure.stack_forward(*params, x)
    dout = rng.normal(size=out.shape)
    g = rng.normal(size=params[0].shape)
    T = 4096
    r, v, nv = rng.normal(size=(3, T))
    d = (rng.random(T) < 0.1).astype(np.float64)
    return {
        "forward": lambda k: k.stack_forward(*params, x),
        "backward": lambda k: k.stack_backward(params[2], params[4], x, h1, h2, dout),
        "adam": lambda k: k.adam_update(params[0].copy(), g, np.zeros_like(g), np.zeros_like(g), 1e-3, 0.9, 0.999,
                                        1e-8, np.ones(M), np.ones(M, dtype=np.uint8)),
        "gae(4096)": lambda k: k.gae(r, v, nv, d, 0.99, 0.95),
    }


EPOCH_SNIPPET = """
import time, numpy as np
from modcredit import BACKEND
from modcredit.env import make_task
from modcredit.harness import ExperimentConfig, Trainer
from modcredit.learners import make_agent
task = make_task("linear_chain")
agent = make_agent("{alg}", task.obs_dim, task.n_doors, seed=0)
tr = Trainer(agent, task, 0, 0, ExperimentConfig(seeds=[0]))
tr.run_epoch()
t = time.perf_counter()
for _ in range(5):
    tr.run_epoch()
print(BACKEND, (time.perf_counter() - t) / 5)
"""


def epoch_time(alg, force_pure):
    env = {**os.environ, "MODCREDIT_PURE": "1" if force_pure else "0"}
    out = subprocess.run([sys.executable, "-c", EPOCH_SNIPPET.format(alg=alg)], env=env,
                         capture_output=True, text=True, check=True)
    backend, secs = out.stdout.split()
    return backend, float(secs)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--epoch", action="store_true")
    args = ap.parse_args()
    if compiled is None:
        sys.exit("compiled extension not built; run `pip install -e .` with Cython available")

    print(f"{'kernel':<28}{'python us':>12}{'compiled us':>14}{'speedup':>10}")
    for label, M, n_out in (("6 nets x 1 out", 6, 1), ("1 net x 6 out", 1, 6)):
        for name, fn in cases(M, n_out=n_out).items():
            if name == "gae(4096)":
                if M == 1:
                    continue
            else:
                name = f"{name} {label}"
            t_py = min(timeit.repeat(lambda: fn(pure), number=args.repeat, repeat=3)) / args.repeat * 1e6
            t_c = min(timeit.repeat(lambda: fn(compiled), number=args.repeat, repeat=3)) / args.repeat * 1e6
            print(f"{name:<28}{t_py:>12.1f}{t_c:>14.1f}{t_py / t_c:>9.2f}x")
    if args.epoch:
        for alg in ("cvs", "ppo"):
            b_py, s_py = epoch_time(alg, True)
            b_c, s_c = epoch_time(alg, False)
            print(f"epoch {alg:<5} {b_py} {s_py * 1e3:.0f} ms, {b_c} {s_c * 1e3:.0f} ms, {s_py / s_c:.2f}x")


if __name__ == "__main__":
    main()
