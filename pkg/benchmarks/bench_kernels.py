"""Compare the compiled and numpy kernel backends.

Times each fused kernel on a few row shapes, then one instruction-tuning
training step end to end under each backend (each in a fresh interpreter,
since the backend is fixed at import).

    python3 benchmarks/bench_kernels.py [--repeat N] [--steps N]
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from cvlm.numerics.kernels import backends

SHAPES = [(64, 128), (512, 128), (2048, 512)]

STEP_SCRIPT = """
import json, time
import numpy as np
from cvlm.numerics import BACKEND
from cvlm.data import gen_world, world_tokenizer, make_instruction_set
from cvlm.model import CVLM, ModelConfig
from cvlm.training import StageConfig, run_stage
w = gen_world(0, 64)
m = CVLM(ModelConfig(), world_tokenizer(w))
train = make_instruction_set(w, split_seed=0).train
m.completed_stages = ["vka_pretrain", "vka_align"]
cfg = StageConfig("instruction_tune", steps={steps})
run_stage(cfg, m, train, stop_at=1)
t = time.perf_counter()
run_stage(cfg, m, train)
print(json.dumps({{"backend": BACKEND, "ms": 1000 * (time.perf_counter() - t) / {steps}}}))
"""


def kernel_cases(rows, cols, rng):
    x = rng.normal(size=(rows, cols))
    g = rng.normal(size=(rows, cols))
    gamma = rng.normal(size=cols)
    beta = rng.normal(size=cols)
    _, xhat, rstd = backends()["python"].layer_norm_fwd(x, gamma, beta, 1e-5)
    t = np.tanh(x)
    y = backends()["python"].softmax_fwd(x)
    return {
        "layer_norm_fwd": lambda k: k.layer_norm_fwd(x, gamma, beta, 1e-5),
        "layer_norm_bwd": lambda k: k.layer_norm_bwd(g, xhat, rstd, gamma),
        "gelu_fwd": lambda k: k.gelu_fwd(x),
        "gelu_bwd": lambda k: k.gelu_bwd(g, x, t),
        "softmax_fwd": lambda k: k.softmax_fwd(x),
        "softmax_bwd": lambda k: k.softmax_bwd(g, y),
    }


def bench_kernels(repeat):
    found = backends()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<16}{'shape':>12}" + "".join(f"{n + ' us':>14}" for n in found))
    for rows, cols in SHAPES:
        for name, fn in kernel_cases(rows, cols, rng).items():
            cells = []
            for mod in found.values():
                n = max(1, int(2e6 / (rows * cols)))
                best = min(timeit.repeat(lambda: fn(mod), number=n, repeat=repeat)) / n
                cells.append(f"{best * 1e6:>14.1f}")
            print(f"{name:<16}{f'{rows}x{cols}':>12}" + "".join(cells))


def bench_step(steps):
    print("\nend-to-end instruction-tuning step (batch 8, default dims)")
    for backend in backends():
        env = dict(os.environ, CVLM_KERNELS=backend)
        out = subprocess.run([sys.executable, "-c", STEP_SCRIPT.format(steps=steps)],
                             env=env, capture_output=True, text=True, check=True)
        res = json.loads(out.stdout.strip().splitlines()[-1])
        print(f"  {res['backend']:<8} {res['ms']:8.1f} ms/step")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--steps", type=int, default=10)
    args = ap.parse_args()
    bench_kernels(args.repeat)
    bench_step(args.steps)


if __name__ == "__main__":
    main()
