"""Time the compiled row kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--rows 4096] [--width 512] [--repeat 20]

Each kernel runs on the same float32 input through both backends; outputs are
compared before timing. A final section times one training step of a small
model with the kernels chosen by ``PRT_KERNELS`` in a subprocess.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from phrase_transformer import kernels

STEP_SCRIPT = """
import time
import numpy as np
from phrase_transformer.kernels import BACKEND
from phrase_transformer.model import ModelConfig, PRTransformer
from phrase_transformer.toy import copy_corpus
from phrase_transformer.training import Adam, build_vocab, collate, train_step
pairs = copy_corpus(64, seed=0)
v = build_vocab([p.src for p in pairs])
m = PRTransformer(ModelConfig(len(v), len(v), d_model=64, d_ffn=256, n_heads=4,
                              enc_layers=2, dec_layers=2, max_positions=64), seed=0)
opt = Adam(m.named_parameters())
b = collate(pairs, v, v)
train_step(m, [b], opt, 1e-4)
t0 = time.perf_counter()
for _ in range({steps}):
    train_step(m, [b], opt, 1e-4)
print(BACKEND, (time.perf_counter() - t0) / {steps})
"""


def cases(rows, width, rng):
    x = rng.normal(size=(rows, width)).astype(np.float32)
    valid = rng.random((rows, width)) > 0.2
    valid[:, 0] = True
    gain = rng.normal(size=width).astype(np.float32)
    bias = rng.normal(size=width).astype(np.float32)
    gy = rng.normal(size=(rows, width)).astype(np.float32)
    y = kernels.softmax(x, valid)
    ly = kernels.log_softmax(x)
    _, xhat, rstd = kernels.layer_norm(x, gain, bias, 1e-6)
    return {
        "softmax (masked)": lambda impl: kernels.softmax(x, valid, impl=impl),
        "softmax backward": lambda impl: kernels.softmax_grad(y, gy, impl=impl),
        "log_softmax": lambda impl: kernels.log_softmax(x, impl=impl),
        "log_softmax backward": lambda impl: kernels.log_softmax_grad(ly, gy, impl=impl),
        "layer_norm": lambda impl: kernels.layer_norm(x, gain, bias, 1e-6, impl=impl)[0],
        "layer_norm backward": lambda impl: kernels.layer_norm_grad(gy, xhat, rstd, gain, impl=impl)[0],
    }


def step_time(backend, steps):
    env = dict(os.environ, PRT_KERNELS=backend)
    out = subprocess.run(
        [sys.executable, "-c", STEP_SCRIPT.format(steps=steps)], env=env, capture_output=True, text=True, check=True
    )
    name, seconds = out.stdout.split()
    return name, float(seconds)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=4096)
    ap.add_argument("--width", type=int, default=512)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--steps", type=int, default=5, help="training steps per backend (0: skip)")
    args = ap.parse_args()

    impls = kernels.implementations()
    if "cython" not in impls:
        print("compiled kernels are not built; only the numpy fallback is available")
    rng = np.random.default_rng(0)
    print(f"{args.rows} x {args.width} float32, best of {args.repeat}")
    print(f"{'kernel':<24}" + "".join(f"{name:>12}" for name in impls) + (f"{'speedup':>10}" if len(impls) > 1 else ""))
    for label, fn in cases(args.rows, args.width, rng).items():
        ref = fn(impls["python"])
        for impl in impls.values():
            np.testing.assert_allclose(fn(impl), ref, rtol=1e-4, atol=1e-5)
        times = {name: min(timeit.repeat(lambda impl=impl: fn(impl), number=1, repeat=args.repeat)) for name, impl in impls.items()}
        row = f"{label:<24}" + "".join(f"{1e3 * t:>10.2f}ms" for t in times.values())
        if len(times) > 1:
            row += f"{times['python'] / times['cython']:>9.2f}x"
        print(row)

    if args.steps:
        print(f"\ntraining step, d_model 64, 64 copy pairs, mean of {args.steps}")
        for backend in ("python", "cython") if "cython" in impls else ("python",):
            name, seconds = step_time(backend, args.steps)
            print(f"  {name:<8}{1e3 * seconds:>9.1f}ms")


if __name__ == "__main__":
    main()
