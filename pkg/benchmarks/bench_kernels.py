"""Compare the compiled kernels with the numpy fallback.

Usage::

    python3 benchmarks/bench_kernels.py            # kernel micro-benchmarks
    python3 benchmarks/bench_kernels.py --step     # also time a full training step per backend

Each kernel is timed on shapes typical of a desk-scale model (batch 16,
length 24, depth 64). The training-step comparison runs in subprocesses so
each one picks its backend at import time via ``SLICENET_PURE_PYTHON``.
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from slicenet.kernels import backends

STEP_SNIPPET = r"""
import time
from slicenet.kernels import BACKEND
from slicenet.layers import ConvModuleConfig
from slicenet.model import ModelConfig, SliceNet
from slicenet.training import Adam, AdamConfig, synth_task, train_step
cfg = ModelConfig(depth=64, vocab_src=16, vocab_tgt=16, encoder_modules=2, decoder_modules=2,
                  module=ConvModuleConfig(dropout_p=0.0))
model = SliceNet(cfg, seed=0)
opt = Adam(model.params, AdamConfig())
stream = synth_task("copy", 16, 20, seed=0, batch_size=16)
batches = [next(stream) for _ in range({n})]
train_step(model, opt, batches[0], False, None)
t0 = time.perf_counter()
for b in batches:
    train_step(model, opt, b, False, None)
print(BACKEND, (time.perf_counter() - t0) / len(batches))
"""


def cases(rng):
    b, t, c, k, d = 16, 24, 64, 15, 8
    x = rng.normal(size=(b, t + (k - 1) * d, c))
    w = rng.normal(size=(k, c))
    g = rng.normal(size=(b, t, c))
    y = rng.normal(size=(b, t, c))
    logits = rng.normal(size=(b, t, t))
    probs = backends()["python"].softmax_fwd(logits)
    _, xhat, inv = backends()["python"].layernorm_fwd(y, 1.0, 0.0, 1e-6)
    return {
        "depthwise_fwd k=15 d=8": lambda m: m.depthwise_fwd(x, w, d),
        "depthwise_bwd k=15 d=8": lambda m: m.depthwise_bwd(x, w, d, g),
        "layernorm_fwd": lambda m: m.layernorm_fwd(y, 1.0, 0.0, 1e-6),
        "layernorm_bwd": lambda m: m.layernorm_bwd(g, xhat, inv, 1.0),
        "softmax_fwd": lambda m: m.softmax_fwd(logits),
        "softmax_bwd": lambda m: m.softmax_bwd(probs, logits),
    }


def best_of(fn, repeat=5):
    n, _ = timeit.Timer(fn).autorange()
    return min(timeit.Timer(fn).repeat(repeat=repeat, number=n)) / n


def run_kernels():
    impls = backends()
    rows = []
    for name, fn in cases(np.random.default_rng(0)).items():
        row = {"kernel": name}
        for label, mod in impls.items():
            row[label] = best_of(lambda: fn(mod))
        if "cython" in row:
            row["speedup"] = row["python"] / row["cython"]
        rows.append(row)
    return rows


def run_step(n):
    out = {}
    for env in ("0", "1"):
        proc = subprocess.run(
            [sys.executable, "-c", STEP_SNIPPET.format(n=n)],
            env={**os.environ, "SLICENET_PURE_PYTHON": env},
            capture_output=True,
            text=True,
            check=True,
        )
        backend, secs = proc.stdout.split()
        out[backend] = float(secs)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--step", action="store_true", help="also time full training steps")
    ap.add_argument("--steps", type=int, default=20)
    ap.add_argument("--json", action="store_true")
    args = ap.parse_args()
    report = {"kernels": run_kernels()}
    if args.step:
        report["train_step"] = run_step(args.steps)
    if args.json:
        print(json.dumps(report, indent=2))
        return
    print(f"{'kernel':<26} {'python (us)':>12} {'cython (us)':>12} {'speedup':>8}")
    for r in report["kernels"]:
        cy = f"{r['cython'] * 1e6:12.1f}" if "cython" in r else f"{'n/a':>12}"
        sp = f"{r['speedup']:8.2f}" if "speedup" in r else f"{'':>8}"
        print(f"{r['kernel']:<26} {r['python'] * 1e6:12.1f} {cy} {sp}")
    if "train_step" in report:
        for k, v in report["train_step"].items():
            print(f"train step ({k}): {v * 1e3:.1f} ms")


if __name__ == "__main__":
    main()
