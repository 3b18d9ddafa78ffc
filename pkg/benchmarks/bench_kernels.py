"""Compiled kernels vs the numpy fallback on DcardNet-sized tensors.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--size 112]

Prints the best-of-N time for each kernel under both backends, the speedup,
and whether the outputs agree bitwise. Ends with one training step of the
default network at the chosen input size under each backend.
"""

import argparse
import time

import numpy as np

from dcardnet import kernels
from dcardnet.model import ModelConfig, build_model
from dcardnet.ops import softmax_cross_entropy_soft
from dcardnet.tensor import Tensor, make_rng


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def kernel_cases(size, rng):
    s2, s4 = size // 2, size // 4
    x_stem = rng.random((10, 48, s2, s2), dtype=np.float32)
    x_block = rng.random((10, 96, s4, s4), dtype=np.float32)
    cols_shape = (10, 96 * 9, s4 * s4)
    cols = rng.random(cols_shape, dtype=np.float32)
    mp_out = kernels.numpy_backend.maxpool_forward(x_stem, 3, 2, 1)
    ap_out = kernels.numpy_backend.avgpool_forward(x_block, 2, 2, 0)
    return [
        ("im2col 3x3 s1", lambda b: b.im2col(x_block, 3, 3, 1, 1)),
        ("col2im 3x3 s1", lambda b: b.col2im(cols, x_block.shape, 3, 3, 1, 1)),
        ("maxpool fwd 3x3 s2", lambda b: b.maxpool_forward(x_stem, 3, 2, 1)),
        ("maxpool bwd 3x3 s2", lambda b: b.maxpool_backward(mp_out[0], mp_out[1], x_stem.shape)),
        ("avgpool fwd 2x2 s2", lambda b: b.avgpool_forward(x_block, 2, 2, 0)),
        ("avgpool bwd 2x2 s2", lambda b: b.avgpool_backward(ap_out, x_block.shape, 2, 2, 0)),
    ]


def _same(a, b):
    if isinstance(a, tuple):
        return all(np.array_equal(u, v) for u, v in zip(a, b))
    return np.array_equal(a, b)


def train_step_time(size, repeat):
    cfg = ModelConfig(input_size=size)
    rng = make_rng(0)
    model = build_model(cfg, rng)
    x = rng.random((10, 6, size, size), dtype=np.float32)
    labels = np.eye(2)[rng.integers(0, 2, 10)]

    def step():
        model.zero_grad()
        logits = model.forward(Tensor(x), mode="train", rng=make_rng(1))
        loss, _ = softmax_cross_entropy_soft(logits, labels)
        loss.backward()
        return loss.item()

    step()  # warm-up
    return best_of(step, repeat)[0]


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--size", type=int, default=112)
    ap.add_argument("--no-step", action="store_true", help="skip the full training-step timing")
    args = ap.parse_args()

    if kernels.compiled_backend is None:
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation`")
    backends = [kernels.compiled_backend, kernels.numpy_backend]
    rng = make_rng(0)
    print(f"{'kernel':<22}{'compiled ms':>13}{'numpy ms':>11}{'speedup':>9}  bitwise")
    for name, fn in kernel_cases(args.size, rng):
        (tc, oc), (tn, on) = (best_of(lambda b=b: fn(b), args.repeat) for b in backends)
        print(f"{name:<22}{1e3 * tc:>13.2f}{1e3 * tn:>11.2f}{tn / tc:>8.1f}x  {'yes' if _same(oc, on) else 'NO'}")

    if not args.no_step:
        print(f"\ntraining step, batch 10, {args.size}x{args.size} input:")
        for b in ("compiled", "numpy"):
            kernels.use_backend(b)
            print(f"  {b:<9} {train_step_time(args.size, max(1, args.repeat // 2)):.3f} s")
        kernels.use_backend("compiled")


if __name__ == "__main__":
    main()
