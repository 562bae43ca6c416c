"""Compare the compiled kernels against the pure-numpy fallback.

    python benchmarks/bench_kernels.py              # gemm, im2col, conv
    python benchmarks/bench_kernels.py --quick      # fewer sizes and repeats
    python benchmarks/bench_kernels.py --sweep 64   # conv width sweep 1..64 per backend

Prints one line per case with the median latency of each backend and the
fallback / compiled ratio.  Single thread unless --threads says otherwise.
"""
import argparse
import sys

import numpy as np

from stairnet import tensor
from stairnet.profiler import HarnessConfig, LayerConfig, bench_layer, step_positions, time_workload
from stairnet.tensor import Rng


def gemm_cases(quick):
    sizes = [(64, 64, 64), (256, 256, 256), (64, 576, 3136)]
    if not quick:
        sizes += [(512, 512, 512), (128, 1152, 784), (17, 300, 1000)]
    return sizes


def bench_gemm(backend, m, k, n, harness, rng):
    a = rng.normal((m, k)).astype(np.float32)
    b = rng.normal((k, n)).astype(np.float32)
    return time_workload(lambda: tensor.gemm(a, b, backend=backend, num_threads=harness.threads),
                         harness).median_ns


def bench_im2col(backend, shape, ksize, stride, harness, rng):
    x = rng.normal(shape).astype(np.float32)
    return time_workload(lambda: tensor.im2col(x, ksize, stride, 1 if ksize == 3 else 0,
                                               backend=backend), harness).median_ns


def row(label, times):
    cells = "  ".join(f"{name}={t / 1e3:10.1f}us" for name, t in times.items())
    ratio = ""
    if "compiled" in times and "fallback" in times:
        ratio = f"  fallback/compiled={times['fallback'] / times['compiled']:6.2f}x"
    print(f"{label:<34}{cells}{ratio}", flush=True)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--quick", action="store_true")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--repeats", type=int, default=None)
    p.add_argument("--sweep", type=int, default=0, metavar="WIDTH",
                   help="also sweep a 3x3 conv (in=64, 28x28) over widths 1..WIDTH")
    args = p.parse_args(argv)

    backends = [b for b in ("compiled", "fallback") if b in tensor.BACKENDS]
    if "compiled" not in backends:
        print("compiled kernels not built; timing the fallback only", file=sys.stderr)
    repeats = args.repeats or (5 if args.quick else 20)
    print(f"backends: {', '.join(backends)}  threads={args.threads}  repeats={repeats}")

    def harness(backend):
        return HarnessConfig(warmup=2, repeats=repeats, threads=args.threads, backend=backend)

    rng = Rng(0)
    for m, k, n in gemm_cases(args.quick):
        row(f"gemm {m}x{k} @ {k}x{n}",
            {b: bench_gemm(b, m, k, n, harness(b), rng) for b in backends})

    shapes = [((1, 64, 56, 56), 3, 1), ((1, 64, 56, 56), 3, 2), ((1, 128, 28, 28), 1, 1)]
    for shape, ks, st in shapes[:2] if args.quick else shapes:
        row(f"im2col {shape} k={ks} s={st}",
            {b: bench_im2col(b, shape, ks, st, harness(b), rng) for b in backends})

    conv = [LayerConfig(64, 64, (56, 56)), LayerConfig(64, 128, (28, 28), stride=2),
            LayerConfig(16, 16, (32, 32))]
    for cfg in conv[:2] if args.quick else conv:
        row(f"conv {cfg.in_ch}->{cfg.out_ch} {cfg.hw} s={cfg.stride}",
            {b: bench_layer(cfg, harness(b)).median_ns for b in backends})

    if args.sweep:
        for b in backends:
            h = harness(b)
            t = [bench_layer(LayerConfig(64, c, (28, 28)), h).median_ns
                 for c in range(1, args.sweep + 1)]
            steps = [i + 1 for i in step_positions(t)]
            print(f"sweep {b}: {t[0] / 1e3:.1f}us at 1 channel, {t[-1] / 1e3:.1f}us at "
                  f"{args.sweep}; steps after widths {steps}")


if __name__ == "__main__":
    main()
