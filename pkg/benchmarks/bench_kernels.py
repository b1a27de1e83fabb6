"""Benchmark the hot kernels on both backends.

Times the jitted kernels against the pure-numpy fallback on conv-sized
workloads plus one full forward/backward of a small residual net. Run:

    python benchmarks/bench_kernels.py [--quick]

The active default backend comes from POLYKERV_BACKEND; this script switches
between both explicitly.
"""

import argparse
import time

import numpy as np

from polykerv import autograd as ag
from polykerv import backend
from polykerv.network import Network
from polykerv.zoo import build


def timeit(fn, repeats):
    fn()  # warmup (includes jit compile on the numba path)
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def bench_kernels(batch, channels, size, k, repeats):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((batch, channels, size, size)).astype(np.float32)
    oh = backend.conv_out_size(size, k, 1, 1)
    cols = backend.im2col(x, k, 1, 1)
    g = rng.standard_normal((batch, channels, size // 2, size // 2)).astype(np.float32)

    cases = {
        "im2col": lambda: backend.im2col(x, k, 1, 1),
        "col2im": lambda: backend.col2im(cols, x.shape, k, 1, 1),
        "maxpool": lambda: backend.maxpool(x, 2, 2),
        "maxpool_bwd": lambda: backend.maxpool_backward(g, backend.maxpool(x, 2, 2)[1], x.shape, 2, 2),
        "avgpool": lambda: backend.avgpool(x, 2, 2),
        "avgpool_bwd": lambda: backend.avgpool_backward(g, x.shape, 2, 2),
    }
    results = {}
    for name, fn in cases.items():
        results[name] = timeit(fn, repeats)
    return results


def bench_network(repeats):
    spec = build("resnet10", width_multiplier=0.5, num_classes=10, input_shape=(3, 32, 32))
    net = Network.build(spec, seed=0)
    rng = np.random.default_rng(1)
    x = rng.standard_normal((32, 3, 32, 32)).astype(np.float32)
    labels = rng.integers(0, 10, size=32)

    def step():
        loss = ag.cross_entropy(net.forward(x), labels)
        loss.backward()
        net.zero_grad()

    return timeit(step, repeats)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--quick", action="store_true", help="smaller workload, fewer repeats")
    args = parser.parse_args()

    if args.quick:
        batch, channels, size, repeats = 8, 8, 16, 3
    else:
        batch, channels, size, repeats = 64, 16, 32, 10

    rows = {}
    net_times = {}
    backends = ["numpy"] + (["numba"] if backend.HAS_NUMBA else [])
    for name in backends:
        backend.use(name)
        rows[name] = bench_kernels(batch, channels, size, 3, repeats)
        net_times[name] = bench_network(max(1, repeats // 2))

    kernels = list(next(iter(rows.values())).keys())
    print(f"workload: batch={batch} channels={channels} size={size} k=3, mean of {repeats} runs")
    header = "kernel".ljust(14) + "".join(b.rjust(12) for b in backends)
    if len(backends) == 2:
        header += "speedup".rjust(10)
    print(header)
    for kname in kernels:
        line = kname.ljust(14) + "".join(f"{rows[b][kname] * 1e3:9.3f} ms" for b in backends)
        if len(backends) == 2 and rows["numba"][kname] > 0:
            line += f"{rows['numpy'][kname] / rows['numba'][kname]:9.2f}x"
        print(line)
    line = "resnet10 step".ljust(14) + "".join(f"{net_times[b] * 1e3:9.3f} ms" for b in backends)
    if len(backends) == 2 and net_times["numba"] > 0:
        line += f"{net_times['numpy'] / net_times['numba']:9.2f}x"
    print(line)


if __name__ == "__main__":
    main()
