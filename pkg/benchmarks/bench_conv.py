"""Benchmark the compiled conv kernels against the numpy fallback.

Usage: python benchmarks/bench_conv.py [repeats]

Times forward, input-gradient and weight-gradient passes on desk-scale
shapes and reports the per-call median plus the cython/numpy speedup.
"""

import sys
import time

import numpy as np

from deltalearn._kernels import conv_cy, conv_np

SHAPES = [
    # (label, batch, c_in, H, W, c_out, k, stride, pad)
    ("first 3->8 @32", 16, 3, 32, 32, 8, 3, 1, 1),
    ("mid   8->16 @16", 16, 8, 16, 16, 16, 3, 1, 1),
    ("late 16->16 @8", 16, 16, 8, 8, 16, 3, 1, 1),
    ("strided 8->16", 16, 8, 32, 32, 16, 3, 2, 1),
]


def median_time(fn, repeats):
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return sorted(times)[len(times) // 2]


def bench(repeats):
    rng = np.random.default_rng(0)
    backends = [("numpy", conv_np)]
    if conv_cy is not None:
        backends.append(("cython", conv_cy))
    else:
        print("compiled backend unavailable; timing numpy only")

    header = f"{'shape':16s} {'pass':8s}" + "".join(f"{name:>12s}" for name, _ in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10s}"
    print(header)
    for label, bsz, cin, h, w, cout, k, stride, pad in SHAPES:
        x = rng.standard_normal((bsz, cin, h, w))
        wgt = rng.standard_normal((cout, cin, k, k))
        bias = rng.standard_normal(cout)
        out_shape = conv_np.conv2d_forward(x, wgt, bias, stride, pad).shape
        dout = rng.standard_normal(out_shape)
        passes = [
            ("forward", lambda m: lambda: m.conv2d_forward(x, wgt, bias, stride, pad)),
            ("bwd_in", lambda m: lambda: m.conv2d_backward_input(dout, wgt, x.shape, stride, pad)),
            ("bwd_w", lambda m: lambda: m.conv2d_backward_weight(dout, x, wgt.shape, stride, pad)),
        ]
        for pass_name, make in passes:
            times = [median_time(make(mod), repeats) for _, mod in backends]
            row = f"{label:16s} {pass_name:8s}" + "".join(f"{t * 1e3:10.2f}ms" for t in times)
            if len(times) == 2:
                row += f"{times[0] / times[1]:9.1f}x"
            print(row)


if __name__ == "__main__":
    bench(int(sys.argv[1]) if len(sys.argv) > 1 else 9)
