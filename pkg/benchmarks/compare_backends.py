"""Head-to-head timing of the compiled kernels vs the numpy fallback.

Runs the conv shape classes the detector actually executes (entry, expand,
depthwise, project, downsample, head) through forward and both gradients on
each backend, then times a full model forward.  Usage:

    python benchmarks/compare_backends.py [--batch 8] [--trials 20]
"""

import argparse
import time

import numpy as np

from extd.kernels import numpy_backend

try:
    from extd.kernels import _fast
except ImportError:
    _fast = None


def timeit(fn, trials):
    fn()
    t0 = time.perf_counter()
    for _ in range(trials):
        fn()
    return (time.perf_counter() - t0) / trials * 1e3


def kernel_table(batch, trials):
    rng = np.random.default_rng(0)
    shapes = [
        ("entry 3x3/s2 3->32 @128", (batch, 3, 128, 128), (32, 3, 3, 3), 2, 1, 1),
        ("expand 1x1 32->64 @64", (batch, 32, 64, 64), (64, 32, 1, 1), 1, 0, 1),
        ("depthwise 3x3 64 @64", (batch, 64, 64, 64), (64, 1, 3, 3), 1, 1, 64),
        ("project 1x1 64->32 @64", (batch, 64, 64, 64), (32, 64, 1, 1), 1, 0, 1),
        ("down 3x3/s2 32->32 @64", (batch, 32, 64, 64), (32, 32, 3, 3), 2, 1, 1),
        ("head 3x3 32->4 @32", (batch, 32, 32, 32), (4, 32, 3, 3), 1, 1, 1),
    ]
    print(f"{'shape':26s} {'pass':4s} {'numpy':>9s} {'fast':>9s}")
    for name, xs, ws, stride, pad, groups in shapes:
        x = rng.normal(size=xs).astype(np.float32)
        w = rng.normal(size=ws).astype(np.float32)
        y = numpy_backend.conv2d_forward(x, w, stride, pad, pad, groups)
        gy = rng.normal(size=y.shape).astype(np.float32)
        rows = [
            ("fwd", lambda b: b.conv2d_forward(x, w, stride, pad, pad, groups)),
            ("gin", lambda b: b.conv2d_grad_input(w, gy, x.shape, stride,
                                                  pad, pad, groups)),
            ("gw", lambda b: b.conv2d_grad_weights(x, gy, w.shape, stride,
                                                   pad, pad, groups)),
        ]
        for tag, call in rows:
            tn = timeit(lambda: call(numpy_backend), trials)
            tf = timeit(lambda: call(_fast), trials) if _fast else float("nan")
            print(f"{name:26s} {tag:4s} {tn:8.2f}m {tf:8.2f}m")


def model_forward(trials):
    import os

    from extd.model import build_model, default_config, forward_graph
    cfg = default_config("fpn", 32)
    params = build_model(cfg, 0)
    img = np.zeros((1, 3, 256, 256), dtype=np.float32)
    t = timeit(lambda: forward_graph(params, cfg, img, train=False), trials)
    backend = os.environ.get("EXTD_KERNELS", "auto")
    print(f"\nfpn-32 forward @256x256 ({backend=}): {t:.1f} ms")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--trials", type=int, default=20)
    args = ap.parse_args()
    if _fast is None:
        print("compiled extension not built; timing numpy side only")
    kernel_table(args.batch, args.trials)
    model_forward(args.trials)


if __name__ == "__main__":
    main()
