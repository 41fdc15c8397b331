"""Compare the compiled and numpy conv kernels.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Times im2col, col2im and one SGD step of the default backbone under each
backend, and checks that both backends agree on the outputs.
"""

import argparse
import time

import numpy as np

from droptop import _pykernels, backbone, kernels, tensor

try:
    from droptop import _ckernels
except ImportError:
    _ckernels = None

SHAPES = [
    # (n, c, h, w, k, stride, pad)
    (64, 3, 32, 32, 3, 1, 1),
    (64, 16, 32, 32, 3, 2, 1),
    (64, 32, 16, 16, 3, 1, 1),
    (64, 64, 8, 8, 3, 1, 1),
]


def best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_kernels(mods, repeat):
    rng = np.random.default_rng(0)
    print(f"{'shape':<28}{'op':<8}" + "".join(f"{name:>12}" for name in mods) + f"{'speedup':>10}")
    for n, c, h, w, k, s, p in SHAPES:
        x = rng.standard_normal((n, c, h, w)).astype(np.float32)
        cols = _pykernels.im2col(x, k, k, s, p).copy()
        ref = {"im2col": cols, "col2im": _pykernels.col2im(cols, x.shape, k, k, s, p)}
        for op in ("im2col", "col2im"):
            times = []
            for mod in mods.values():
                if op == "im2col":
                    f = lambda: np.ascontiguousarray(mod.im2col(x, k, k, s, p))
                else:
                    f = lambda: mod.col2im(cols, x.shape, k, k, s, p)
                np.testing.assert_allclose(f(), ref[op], rtol=1e-5, atol=1e-5)
                times.append(best_of(f, repeat))
            speed = f"{times[0] / times[-1]:>9.2f}x" if len(times) > 1 else ""
            label = f"{n}x{c}x{h}x{w} k{k}s{s}p{p}"
            print(f"{label:<28}{op:<8}" + "".join(f"{t * 1e3:>10.2f}ms" for t in times) + speed)


def bench_step(mods, repeat):
    cfg = backbone.BackboneConfig(num_classes=4, input_size=32, seed=0)
    rng = np.random.default_rng(1)
    images = rng.random((32, 3, 32, 32), dtype=np.float32)
    labels = rng.integers(0, 4, 32)
    saved = kernels.im2col, kernels.col2im
    times = []
    try:
        for mod in mods.values():
            kernels.im2col, kernels.col2im = mod.im2col, mod.col2im
            model = backbone.build(cfg)

            def step():
                out = backbone.forward(model, images)
                loss = tensor.softmax_cross_entropy(out.logits, labels)
                backbone.sgd_step(model, loss, 0.1)

            step()
            times.append(best_of(step, max(3, repeat // 4)))
    finally:
        kernels.im2col, kernels.col2im = saved
    speed = f"{times[0] / times[-1]:>9.2f}x" if len(times) > 1 else ""
    print(f"{'sgd step, batch 32, 32px':<36}" + "".join(f"{t * 1e3:>10.2f}ms" for t in times) + speed)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    mods = {"python": _pykernels}
    if _ckernels is not None:
        mods["cython"] = _ckernels
    else:
        print("compiled extension not built; timing the numpy fallback only")
    bench_kernels(mods, args.repeat)
    print()
    bench_step(mods, args.repeat)


if __name__ == "__main__":
    main()
