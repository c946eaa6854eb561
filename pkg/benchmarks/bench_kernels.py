"""Time the numba kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--batch 32] [--steps 25] [--hidden 100] [--repeat 20]

Shapes default to one training batch of the default model after the conv
and pool stage (100 tokens pooled by 4). Each kernel is run once before
timing so numba compilation is excluded; outputs of both backends are
checked for agreement first.
"""
import argparse
import time

import numpy as np

from harmnet import _kernels as K


def best_of(fn, args, repeat):
    fn(*args)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(B, T, H, D, rng, dtype):
    mask = np.ones((B, T), bool)
    mask[::3, T // 2:] = False  # a third of the batch is short
    out = {}
    for kind, nb in (("lstm", 4), ("gru", 3)):
        xw = rng.normal(size=(B, T, nb * H)).astype(dtype)
        U = (rng.normal(size=(H, nb * H)) * 0.1).astype(dtype)
        fwd = getattr(K.numpy_kernels, f"{kind}_forward")(xw, U, mask, False)
        dhs = rng.normal(size=(B, T, H)).astype(dtype)
        out[f"{kind}_forward"] = (xw, U, mask, False)
        out[f"{kind}_backward"] = (dhs, U, mask, False, *fwd)
    x = rng.normal(size=(B, 4 * T, D)).astype(dtype)
    pooled, arg = K.numpy_kernels.maxpool_forward(x, 4)
    out["maxpool_forward"] = (x, 4)
    out["maxpool_backward"] = (rng.normal(size=pooled.shape).astype(dtype), arg, 4 * T)
    out["embedding_backward"] = (rng.normal(size=(B, 4 * T, D)).astype(dtype),
                                 rng.integers(0, 5000, size=(B, 4 * T)), 5000)
    return out


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--steps", type=int, default=25)
    p.add_argument("--hidden", type=int, default=100)
    p.add_argument("--channels", type=int, default=512)
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--precision", choices=("float32", "float64"), default="float32")
    args = p.parse_args()
    if K.numba_kernels is None:
        raise SystemExit("numba is not importable; nothing to compare")

    rng = np.random.default_rng(0)
    table = cases(args.batch, args.steps, args.hidden, args.channels, rng, np.dtype(args.precision))
    print(f"batch {args.batch}, steps {args.steps}, hidden {args.hidden}, {args.precision}, best of {args.repeat}")
    print(f"{'kernel':<20}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, call_args in table.items():
        a = getattr(K.numpy_kernels, name)(*call_args)
        b = getattr(K.numba_kernels, name)(*call_args)
        a, b = (a, b) if isinstance(a, tuple) else ((a,), (b,))
        # forward caches at masked steps are scratch and may differ; outputs may not
        keep = 1 if name.endswith("_forward") else len(a)
        for u, v in zip(a[:keep], b[:keep]):
            assert np.allclose(u, v, rtol=1e-4, atol=1e-4), name
        t_np = best_of(getattr(K.numpy_kernels, name), call_args, args.repeat)
        t_nb = best_of(getattr(K.numba_kernels, name), call_args, args.repeat)
        print(f"{name:<20}{t_np * 1e3:>10.3f}{t_nb * 1e3:>10.3f}{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
