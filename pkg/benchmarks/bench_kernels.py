"""Time the numba kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Each kernel is run once untimed (JIT warm-up), then timed ``--repeat``
times; the best wall time is reported along with a check that both
backends agree. The jitted pairwise kernels are timed even though the
package dispatches those two to numpy.
"""

import argparse
import time

import numpy as np

from meanfield_clt import kernels


def _cases():
    rng = np.random.default_rng(0)
    lanes = np.arange(20_000, dtype=np.uint64)
    x = rng.normal(size=4000)
    pts = np.sort(rng.normal(size=4000))
    hv = rng.normal(size=(2000, 2000))
    G = np.zeros((20_000, 2))
    F = rng.normal(size=(20_000, 2, 2))
    dB = rng.normal(size=(20_000, 2))
    return {
        "philox_normal 20000 lanes x 64": lambda impl: impl.philox_normal(123, 456, lanes, 0, 16),
        "esym 2000 x 2000, k=3": lambda impl: impl.esym(hv, 3),
        "pairwise_tanh_mean 4000 x 4000": lambda impl: impl.pairwise_tanh_mean(x, pts),
        "pairwise_sigmoid_tanh_mean 4000 x 4000": lambda impl: impl.pairwise_sigmoid_tanh_mean(x, pts, 0.3 * x, 0.8),
        "accumulate_drift 20000 x 2 x 2": lambda impl: (G.fill(0.0), impl.accumulate_drift(G, F, dB), G)[2],
    }


def _best(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if kernels.numba_impl is None:
        print("numba is not importable; only the numpy backend exists")
        return 1
    print(f"{'kernel':42s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}  agree")
    for name, call in _cases().items():
        t_np, r_np = _best(lambda: np.array(call(kernels.numpy_impl), copy=True), args.repeat)
        t_nb, r_nb = _best(lambda: np.array(call(kernels.numba_impl), copy=True), args.repeat)
        agree = np.allclose(r_np, r_nb, rtol=1e-9, atol=1e-12)
        print(f"{name:42s} {1e3 * t_np:10.2f} {1e3 * t_nb:10.2f} {t_np / t_nb:8.1f}  {agree}")
    print("dispatch: pairwise kernels always use numpy (SIMD tanh/exp); the rest follow MEANFIELD_CLT_NUMBA")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
