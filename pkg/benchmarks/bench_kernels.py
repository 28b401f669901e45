"""Benchmark the compiled kernels against the pure-numpy fallback.

Times each hot kernel (forward + backward) on shapes the encoder actually
hits, plus one full tile encode forward/backward under whichever backend
is active. Run once per backend:

    python benchmarks/bench_kernels.py
    COHORTMIL_BACKEND=python python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from cohortmil import backend
from cohortmil.backend import kernels_py as py


def bench(fn, *args, repeat=None):
    fn(*args)  # warm up
    if repeat is None:
        t0 = time.perf_counter()
        fn(*args)
        once = time.perf_counter() - t0
        repeat = max(10, min(2000, int(0.15 / max(once, 1e-7))))
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn(*args)
    return (time.perf_counter() - t0) / repeat * 1e6  # microseconds


def main():
    rng = np.random.default_rng(0)
    shapes = [(32, 17, 32), (544, 32), (4096, 64)]
    print(f"active backend: {backend.ACTIVE_BACKEND}")
    print(f"{'kernel':24s} {'shape':>14s} {'active us':>10s} {'numpy us':>10s} {'speedup':>8s}")
    for shape in shapes:
        x = rng.standard_normal(shape)
        gy = rng.standard_normal(shape)
        gamma = rng.uniform(0.5, 1.5, shape[-1])
        beta = rng.standard_normal(shape[-1])
        y = py.softmax_fw(x)
        lnout = py.layer_norm_fw(x, gamma, beta, 1e-5)
        flat = np.ascontiguousarray(x).reshape(-1)
        # gelu forward: the dispatch always uses numpy (vectorized tanh wins);
        # benchmark the raw compiled kernel anyway to show why
        gelu_fw_compiled = (
            (lambda: backend._fast.gelu_fw(flat)) if backend._fast is not None
            else (lambda: backend.gelu(x)))
        cases = [
            ("softmax fw", lambda: backend.softmax(x), lambda: py.softmax_fw(x)),
            ("softmax bw", lambda: backend.softmax_grad(y, gy), lambda: py.softmax_bw(y, gy)),
            ("log_softmax fw", lambda: backend.log_softmax(x), lambda: py.log_softmax_fw(x)),
            ("gelu fw (compiled)", gelu_fw_compiled, lambda: py.gelu_fw(x)),
            ("gelu bw", lambda: backend.gelu_grad(x, gy), lambda: py.gelu_bw(x, gy)),
            ("layer_norm fw", lambda: backend.layer_norm(x, gamma, beta, 1e-5),
             lambda: py.layer_norm_fw(x, gamma, beta, 1e-5)),
            ("layer_norm bw",
             lambda: backend.layer_norm_grad(lnout[1], lnout[2], gamma, gy),
             lambda: py.layer_norm_bw(
                 lnout[1].reshape(-1, shape[-1]),
                 np.ascontiguousarray(lnout[2]).reshape(-1, 1), gamma,
                 gy.reshape(-1, shape[-1]))),
        ]
        for name, active, plain in cases:
            t_active = bench(active)
            t_plain = bench(plain)
            print(f"{name:24s} {str(shape):>14s} {t_active:10.1f} {t_plain:10.1f} "
                  f"{t_plain / t_active:7.2f}x")

    # end-to-end: one batched tile encode forward + backward
    from cohortmil import autodiff as ad
    from cohortmil.encoder import CaVitConfig, encode_tokens, extract_patches, init_encoder_params
    cfg = CaVitConfig(n_cohorts=2)
    params = init_encoder_params(cfg, rng)
    tiles = rng.standard_normal((32, 1, 16, 16))
    patches = extract_patches(tiles, cfg.patch_size)

    def step():
        g = ad.Graph()
        pt = g.bind(params)
        out = encode_tokens(pt, g.constant(patches), 0, cfg)
        g.backward(ad.sum_(ad.mul(out, out)))

    t = bench(step, repeat=30)
    print(f"\nencode 32 tiles fw+bw under {backend.ACTIVE_BACKEND}: {t / 1000:.2f} ms")


if __name__ == "__main__":
    main()
