"""Benchmark the numba-jitted kernels against the pure-numpy fallbacks.

Run:  python3 benchmarks/bench_kernels.py [--repeats N]

Times each hot kernel on encoder-realistic shapes plus one end-to-end
forward/backward pass. The active backend for the end-to-end row follows
TODKIT_BACKEND; per-kernel rows call both implementations directly.
"""

import argparse
import time

import numpy as np

from todkit import kernels
from todkit.encoder import EncoderConfig, backward_batch, forward_batch, init_params


def timeit(fn, repeats):
    fn()  # warm-up (and JIT compile on the numba side)
    start = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - start) / repeats


def bench_kernels(repeats):
    rng = np.random.default_rng(0)
    b, nh, l, h, f = 16, 4, 128, 128, 512
    x2d = rng.normal(size=(b * l, h))
    gain = rng.normal(size=h)
    bias = rng.normal(size=h)
    dy2d = rng.normal(size=(b * l, h))
    xff = rng.normal(size=(b * l, f))
    dff = rng.normal(size=(b * l, f))
    scores = rng.normal(size=(b, nh, l, l))
    mask = np.ones((b, l), dtype=np.int64)
    mask[:, l - 16:] = 0
    p = rng.normal(size=200_000)
    g = rng.normal(size=200_000)
    m = np.zeros_like(p)
    v = np.zeros_like(p)

    np_impl = kernels.get_impl("numpy")
    try:
        nb_impl = kernels.get_impl("numba")
    except ImportError:
        nb_impl = None
        print("numba unavailable; reporting numpy only")

    _, mean, rstd = np_impl.layer_norm_fwd(x2d, gain, bias, 1e-12)
    probs = np_impl.masked_softmax(scores, mask)
    dprobs = rng.normal(size=probs.shape)
    adam_args = (1e-3, 0.9, 0.999, 1e-8, 0.01, 1 - 0.9 ** 5, 1 - 0.999 ** 5)

    cases = [
        ("layer_norm_fwd", lambda impl: impl.layer_norm_fwd(x2d, gain, bias, 1e-12)),
        ("layer_norm_bwd", lambda impl: impl.layer_norm_bwd(dy2d, x2d, gain, mean, rstd)),
        ("gelu_fwd", lambda impl: impl.gelu_fwd(xff.reshape(-1))),
        ("gelu_bwd", lambda impl: impl.gelu_bwd(xff.reshape(-1), dff.reshape(-1))),
        ("masked_softmax", lambda impl: impl.masked_softmax(scores, mask)),
        ("softmax_bwd", lambda impl: impl.softmax_bwd(probs, dprobs)),
        ("adamw_update", lambda impl: impl.adamw_update(
            p.copy(), g, m.copy(), v.copy(), *adam_args)),
    ]

    print(f"{'kernel':<16} {'numpy':>10} {'numba':>10} {'speedup':>8}")
    for name, call in cases:
        t_np = timeit(lambda: call(np_impl), repeats)
        if nb_impl is None:
            print(f"{name:<16} {t_np * 1e3:>9.3f}ms {'-':>10} {'-':>8}")
            continue
        t_nb = timeit(lambda: call(nb_impl), repeats)
        print(f"{name:<16} {t_np * 1e3:>9.3f}ms {t_nb * 1e3:>9.3f}ms "
              f"{t_np / t_nb:>7.2f}x")


def bench_end_to_end(repeats):
    cfg = EncoderConfig(num_layers=2, num_heads=4, hidden=128, ffn_dim=512,
                        vocab_size=512, max_positions=128, dropout=0.1)
    params = init_params(cfg, seed=0)
    rng = np.random.default_rng(1)
    ids = rng.integers(7, cfg.vocab_size, size=(16, 128))
    ids[:, 0] = 2
    mask = np.ones((16, 128), dtype=np.int64)
    mask[:, 100:] = 0
    upstream = rng.normal(size=(16, 128, cfg.hidden))

    def step():
        hidden, cache = forward_batch(params, cfg, ids, mask, train_mode=True,
                                      dropout_seed=3, need_cache=True)
        backward_batch(params, cfg, cache, upstream)

    t = timeit(step, max(1, repeats // 4))
    print(f"\nend-to-end fwd+bwd (backend={kernels.BACKEND}): {t * 1e3:.1f} ms/step")
    print("set TODKIT_BACKEND=numpy to time the fallback path")


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()
    bench_kernels(args.repeats)
    bench_end_to_end(args.repeats)
