"""Time every hot kernel under the numpy fallback and the numba path.

    python benchmarks/bench_kernels.py [--repeat 20] [--scale 1]

Shapes follow the desk config (B=16, N+1=9 tokens, D=64, 4 heads) and a
10-query / 150-gallery evaluation. Numba compile time is excluded by a warm-up
call; outputs of the two backends are compared before timing.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from xreid import kernels


def cases(scale: int, rng: np.random.Generator) -> dict[str, tuple]:
    b, t, d, h = 16 * scale, 9, 64, 4
    x = rng.normal(size=(b * t, d)).astype(np.float32)
    gamma = np.ones(d, np.float32)
    beta = np.zeros(d, np.float32)
    _, xhat, rstd = kernels.NUMPY_KERNELS["layer_norm_fwd"](x, gamma, beta, 1e-6)
    scores = rng.normal(size=(b * h * t, t)).astype(np.float32)
    probs = kernels.NUMPY_KERNELS["softmax_fwd"](scores)
    feats = rng.normal(size=(b, d)).astype(np.float32)
    labels = np.repeat(np.arange(b // 4), 4)
    q = rng.normal(size=(10 * scale, d)).astype(np.float32)
    g = rng.normal(size=(150 * scale, d)).astype(np.float32)
    qd = kernels.NUMPY_KERNELS["pairwise_sq_dist"](q, g)
    qlab = np.arange(10 * scale) % 10
    glab = np.arange(150 * scale) % 10
    emb = rng.normal(size=(160 * scale, d)).astype(np.float32)
    elab = np.arange(160 * scale) % 10
    hidden = rng.normal(size=(b * t, 2 * d)).astype(np.float32)
    return {
        "layer_norm_fwd": (x, gamma, beta, 1e-6),
        "layer_norm_bwd": (x, xhat, rstd, gamma),
        "softmax_fwd": (scores,),
        "softmax_bwd": (scores, probs),
        "log_softmax_fwd": (scores,),
        "log_softmax_bwd": (scores, np.log(probs)),
        "gelu_fwd": (hidden,),
        "gelu_bwd": (hidden, hidden),
        "pairwise_sq_dist": (feats, feats),
        "batch_hard": (kernels.NUMPY_KERNELS["pairwise_sq_dist"](feats, feats), labels),
        "retrieval_ap": (qd, qlab, glab),
        "cluster_stats": (emb, elab, 10),
    }


def best_of(fn, args, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def agree(a, b) -> bool:
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return all(np.allclose(np.asarray(u, np.float64), np.asarray(v, np.float64), rtol=1e-5, atol=1e-6)
               for u, v in zip(a, b))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--scale", type=int, default=1, help="multiply batch and gallery sizes")
    args = ap.parse_args()
    if not kernels.NUMBA_KERNELS:
        raise SystemExit("numba is not installed; nothing to compare against")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}{'numpy us':>12}{'numba us':>12}{'speedup':>10}  agree")
    for name, args_ in cases(args.scale, rng).items():
        ref = kernels.NUMPY_KERNELS[name](*args_)
        fast = kernels.NUMBA_KERNELS[name](*args_)  # warm-up / compile
        t_np = best_of(kernels.NUMPY_KERNELS[name], args_, args.repeat)
        t_nb = best_of(kernels.NUMBA_KERNELS[name], args_, args.repeat)
        print(f"{name:<18}{t_np * 1e6:>12.1f}{t_nb * 1e6:>12.1f}{t_np / t_nb:>9.1f}x  {agree(ref, fast)}")


if __name__ == "__main__":
    main()
