import numpy as np
import pytest

from xreid import kernels

pytestmark = pytest.mark.skipif(not kernels.NUMBA_KERNELS, reason="numba not installed")


def _inputs(rng):
    x = rng.normal(size=(12, 8)).astype(np.float32)
    gamma = rng.normal(size=8).astype(np.float32)
    beta = rng.normal(size=8).astype(np.float32)
    _, xhat, rstd = kernels.NUMPY_KERNELS["layer_norm_fwd"](x, gamma, beta, 1e-6)
    probs = kernels.NUMPY_KERNELS["softmax_fwd"](x)
    logp = kernels.NUMPY_KERNELS["log_softmax_fwd"](x)
    feats = rng.normal(size=(8, 4)).astype(np.float32)
    labels = np.repeat(np.arange(4), 2)
    dist = kernels.NUMPY_KERNELS["pairwise_sq_dist"](feats, feats)
    qd = rng.normal(size=(3, 9)).astype(np.float32) ** 2
    return {
        "layer_norm_fwd": (x, gamma, beta, 1e-6),
        "layer_norm_bwd": (x, xhat, rstd, gamma),
        "softmax_fwd": (x,),
        "softmax_bwd": (x, probs),
        "log_softmax_fwd": (x,),
        "log_softmax_bwd": (x, logp),
        "gelu_fwd": (x,),
        "gelu_bwd": (x, x),
        "pairwise_sq_dist": (feats, feats[:5]),
        "batch_hard": (dist, labels),
        "retrieval_ap": (qd, np.array([0, 1, 2]), np.arange(9) % 3),
        "cluster_stats": (feats, labels, 4),
    }


@pytest.mark.parametrize("name", sorted(kernels.NUMPY_KERNELS))
def test_backends_agree(name, rng):
    args = _inputs(rng)[name]
    a = kernels.NUMPY_KERNELS[name](*args)
    b = kernels.NUMBA_KERNELS[name](*args)
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    assert len(a) == len(b)
    for u, v in zip(a, b):
        np.testing.assert_allclose(np.asarray(u, np.float64), np.asarray(v, np.float64), rtol=1e-5, atol=1e-6)


def test_integer_selections_identical(rng):
    for _ in range(20):
        feats = rng.integers(0, 3, size=(8, 2)).astype(np.float32)  # many ties
        labels = np.repeat(np.arange(4), 2)
        dist = kernels.NUMPY_KERNELS["pairwise_sq_dist"](feats, feats)
        a = kernels.NUMPY_KERNELS["batch_hard"](dist, labels)
        b = kernels.NUMBA_KERNELS["batch_hard"](dist, labels)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])


def test_set_backend_switches_and_restores():
    prev = kernels.set_backend("numpy")
    assert kernels.softmax_fwd is kernels.NUMPY_KERNELS["softmax_fwd"]
    kernels.set_backend("numba")
    assert kernels.softmax_fwd is kernels.NUMBA_KERNELS["softmax_fwd"]
    kernels.set_backend(prev)
    assert kernels.BACKEND == prev
    with pytest.raises(ValueError):
        kernels.set_backend("cuda")
