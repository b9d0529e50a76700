import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xreid.metrics import (DegenerateClusterError, EmbeddingSet, calinski_harabasz, compactness,
                           evaluate_embeddings, retrieval_eval)

from . import oracles

CH_TWO_PAIRS = 50.0  # {0,2} and {10,12} in 1-D; direct-formula oracle


def _set(x, labels, role="gallery"):
    return EmbeddingSet(np.asarray(x, np.float64), np.asarray(labels), role)


def test_compactness_examples(backend):
    assert compactness(_set([[0.0, 1], [3, 4], [5, 5]], [0, 1, 2]))[0] == 0.0
    cp, per = compactness(_set([[0.0, 0], [2, 0]], [7, 7]))
    assert cp == 1.0 and per.tolist() == [1.0]


def test_compactness_vs_oracle(backend, rng):
    x = rng.normal(size=(20, 4))
    labels = rng.integers(0, 5, size=20)
    assert abs(compactness(_set(x, labels))[0] - oracles.compactness(x, labels)) < 1e-9


def test_ch_examples(backend):
    with pytest.raises(DegenerateClusterError):
        calinski_harabasz(_set([[0.0], [0], [5], [5]], [0, 0, 1, 1]))
    assert calinski_harabasz(_set([[0.0], [2], [10], [12]], [0, 0, 1, 1])) == pytest.approx(CH_TWO_PAIRS, rel=1e-12)
    assert oracles.calinski_harabasz(np.array([[0.0], [2], [10], [12]]), np.array([0, 0, 1, 1])) == CH_TWO_PAIRS


def test_ch_vs_oracle(backend, rng):
    x = rng.normal(size=(30, 4))
    labels = np.repeat(np.arange(3), 10)
    ref = oracles.calinski_harabasz(x, labels)
    assert abs(calinski_harabasz(_set(x, labels)) - ref) / ref < 1e-9


def test_ch_needs_two_clusters():
    with pytest.raises(ValueError):
        calinski_harabasz(_set([[0.0], [1]], [0, 0]))
    with pytest.raises(ValueError):
        calinski_harabasz(_set([[0.0], [1]], [0, 1]))


def test_retrieval_trivial(backend):
    assert retrieval_eval(_set([[1.0]], [3], "query"), _set([[2.0]], [3])) == (1.0, 1.0)


def test_ap_five_sixths(backend):
    g = _set([[1.0], [2.0], [3.0], [4.0]], [5, 6, 5, 6])
    m_ap, cmc = retrieval_eval(_set([[0.0]], [5], "query"), g)
    assert m_ap == pytest.approx(5 / 6, abs=1e-12) and cmc == 1.0
    assert oracles.average_precision([1, 2, 3, 4], 5, [5, 6, 5, 6])[0] == pytest.approx(5 / 6)


def test_retrieval_vs_oracle(backend, rng):
    q = rng.normal(size=(10, 4)).astype(np.float32)
    g = rng.normal(size=(40, 4)).astype(np.float32)
    ql, gl = np.arange(10) % 5, np.arange(40) % 5
    m_ap, cmc = retrieval_eval(_set(q, ql, "query"), _set(g, gl))
    ref_ap, ref_cmc = oracles.retrieval(q.astype(np.float64), ql, g.astype(np.float64), gl)
    assert m_ap == pytest.approx(ref_ap, abs=1e-12) and cmc == ref_cmc


def test_retrieval_ties_resolve_by_gallery_index():
    g = _set([[1.0], [1.0]], [2, 1])
    assert retrieval_eval(_set([[0.0]], [1], "query"), g) == (0.5, 0.0)


def test_retrieval_missing_identity():
    with pytest.raises(ValueError):
        retrieval_eval(_set([[0.0]], [9], "query"), _set([[1.0]], [1]))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 10.0))
def test_metric_invariances(seed, scale):
    r = np.random.default_rng(seed)
    x = r.normal(size=(24, 3))
    labels = np.repeat(np.arange(4), 6)
    rot, _ = np.linalg.qr(r.normal(size=(3, 3)))
    shift = r.normal(size=3)
    y = x @ rot + shift
    assert compactness(_set(y, labels))[0] == pytest.approx(compactness(_set(x, labels))[0], rel=1e-9)
    ch = calinski_harabasz(_set(x, labels))
    assert calinski_harabasz(_set(y * scale, labels)) == pytest.approx(ch, rel=1e-8)
    assert compactness(_set(x * scale, labels))[0] == pytest.approx(scale * compactness(_set(x, labels))[0],
                                                                     rel=1e-9)


def test_evaluate_embeddings_report(rng):
    q = rng.normal(size=(4, 3))
    g = rng.normal(size=(12, 3))
    rep = evaluate_embeddings(q, np.arange(4), g, np.arange(12) % 4, epoch=3)
    both = np.concatenate([q, g])
    labels = np.concatenate([np.arange(4), np.arange(12) % 4])
    assert rep.cp == pytest.approx(oracles.compactness(both, labels), rel=1e-9)
    assert rep.ch == pytest.approx(oracles.calinski_harabasz(both, labels), rel=1e-9)
    assert rep.as_dict()["epoch"] == 3


def test_embedding_set_validation():
    with pytest.raises(ValueError):
        EmbeddingSet(np.zeros((2, 3)), np.zeros(3))
    with pytest.raises(ValueError):
        EmbeddingSet(np.zeros((2, 3)), np.zeros(2), role="probe")
