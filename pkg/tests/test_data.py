import numpy as np
import pytest

from bayespeft.data import (CHARLM_SIZES, SPLIT_SIZES, _row_hashes, make_charlm, make_clusters, make_pair,
                            markov_table, windows)
from bayespeft.errors import DataError
from bayespeft.model import Network, char_lm_spec, task_loss
from bayespeft.oracle import markov_entropy_rate


@pytest.fixture(scope="module")
def clusters():
    return make_clusters(0)


@pytest.fixture(scope="module")
def charlm():
    return make_charlm(0)


def test_cluster_split_sizes_and_geometry(clusters):
    for name, n in SPLIT_SIZES.items():
        assert len(getattr(clusters, name)) == n
    centers = clusters.meta["centers_a"]
    assert np.allclose(np.linalg.norm(centers, axis=1), 3.0)
    assert clusters.a_pretrain.x.shape[1] == 16


def test_cluster_labels_uniform(clusters):
    for split in (clusters.a_pretrain, clusters.b_train):
        assert np.array_equal(np.bincount(split.y), np.full(4, len(split) // 4))


def test_cluster_task_a_splits_disjoint(clusters):
    hashes = [_row_hashes(s.x) for s in (clusters.a_pretrain, clusters.a_pool, clusters.a_heldout)]
    assert not (hashes[0] & hashes[1] or hashes[0] & hashes[2] or hashes[1] & hashes[2])


def test_task_b_distribution_differs(clusters):
    ca, cb = clusters.meta["centers_a"], clusters.meta["centers_b"]
    assert np.linalg.norm(ca - cb, axis=1).min() > 0.5


def test_regeneration_is_identical():
    a, b = make_clusters(3), make_clusters(3)
    assert a.b_train.x.tobytes() == b.b_train.x.tobytes()
    c, d = make_charlm(1, sizes={"a_pretrain": 100}), make_charlm(1, sizes={"a_pretrain": 100})
    assert c.a_pretrain.x.tobytes() == d.a_pretrain.x.tobytes()


def test_windows_one_hot():
    split = windows(np.array([1, 2, 3, 0, 1]), context=2, vocab=4)
    assert split.x.shape == (3, 8) and np.array_equal(split.y, [3, 0, 1])
    assert np.array_equal(split.x[0], [0, 1, 0, 0, 0, 0, 1, 0])


def test_markov_tables_are_stochastic():
    t = markov_table(np.random.default_rng(0), favoured=range(4))
    assert np.allclose(t.sum(axis=2), 1.0) and (t >= 0).all()


def test_charlm_shapes_and_sources(charlm):
    for name, n in CHARLM_SIZES.items():
        assert getattr(charlm, name).x.shape == (n, 128)
    assert not np.allclose(charlm.meta["table_a"], charlm.meta["table_b"])


def test_entropy_rate_bounds_empirical_perplexity(charlm):
    # the true source's cross-entropy on its own samples approaches the entropy rate
    t = charlm.meta["table_a"]
    split = charlm.a_heldout
    ctx = split.x.reshape(len(split), 8, 16).argmax(axis=2)
    nll = -np.mean(np.log(t[ctx[:, -2], ctx[:, -1], split.y]))
    h = markov_entropy_rate(t)
    assert abs(nll - h) < 0.1
    assert np.exp(h) < 16


def test_uniform_predictor_has_vocab_perplexity(charlm):
    net = Network.init(char_lm_spec(), 0)
    for lay in net.layers:
        lay.weight = np.zeros_like(lay.weight)
    assert np.exp(task_loss(net, charlm.b_val.x, charlm.b_val.y)) == pytest.approx(16.0)


def test_unknown_pair():
    with pytest.raises(DataError):
        make_pair("glue")
