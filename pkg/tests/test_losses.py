import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lgseg.catalog import UNLABELED
from lgseg.embed import EmbeddingTable, normalize_rows, synthetic_anchors
from lgseg.errors import (
    DataError,
    DegenerateEmbeddingError,
    DimensionError,
    NegativeSamplingError,
    NumericError,
)
from lgseg.losses import (
    ContrastiveConfig,
    balanced_ce_weights,
    cfocal,
    cosine_distance,
    cross_entropy,
    focal,
    loss_neg,
    loss_pos,
    loss_total,
    pair_distance,
    sample_negatives,
    supcon,
    weighted_ce,
)


def test_cosine_distance_values():
    u = np.array([1.0, 2.0, 3.0])
    assert cosine_distance(u, u).value == pytest.approx(0, abs=1e-15)
    assert cosine_distance([1, 0], [0, 1]).value == pytest.approx(1)
    assert cosine_distance(u, -u).value == pytest.approx(2)
    with pytest.raises(DegenerateEmbeddingError):
        cosine_distance([0, 0], [1, 0])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(1e-3, 1e3))
def test_cosine_scale_invariance(seed, c):
    rng = np.random.default_rng(seed)
    u, v = rng.standard_normal((2, 6))
    assert abs(cosine_distance(c * u, v).value - cosine_distance(u, v).value) < 1e-12


def test_generic_and_fast_cosine_paths_agree():
    rng = np.random.default_rng(0)
    table = synthetic_anchors(6, 5, 0)
    f = rng.standard_normal((40, 5))
    h = rng.integers(0, 6, 40)
    h[::7] = UNLABELED
    neg = sample_negatives(h % 6, 6, 3, rng)
    fast = loss_total(f, h, table, neg)
    # reference value from per-pair distances, bypassing the similarity-matrix path
    lab = h != UNLABELED
    d_pos, _ = pair_distance(f[lab], table.rows[h[lab]], "cosine")
    d_neg, _ = pair_distance(f[lab][:, None], table.rows[neg[lab]], "cosine")
    value = np.maximum(d_pos, 0).mean() + np.maximum(0.6 - d_neg, 0).mean()
    assert fast.value == pytest.approx(value, abs=1e-14)


def test_loss_pos_examples():
    table = EmbeddingTable(np.eye(3))
    assert loss_pos(np.eye(3), [0, 1, 2], table).value == 0
    # cos = 0.5 gives distance 0.5
    f = np.array([[0.5, math.sqrt(3) / 2, 0]])
    assert loss_pos(f, [0], table).value == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(DimensionError):
        loss_pos(np.ones((2, 4)), [0, 1], table)


def test_loss_neg_examples():
    table = EmbeddingTable(np.eye(4))
    f = np.array([[1.0, 0, 0, 0]])
    assert loss_neg(f, [0], table, [[1, 2, 3]]).value == 0
    # three negatives; only the first is closer than t_neg
    a = np.array([0.8, math.sqrt(1 - 0.64), 0, 0])
    out = loss_neg(a[None], [0], table, [[1, 2, 3]], ContrastiveConfig(n_neg=3))
    # distances to anchors 1, 2, 3 are 0.4, 1 and 1
    assert out.value == pytest.approx((0.6 - 0.4) / 3, abs=1e-15)
    t2 = EmbeddingTable(normalize_rows(np.array([[1.0, 0, 0, 0], [0.8, 0.6, 0, 0]])))
    single = loss_neg(np.array([[1.0, 0, 0, 0]]), [0], t2, [[1]],
                      ContrastiveConfig(n_neg=1))
    assert single.value == pytest.approx(0.6 - 0.2, abs=1e-14)
    with pytest.raises(NegativeSamplingError):
        loss_neg(f, [0], table, [[0, 1, 2]])


def test_loss_total_combination():
    rng = np.random.default_rng(1)
    table = synthetic_anchors(5, 8, 1)
    f = rng.standard_normal((10, 8))
    h = rng.integers(0, 5, 10)
    neg = sample_negatives(h, 5, 3, rng)
    cfg0 = ContrastiveConfig(lam=0.0)
    pos = loss_pos(f, h, table, cfg0)
    t0 = loss_total(f, h, table, neg, cfg0)
    assert t0.value == pos.value and np.array_equal(t0.gradient, pos.gradient)
    cfg = ContrastiveConfig(lam=1.0)
    t1 = loss_total(f, h, table, neg, cfg)
    assert t1.value == pytest.approx(loss_pos(f, h, table).value
                                     + loss_neg(f, h, table, neg).value, abs=1e-15)


def test_contrastive_defaults():
    cfg = ContrastiveConfig()
    assert (cfg.t_pos, cfg.t_neg, cfg.lam, cfg.n_neg, cfg.distance) == (0.0, 0.6, 1.0, 3, "cosine")
    with pytest.raises(DataError):
        ContrastiveConfig(t_pos=0.7, t_neg=0.6)
    with pytest.raises(DataError):
        ContrastiveConfig(n_neg=0)


def test_inactive_hinges_have_zero_gradient():
    table = EmbeddingTable(np.eye(4))
    f = np.array([[1.0, 0, 0, 0], [0.2, 1.0, 0, 0]])
    out = loss_neg(f, [0, 1], table, [[1, 2, 3], [0, 2, 3]])
    assert np.all(out.gradient[0] == 0)
    cfg = ContrastiveConfig(t_pos=0.5)
    out = loss_pos(np.array([[1.0, 0.1, 0, 0]]), [0], table, cfg)
    assert out.value == 0 and np.all(out.gradient == 0)


def test_unlabeled_points_contribute_nothing():
    table = synthetic_anchors(4, 6, 0)
    rng = np.random.default_rng(2)
    f = rng.standard_normal((5, 6))
    h = np.array([0, UNLABELED, 2, UNLABELED, 1])
    neg = sample_negatives(np.where(h == UNLABELED, 3, h), 4, 3, rng)
    out = loss_total(f, h, table, neg)
    assert np.all(out.gradient[[1, 3]] == 0)
    keep = h != UNLABELED
    assert out.value == pytest.approx(loss_total(f[keep], h[keep], table, neg[keep]).value)


def test_descent_on_toy_instance_is_monotone():
    table = synthetic_anchors(4, 6, 3)
    rng = np.random.default_rng(3)
    f = rng.standard_normal((10, 6))
    h = rng.integers(0, 4, 10)
    neg = sample_negatives(h, 4, 3, rng)
    values = []
    for _ in range(100):
        out = loss_total(f, h, table, neg)
        values.append(out.value)
        f = f - 0.05 * out.gradient
    assert all(b <= a + 1e-12 for a, b in zip(values, values[1:]))
    assert values[-1] < values[0]


def test_sample_negatives():
    rng = np.random.default_rng(4)
    h = rng.integers(0, 4, 50)
    neg = sample_negatives(h, 4, 3, rng)
    for row, t in zip(neg, h):
        assert sorted(row) == sorted(set(range(4)) - {t})
    h = rng.integers(0, 10, 10_000)
    neg = sample_negatives(h, 10, 3, rng)
    assert not np.any(neg == h[:, None])
    assert all(len(set(r)) == 3 for r in neg[:500])
    with pytest.raises(NegativeSamplingError):
        sample_negatives([0], 3, 3, rng)


def test_sample_negatives_uniform_marginal():
    rng = np.random.default_rng(5)
    n = 100_000
    neg = sample_negatives(np.zeros(n, dtype=int), 7, 2, rng)
    freq = np.bincount(neg.ravel(), minlength=7)[1:] / neg.size
    p = 1 / 6
    assert np.all(np.abs(freq - p) < 3 * math.sqrt(p * (1 - p) / neg.size))


def test_focal_examples():
    z = np.array([[0.0, 0.0]])
    assert focal(z, [0], 2.0).value == pytest.approx(0.25 * math.log(2), abs=1e-15)
    big = np.array([[50.0, -50.0]])
    assert focal(big, [0], 2.0).value < 1e-40
    with pytest.raises(NumericError):
        focal(np.array([[np.inf, 0]]), [0])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 30), st.integers(2, 8))
def test_degenerate_identities(seed, n, k):
    rng = np.random.default_rng(seed)
    z = rng.normal(0, 3, (n, k))
    t = rng.integers(0, k, n)
    ce = cross_entropy(z, t)
    f0 = focal(z, t, 0.0)
    assert abs(f0.value - ce.value) <= 1e-12
    assert np.abs(f0.gradient - ce.gradient).max() <= 1e-12
    cf = cfocal(z, t, 0.0, np.full(k, 1 / k))
    assert abs(cf.value - ce.value / k) <= 1e-12
    w1 = weighted_ce(z, t, np.ones(k))
    assert abs(w1.value - ce.value) <= 1e-12
    w = rng.uniform(0.1, 3, k)
    assert weighted_ce(z, t, w).value == cfocal(z, t, 0.0, w).value


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_losses_non_negative(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(0, 5, (12, 4))
    t = rng.integers(0, 4, 12)
    for out in (cross_entropy(z, t), focal(z, t), cfocal(z, t, 2.0, rng.random(4)),
                weighted_ce(z, t, rng.random(4))):
        assert out.value >= 0 and np.all(np.isfinite(out.gradient))


def test_classification_ignores_unlabeled():
    z = np.random.default_rng(6).standard_normal((4, 3))
    t = np.array([0, UNLABELED, 2, UNLABELED])
    out = cross_entropy(z, t)
    assert np.all(out.gradient[[1, 3]] == 0)
    assert out.value == pytest.approx(cross_entropy(z[[0, 2]], t[[0, 2]]).value)
    assert cross_entropy(z, np.full(4, UNLABELED)).value == 0


def test_balanced_weights():
    w = balanced_ce_weights([100, 10, 1])
    counts = np.array([100, 10, 1])
    assert (w * counts).sum() / counts.sum() == pytest.approx(1)
    assert w[2] / w[0] == pytest.approx(100)


def test_supcon_separated_clusters_beat_random_labels():
    rng = np.random.default_rng(7)
    centers = np.array([[5.0, 0, 0], [0, 5.0, 0]])
    labels = np.repeat([0, 1], 30)
    f = centers[labels] + rng.normal(0, 0.3, (60, 3))
    good = supcon(f, labels, 5, 5, 0.1, rng=np.random.default_rng(1)).value
    bad = supcon(f, rng.permutation(labels), 5, 5, 0.1, rng=np.random.default_rng(1)).value
    assert good < bad
    a = supcon(f, labels, rng=np.random.default_rng(2))
    b = supcon(f, labels, rng=np.random.default_rng(2))
    assert a.value == b.value
    with pytest.raises(NegativeSamplingError):
        supcon(f[:4], [0, 0, 1, 1], 5, 5, rng=0)
