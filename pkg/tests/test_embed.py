import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lgseg.catalog import make_catalog
from lgseg.embed import (
    AnchorPCA,
    EmbeddingTable,
    embeddings_to_bytes,
    fit_pca,
    fit_pca_array,
    load_table,
    normalize_rows,
    project,
    project_array,
    read_embeddings,
    reconstruct,
    save_table,
    synthetic_anchors,
    write_embeddings,
)
from lgseg.errors import (
    DegenerateEmbeddingError,
    DimensionError,
    EmbeddingCoverageError,
    FormatError,
    PcaRankError,
)


def _emb_file(names, vectors):
    buf = io.BytesIO()
    write_embeddings(names, vectors, buf)
    return buf.getvalue()


def test_load_table_reorders_and_normalizes():
    cat = make_catalog(["chair", "table", "lamp"])
    rng = np.random.default_rng(0)
    vec = rng.standard_normal((3, 512)).astype(np.float32)
    data = _emb_file(["lamp", "chair", "table"], vec)
    table = load_table(data, cat)
    assert table.dim == 512 and len(table) == 3
    np.testing.assert_allclose(np.linalg.norm(table.rows, axis=1), 1, atol=1e-12)
    np.testing.assert_allclose(table.rows[0], vec[1] / np.linalg.norm(vec[1].astype(float)),
                               atol=1e-12)
    scaled = vec.copy()
    scaled[1] *= 5
    np.testing.assert_allclose(load_table(_emb_file(["lamp", "chair", "table"], scaled), cat).rows,
                               table.rows, atol=1e-12)


def test_load_table_errors():
    cat = make_catalog(["chair", "table"])
    with pytest.raises(EmbeddingCoverageError):
        load_table(_emb_file(["chair"], np.ones((1, 4))), cat)
    with pytest.raises(DegenerateEmbeddingError):
        load_table(_emb_file(["chair", "table"], [[1, 0], [0, 0]]), cat)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 6), st.integers(1, 9))
def test_emb1_roundtrip(seed, n, dim):
    rng = np.random.default_rng(seed)
    names = ["".join(rng.choice(list("abcdé z"), rng.integers(0, 9))) + str(k) for k in range(n)]
    vec = rng.standard_normal((n, dim)).astype(np.float32)
    data = embeddings_to_bytes(names, vec)
    got_names, got = read_embeddings(data)
    assert got_names == names
    assert embeddings_to_bytes(got_names, got) == data


def test_emb1_corruption():
    data = embeddings_to_bytes(["a"], np.ones((1, 3), np.float32))
    with pytest.raises(FormatError):
        read_embeddings(b"EMB2" + data[4:])
    with pytest.raises(FormatError):
        read_embeddings(data[:-2])


def test_save_table_roundtrip():
    table = synthetic_anchors(5, 8, 0)
    buf = io.BytesIO()
    save_table(table, buf)
    names, vec = read_embeddings(buf.getvalue())
    assert names == list(table.names)
    np.testing.assert_allclose(vec, table.rows, atol=1e-7)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_normalize_idempotent(seed):
    x = np.random.default_rng(seed).standard_normal((6, 5)) * 10
    once = normalize_rows(x)
    assert np.array_equal(normalize_rows(once), once)


def test_pca_rank_one_line():
    t = np.linspace(-1, 1, 20)[:, None]
    m = fit_pca_array(np.hstack([t, 2 * t]), 1)
    assert abs(m.retained_ratio - 1.0) < 1e-9


def test_pca_full_rank_reconstruction_and_orthonormal():
    x = np.random.default_rng(1).standard_normal((12, 6))
    m = fit_pca_array(x, 6)
    np.testing.assert_allclose(m.basis.T @ m.basis, np.eye(6), atol=1e-8)
    np.testing.assert_allclose(reconstruct(m, project_array(m, x)), x, atol=1e-6)
    assert np.all(np.diff(m.variances) <= 0)


def test_pca_sign_convention():
    m = fit_pca_array(np.random.default_rng(2).standard_normal((30, 5)), 3)
    pivots = np.argmax(np.abs(m.basis), axis=0)
    assert np.all(m.basis[pivots, np.arange(3)] > 0)


def test_pca_rank_errors():
    x = np.ones((4, 3))
    with pytest.raises(PcaRankError):
        fit_pca_array(x, 4)
    with pytest.raises(PcaRankError):
        fit_pca_array(x, 0)


def test_project_dims_and_mismatch():
    rng = np.random.default_rng(3)
    table = EmbeddingTable(normalize_rows(rng.standard_normal((120, 768))), source="gpt2")
    out = project(fit_pca(table, 96), table)
    assert out.dim == 96
    np.testing.assert_allclose(np.linalg.norm(out.rows, axis=1), 1, atol=1e-12)
    with pytest.raises(DimensionError):
        project(fit_pca(table, 10), synthetic_anchors(4, 8))


def test_project_equal_rows_stay_equal():
    rng = np.random.default_rng(4)
    rows = normalize_rows(rng.standard_normal((6, 5)))
    rows[3] = rows[1]
    table = EmbeddingTable(rows)
    out = project(fit_pca(table, 4), table)
    np.testing.assert_array_equal(out.rows[1], out.rows[3])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 10), st.integers(1, 5))
def test_pca_variances_match_eigendecomposition(seed, n, dim):
    x = np.random.default_rng(seed).standard_normal((n, dim))
    d = min(n, dim)
    m = fit_pca_array(x, d)
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (n - 1)
    # independent oracle: singular values of the centered data
    sv = np.linalg.svd(xc, compute_uv=False)
    oracle = np.zeros(d)
    oracle[:len(sv)] = sv[:d] ** 2 / (n - 1)
    np.testing.assert_allclose(m.variances, oracle, atol=1e-8)
    np.testing.assert_allclose(m.basis.T @ m.basis, np.eye(d), atol=1e-8)
    np.testing.assert_allclose(m.basis.T @ cov @ m.basis, np.diag(m.variances), atol=1e-8)


def test_synthetic_anchors():
    t = synthetic_anchors(20, 64, 1)
    np.testing.assert_allclose(t.rows @ t.rows.T, np.eye(20), atol=1e-8)
    assert np.array_equal(t.rows, synthetic_anchors(20, 64, 1).rows)
    big = synthetic_anchors(100, 16, 0).rows
    gram = big @ big.T
    np.fill_diagonal(gram, 0)
    assert np.abs(gram).max() < 1


def test_anchor_pca_estimator():
    x = np.random.default_rng(6).standard_normal((15, 8))
    est = AnchorPCA(n_components=3, normalize=False).fit(x)
    z = est.transform(x)
    assert z.shape == (15, 3)
    assert np.all(np.diff(est.explained_variance_ratio_) <= 0)
    full = AnchorPCA(n_components=8, normalize=False).fit(x)
    np.testing.assert_allclose(full.inverse_transform(full.transform(x)), x, atol=1e-8)
