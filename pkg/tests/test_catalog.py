import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lgseg.catalog import (
    UNLABELED,
    CategoryRecord,
    LabelCatalog,
    alpha_weights,
    assign_splits,
    default_split_sizes,
    format_catalog,
    inverse_log_weights,
    make_catalog,
    map_raw_label,
    parse_catalog,
    read_catalog,
    select_top_k,
    write_catalog,
)
from lgseg.errors import CatalogCountTooSmall, CatalogSizeError, DataError, SplitSizeError


def test_select_top_k_orders_by_count():
    recs = [CategoryRecord(i, n, c) for i, (n, c) in enumerate(zip("abc", (5, 9, 1)))]
    top = select_top_k(recs, 2)
    assert [r.instance_count for r in top] == [9, 5]
    assert [r.id for r in top] == [0, 1]


def test_select_top_k_name_tie_break():
    recs = [CategoryRecord(0, "b", 4), CategoryRecord(1, "a", 4)]
    assert select_top_k(recs, 1)[0].name == "a"


def test_select_top_k_large_vocabulary():
    rng = np.random.default_rng(0)
    counts = np.sort(rng.integers(1, 500, 550))[::-1]
    counts[:200] = np.maximum(counts[:200], 10)
    recs = [CategoryRecord(i, f"label {i}", int(c)) for i, c in enumerate(counts)]
    top = select_top_k(recs, 200)
    assert len(top) == 200
    assert min(r.instance_count for r in top) >= 10


def test_select_top_k_too_many():
    with pytest.raises(CatalogSizeError):
        select_top_k([CategoryRecord(0, "a", 1)], 2)


def test_assign_splits_cuts_by_point_count():
    cat = make_catalog(list("abcdef"), point_counts=[10, 60, 30, 50, 20, 40])
    split = assign_splits(cat, (2, 2, 2)).split
    assert {i for i, s in split.items() if s == "head"} == {1, 3}
    assert {i for i, s in split.items() if s == "tail"} == {0, 4}


def test_assign_splits_equal_counts_follow_names():
    cat = make_catalog(["d", "b", "c", "a"], point_counts=[5] * 4)
    split = assign_splits(cat, (1, 2, 1)).split
    assert split[3] == "head" and split[0] == "tail"


def test_assign_splits_bad_sizes():
    with pytest.raises(SplitSizeError):
        assign_splits(make_catalog(list("abc")), (1, 1, 2))


def test_default_split_sizes_at_benchmark_scale():
    assert default_split_sizes(200) == (66, 68, 66)


def test_alpha_weights_two_counts():
    w = alpha_weights(make_catalog(["a", "b"], point_counts=[100, 10]))
    assert w[0] == pytest.approx(2 / 3, abs=1e-15)
    assert w[1] == pytest.approx(1 / 3, abs=1e-15)


def test_alpha_weights_uniform_and_too_small():
    w = alpha_weights(make_catalog(list("abcd"), point_counts=[7] * 4))
    np.testing.assert_allclose(w, 0.25, atol=1e-15)
    with pytest.raises(CatalogCountTooSmall):
        alpha_weights(make_catalog(["a", "b"], point_counts=[1, 10]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(2, 10**9), min_size=1, max_size=30))
def test_alpha_weights_sum_and_base(counts):
    cat = make_catalog([f"c{i}" for i in range(len(counts))], point_counts=counts)
    w = alpha_weights(cat)
    assert abs(w.sum() - 1) < 1e-12
    np.testing.assert_allclose(alpha_weights(cat, np.log10), w, atol=1e-12, rtol=0)


def test_inverse_log_weights_uniform_and_subset():
    cat = make_catalog(list("abcd"), point_counts=[9, 9, 9, 9])
    np.testing.assert_allclose(inverse_log_weights(cat, [1, 3]), [0.5, 0.5])


def test_inverse_log_weights_exact_exponentials():
    # log(10000) = 2 log(100)
    cat = make_catalog(["a", "b"], point_counts=[100, 10000])
    np.testing.assert_allclose(inverse_log_weights(cat, [0, 1]), [2 / 3, 1 / 3], atol=1e-15)


def test_map_raw_label_and_aliases(tmp_path):
    cat = make_catalog(["chair", "table"])
    assert map_raw_label(cat, "Chair") == 0
    assert map_raw_label(cat, "stool") == UNLABELED
    mapping = tmp_path / "map.tsv"
    mapping.write_text("office chair\tchair\ncoffee table\ttable\nshelf\tnot here\n")
    path = tmp_path / "cat.tsv"
    write_catalog(cat, path)
    merged = read_catalog(path, mapping)
    assert map_raw_label(merged, "office chair") == 0
    assert map_raw_label(merged, "coffee table") == 1
    assert map_raw_label(merged, "shelf") == UNLABELED


def test_catalog_file_roundtrip():
    cat = assign_splits(make_catalog(["a", "b", "c"], [3, 2, 1], [30, 20, 10]), (1, 1, 1))
    text = format_catalog(cat)
    back = parse_catalog(text)
    assert format_catalog(back) == text
    assert back.split == cat.split


def test_catalog_invariants():
    with pytest.raises(DataError):
        LabelCatalog((CategoryRecord(1, "a"),))
    with pytest.raises(DataError):
        make_catalog(["Chair", "chair"])
    with pytest.raises(DataError):
        CategoryRecord(0, "a", -1)


def test_selection_and_split_deterministic():
    rng = np.random.default_rng(5)
    recs = [CategoryRecord(i, f"n{i}", int(c), int(c) * 10)
            for i, c in enumerate(rng.integers(1, 20, 60))]
    def build():
        top = select_top_k(recs, 30)
        return format_catalog(assign_splits(LabelCatalog(tuple(top)), (10, 10, 10)))
    assert build() == build()


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 50), min_size=3, max_size=40), st.data())
def test_splits_partition(counts, data):
    n = len(counts)
    head = data.draw(st.integers(1, n - 2))
    common = data.draw(st.integers(1, n - head - 1))
    cat = assign_splits(make_catalog([f"c{i}" for i in range(n)], point_counts=counts),
                        (head, common, n - head - common))
    assert sorted(cat.split) == list(range(n))
    assert [len(cat.ids_in(s)) for s in ("head", "common", "tail")] == \
        [head, common, n - head - common]
    # every head count dominates every tail count
    pc = cat.point_counts
    assert pc[cat.ids_in("head")].min() >= pc[cat.ids_in("tail")].max()
