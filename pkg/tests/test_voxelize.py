import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import toy_scene
from lgseg.catalog import UNLABELED
from lgseg.errors import DimensionError, SceneInvariantError
from lgseg.scene import Scene
from lgseg.voxelize import devoxelize, majority_labels, voxel_downsample, voxelize


def _scene(pos, sem=None, col=None):
    n = len(pos)
    sem = np.zeros(n) if sem is None else sem
    col = np.zeros((n, 3)) if col is None else col
    inst = np.where(np.asarray(sem) == UNLABELED, 0xFFFFFFFF, 0)
    return Scene(pos, col, sem, inst)


def test_close_points_share_cell():
    g = voxelize(_scene([[0.001, 0.001, 0.001], [0.002, 0.001, 0.001]]), 0.02)
    assert len(g) == 1


def test_boundary_uses_floor():
    g = voxelize(_scene([[0.02, 0.0, 0.0]]), 0.02)
    assert g.coords[0].tolist() == [1, 0, 0]


def test_lattice_one_point_per_cell():
    k = np.arange(6)
    pos = np.stack(np.meshgrid(k, k, k, indexing="ij"), -1).reshape(-1, 3) * 0.02
    sem = np.arange(len(pos)) % 5
    s = _scene(pos, sem)
    g = voxelize(s, 0.02)
    assert len(g) == len(pos)
    np.testing.assert_array_equal(devoxelize(g, g.semantic), sem)


def test_non_finite_rejected():
    with pytest.raises(SceneInvariantError):
        voxelize(_scene([[np.nan, 0, 0]]), 0.02)


def test_devoxelize_shapes():
    g = voxelize(_scene([[0, 0, 0], [0.001, 0, 0], [0.0015, 0, 0]]), 0.02)
    assert devoxelize(g, [7]).tolist() == [7, 7, 7]
    with pytest.raises(DimensionError):
        devoxelize(g, [1, 2])


def test_majority_tie_lowest_and_unlabeled_ignored():
    cell = np.zeros(5, dtype=np.int64)
    assert majority_labels(cell, np.array([3, 7, 7, 3, UNLABELED]), 1)[0] == 3
    assert majority_labels(cell, np.array([UNLABELED, UNLABELED, 2, UNLABELED, UNLABELED]), 1)[0] == 2
    assert majority_labels(cell, np.full(5, UNLABELED), 1)[0] == UNLABELED


def _brute(scene, res):
    pos = scene.positions.astype(np.float32)
    cells = {}
    for i, p in enumerate(pos):
        key = tuple(int(v) for v in np.floor(p / np.float32(res)))
        cells.setdefault(key, []).append(i)
    out = {}
    for key, members in cells.items():
        labs = [int(scene.semantic[i]) for i in members if scene.semantic[i] != UNLABELED]
        if labs:
            vals, counts = np.unique(labs, return_counts=True)
            maj = int(vals[np.argmax(counts)])
        else:
            maj = UNLABELED
        out[key] = (sorted(members), scene.colors[members].astype(float).mean(axis=0), maj)
    return out


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.02, 0.05, 0.3]))
def test_matches_brute_force(seed, res):
    s = toy_scene(np.random.default_rng(seed), n=150)
    g = voxelize(s, res)
    oracle = _brute(s, res)
    assert len(g) == len(oracle)
    assert g.counts.sum() == len(s)
    for key, agg in g.cells.items():
        members, color, maj = oracle[key]
        assert sorted(agg.point_indices.tolist()) == members
        np.testing.assert_allclose(agg.mean_color, color, atol=1e-12)
        assert agg.semantic == maj


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(-20, 20), st.integers(-20, 20), st.integers(0, 20))
def test_translation_covariance(seed, a, b, c):
    res = 0.25  # exactly representable, so translation is exact in float32
    rng = np.random.default_rng(seed)
    s = toy_scene(rng, n=80)
    pos = np.round(s.positions * 64) / 64
    s = Scene(pos, s.colors, s.semantic, s.instance)
    shift = np.array([a, b, c]) * res
    t = Scene(pos + shift, s.colors, s.semantic, s.instance)
    g, h = voxelize(s, res), voxelize(t, res)
    np.testing.assert_array_equal(h.coords, g.coords + [a, b, c])
    np.testing.assert_array_equal(h.semantic, g.semantic)
    np.testing.assert_array_equal(h.point_cell, g.point_cell)
    np.testing.assert_allclose(h.mean_color, g.mean_color)


def test_downsample_reproduces_cells(small_corpus):
    s = small_corpus[0][0]
    down, grid = voxel_downsample(s, 0.05)
    again = voxelize(down, 0.05)
    np.testing.assert_array_equal(again.coords, grid.coords)
    np.testing.assert_array_equal(again.semantic, grid.semantic)
    assert len(down) == len(grid)
