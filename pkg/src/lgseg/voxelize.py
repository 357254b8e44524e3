"""Sparse voxel grids over scenes."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .catalog import UNLABELED
from .errors import DataError, DimensionError, SceneInvariantError
from .scene import NONE, Scene

DEFAULT_RESOLUTION = 0.02


@dataclass(frozen=True)
class CellAggregate:
    mean_color: np.ndarray
    semantic: int
    point_indices: np.ndarray


@dataclass(frozen=True, eq=False)
class SparseVoxelGrid:
    """Occupied cells of a scene at a fixed resolution.

    Cells are stored in lexicographic order of their integer coordinates.
    ``point_cell[i]`` is the row of the cell holding point ``i``.
    """

    resolution: float
    coords: np.ndarray
    point_cell: np.ndarray
    counts: np.ndarray
    mean_color: np.ndarray
    semantic: np.ndarray

    def __len__(self):
        return len(self.coords)

    @cached_property
    def _order(self):
        order = np.argsort(self.point_cell, kind="stable")
        offsets = np.concatenate([[0], np.cumsum(self.counts)])
        return order, offsets

    def point_indices(self, row: int) -> np.ndarray:
        order, offsets = self._order
        return order[offsets[row]:offsets[row + 1]]

    @cached_property
    def cells(self) -> dict:
        """Mapping from integer coordinate triples to their aggregates."""
        return {
            tuple(int(c) for c in self.coords[m]): CellAggregate(
                self.mean_color[m], int(self.semantic[m]), self.point_indices(m))
            for m in range(len(self))
        }

    @property
    def centers(self) -> np.ndarray:
        return (self.coords + 0.5) * self.resolution


def cell_coordinates(positions, resolution: float) -> np.ndarray:
    # Binning happens in float32 so that a stored coordinate equal to
    # k * resolution lands in cell k.
    pos = np.asarray(positions, dtype=np.float32)
    return np.floor(pos / np.float32(resolution)).astype(np.int64)


def _linear_keys(q: np.ndarray):
    cols = np.ascontiguousarray(q.T)  # column reductions are much faster contiguous
    lo = cols.min(axis=1)
    span = cols.max(axis=1) - lo + 1
    if float(span[0]) * float(span[1]) * float(span[2]) >= 2.0**62:
        return None
    return ((cols[0] - lo[0]) * span[1] + (cols[1] - lo[1])) * span[2] + (cols[2] - lo[2])


def majority_labels(cell_of_point: np.ndarray, labels: np.ndarray, n_cells: int,
                    missing: int = UNLABELED) -> np.ndarray:
    """Most frequent label per cell, lowest label on ties, ``missing`` labels ignored."""
    out = np.full(n_cells, missing, dtype=np.int64)
    keep = labels != missing
    if not np.any(keep):
        return out
    cells, labs = cell_of_point[keep].astype(np.int64), labels[keep].astype(np.int64)
    width = int(labs.max()) + 1
    if n_cells * width <= 1 << 24:
        votes = np.bincount(cells * width + labs, minlength=n_cells * width).reshape(n_cells, width)
        top = np.argmax(votes, axis=1)  # first maximum, so the lowest label wins
        hit = votes[np.arange(n_cells), top] > 0
        out[hit] = top[hit]
        return out
    pair =cell_of_point[keep].astype(np.int64) * 0x100000000 + labels[keep].astype(np.int64)
    uniq, counts = np.unique(pair, return_counts=True)
    cell, label = uniq // 0x100000000, uniq % 0x100000000
    order = np.lexsort((label, -counts, cell))
    cell, label = cell[order], label[order]
    first = np.concatenate([[True], cell[1:] != cell[:-1]])
    out[cell[first]] = label[first]
    return out


def voxelize(scene: Scene, resolution: float = DEFAULT_RESOLUTION) -> SparseVoxelGrid:
    if not resolution > 0:
        raise DataError(f"resolution must be positive, got {resolution}")
    if not np.all(np.isfinite(scene.positions)):
        raise SceneInvariantError("non-finite coordinate")
    n = len(scene)
    if n == 0:
        return SparseVoxelGrid(float(resolution), np.zeros((0, 3), np.int64), np.zeros(0, np.int64),
                               np.zeros(0, np.int64), np.zeros((0, 3)), np.zeros(0, np.int64))
    q = cell_coordinates(scene.positions, resolution)
    keys = _linear_keys(q)
    if keys is None:
        coords, inverse = np.unique(q, axis=0, return_inverse=True)
    else:
        _, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
        coords = q[first]
    inverse = inverse.reshape(-1)
    m = len(coords)
    counts = np.bincount(inverse, minlength=m)
    colors = scene.colors.astype(np.float64)
    mean_color = np.stack(
        [np.bincount(inverse, weights=colors[:, c], minlength=m) for c in range(3)], axis=1
    ) / counts[:, None]
    semantic = majority_labels(inverse, scene.semantic, m)
    return SparseVoxelGrid(float(resolution), coords, inverse, counts, mean_color, semantic)


def devoxelize(grid: SparseVoxelGrid, labels) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape[:1] != (len(grid),):
        raise DimensionError(f"need {len(grid)} cell labels, got {labels.shape[:1]}")
    return labels[grid.point_cell]


def voxel_downsample(scene: Scene, resolution: float) -> tuple[Scene, SparseVoxelGrid]:
    """One point per occupied cell, placed at the cell center.

    The point inherits the cell's mean color (rounded) and majority label;
    its instance is the majority instance among points carrying that label.
    Re-voxelizing the result at the same resolution reproduces the cells.
    """
    grid = voxelize(scene, resolution)
    positions = grid.centers.astype(np.float32)
    colors = np.clip(np.rint(grid.mean_color), 0, 255).astype(np.uint8)
    sem = grid.semantic
    agree = scene.semantic.astype(np.int64) == sem[grid.point_cell]
    inst_vote = np.where(agree, scene.instance.astype(np.int64), NONE)
    inst = majority_labels(grid.point_cell, inst_vote, len(grid), missing=NONE)
    has = inst != NONE
    if np.any(has):
        _, dense = np.unique(inst[has], return_inverse=True)
        inst[has] = dense.reshape(-1)
    down = Scene(positions, colors, sem.astype(np.uint16), inst.astype(np.uint32))
    return down, grid
