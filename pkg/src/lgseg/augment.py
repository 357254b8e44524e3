"""Instance-sampling augmentation for rare categories.

Rare-category instances are cut out of training scenes into an
:class:`InstanceBank`.  At training time they are dropped into other scenes:
a height map gives the support height under a random footprint, a random yaw
is applied, and the candidate is kept only if its axis-aligned box does not
overlap any existing object with positive volume.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.sparse.csgraph import connected_components
from scipy.sparse import coo_matrix
from scipy.spatial import cKDTree

from .catalog import LabelCatalog, inverse_log_weights
from .errors import DataError
from .rng import as_generator
from .scene import NONE, Scene

LINK_RADIUS = 0.05


@dataclass(frozen=True, eq=False)
class InstanceEntry:
    """One object in its local frame: centroid at x=y=0, lowest point at z=0."""

    category: int
    positions: np.ndarray
    colors: np.ndarray

    @property
    def aabb(self):
        return self.positions.min(axis=0), self.positions.max(axis=0)

    @classmethod
    def from_points(cls, category, positions, colors):
        p = np.asarray(positions, dtype=np.float64)
        offset = np.array([p[:, 0].mean(), p[:, 1].mean(), p[:, 2].min()])
        return cls(int(category), p - offset, np.asarray(colors, dtype=np.uint8))


@dataclass
class InstanceBank:
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    @property
    def by_category(self) -> dict[int, list[int]]:
        index: dict[int, list[int]] = {}
        for k, e in enumerate(self.entries):
            index.setdefault(e.category, []).append(k)
        return index

    @property
    def categories(self) -> list[int]:
        return sorted(self.by_category)


def components(positions: np.ndarray, radius: float) -> np.ndarray:
    pairs = cKDTree(positions).query_pairs(radius, output_type="ndarray")
    n = len(positions)
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    return labels


def extract_instances(scenes, ids, link_radius: float = LINK_RADIUS) -> InstanceBank:
    """Collect every instance whose category is in ``ids``.

    Scenes without instance ids fall back to connected components of
    same-category points linked within ``link_radius``.
    """
    wanted = sorted(set(int(i) for i in ids))
    bank = InstanceBank()
    for scene in scenes:
        sem = scene.semantic.astype(np.int64)
        use_ids = bool(np.any(scene.instance != NONE))
        for cid in wanted:
            sel = np.flatnonzero(sem == cid)
            if sel.size == 0:
                continue
            if use_ids:
                groups = scene.instance[sel].astype(np.int64)
            else:
                groups = components(scene.positions[sel].astype(np.float64), link_radius)
            for g in np.unique(groups):
                members = sel[groups == g]
                bank.entries.append(InstanceEntry.from_points(
                    cid, scene.positions[members], scene.colors[members]))
    return bank


class HeightMap:
    """Max scene height per xy cell (0 where a cell holds no points)."""

    def __init__(self, cell: float, origin, grid: np.ndarray):
        self.cell = float(cell)
        self.origin = np.asarray(origin, dtype=np.float64)
        self.grid = grid

    @property
    def extent(self) -> np.ndarray:
        return np.array(self.grid.shape, dtype=np.float64) * self.cell

    def copy(self) -> "HeightMap":
        return HeightMap(self.cell, self.origin.copy(), self.grid.copy())

    def cell_index(self, xy) -> np.ndarray:
        xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
        idx = np.floor((xy - self.origin) / self.cell).astype(np.int64)
        return np.clip(idx, 0, np.array(self.grid.shape) - 1)

    def height_at(self, x, y) -> float:
        i, j = self.cell_index([x, y])[0]
        return float(self.grid[i, j])

    def contains(self, lo_xy, hi_xy) -> bool:
        hi_edge = self.origin + self.extent
        return bool(np.all(lo_xy >= self.origin) and np.all(hi_xy <= hi_edge))

    def footprint_max(self, lo_xy, hi_xy) -> float:
        (i0, j0), (i1, j1) = self.cell_index(np.stack([lo_xy, hi_xy]))
        return float(self.grid[i0:i1 + 1, j0:j1 + 1].max())

    def raise_to(self, positions) -> None:
        """Fold new points into the map in place (cells outside are clipped)."""
        p = np.asarray(positions, dtype=np.float64)
        if len(p) == 0:
            return
        ij = self.cell_index(p[:, :2])
        np.maximum.at(self.grid, (ij[:, 0], ij[:, 1]), p[:, 2])


def build_height_map(scene: Scene, cell: float) -> HeightMap:
    if not cell > 0:
        raise DataError("height-map cell size must be positive")
    if len(scene) == 0:
        return HeightMap(cell, np.zeros(2), np.zeros((1, 1)))
    p = scene.positions.astype(np.float64)
    lo = p[:, :2].min(axis=0)
    shape = np.floor((p[:, :2].max(axis=0) - lo) / cell).astype(np.int64) + 1
    grid = np.full(tuple(shape), -np.inf)
    hm = HeightMap(cell, lo, grid)
    hm.raise_to(p)
    grid[np.isneginf(grid)] = 0.0
    return hm


class Placement(NamedTuple):
    x: float
    y: float
    z: float
    yaw: float


def _rotated(entry: InstanceEntry, yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    p = entry.positions
    out = np.empty_like(p)
    out[:, 0] = c * p[:, 0] - s * p[:, 1]
    out[:, 1] = s * p[:, 0] + c * p[:, 1]
    out[:, 2] = p[:, 2]
    return out


def propose_placement(hm: HeightMap, entry: InstanceEntry, rng) -> Placement:
    """Uniform (x, y) over the map, uniform yaw, z = support under the footprint."""
    rng = as_generator(rng)
    x, y = hm.origin + rng.random(2) * hm.extent
    yaw = rng.random() * 2.0 * math.pi
    r = _rotated(entry, yaw)
    lo = r[:, :2].min(axis=0) + (x, y)
    hi = r[:, :2].max(axis=0) + (x, y)
    return Placement(float(x), float(y), hm.footprint_max(lo, hi), float(yaw))


def place(entry: InstanceEntry, placement: Placement) -> np.ndarray:
    """World-frame float32 points of ``entry`` under ``placement``."""
    world = _rotated(entry, placement.yaw) + (placement.x, placement.y, placement.z)
    return world.astype(np.float32)


def aabb_of(points) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(points, dtype=np.float64)
    return p.min(axis=0), p.max(axis=0)


def overlap_volume(a, b) -> float:
    side = np.minimum(a[1], b[1]) - np.maximum(a[0], b[0])
    return float(np.prod(np.clip(side, 0.0, None)))


def check_collision(candidate, existing) -> bool:
    """True (accept) unless ``candidate`` overlaps an existing box with positive volume."""
    if len(existing) == 0:
        return True
    lo = np.array([b[0] for b in existing])
    hi = np.array([b[1] for b in existing])
    side = np.minimum(candidate[1], hi) - np.maximum(candidate[0], lo)
    return not bool(np.any(np.all(side > 0, axis=1)))


def try_insert(hm: HeightMap, boxes: list, entry: InstanceEntry, rng, max_support: float):
    """One placement attempt; returns (placement, world points, aabb) or None."""
    cand = propose_placement(hm, entry, rng)
    world = place(entry, cand)
    box = aabb_of(world)
    if not hm.contains(box[0][:2], box[1][:2]) or cand.z > max_support:
        return None
    if not check_collision(box, boxes):
        return None
    return cand, world, box


@dataclass(frozen=True)
class AugmentConfig:
    n_samples: int = 4
    max_attempts: int | None = None
    cell: float = 0.05
    jitter_sigma: float = 0.0
    max_support: float = 1.5
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 0:
            raise DataError("n_samples must be non-negative")
        if self.max_attempts is not None and self.max_attempts < self.n_samples:
            raise DataError("max_attempts must be at least n_samples")

    @property
    def attempts(self) -> int:
        return 10 * self.n_samples if self.max_attempts is None else self.max_attempts


class Insertion(NamedTuple):
    category: int
    instance: int
    placement: Placement
    aabb: tuple


def draw_category(categories, probs, rng) -> int:
    return int(categories[rng.choice(len(categories), p=probs)])


def scene_obstacles(scene: Scene, catalog: LabelCatalog, cell: float):
    """Height map and non-structural instance boxes that insertion starts from."""
    boxes = list(scene.instance_aabbs(exclude_semantic=catalog.structural_ids()).values())
    return build_height_map(scene, cell), boxes


def augment_scene_logged(scene: Scene, bank: InstanceBank, catalog: LabelCatalog,
                         cfg: AugmentConfig, rng=None, obstacles=None):
    """:func:`augment_scene` that also returns the accepted insertions.

    ``obstacles`` may carry a cached :func:`scene_obstacles` result for
    ``scene``; it is copied, never modified.
    """
    rng = as_generator(cfg.seed if rng is None else rng)
    if cfg.n_samples == 0:
        return scene, []
    if len(bank) == 0:
        raise DataError("instance bank is empty")
    index = bank.by_category
    cats = sorted(index)
    probs = inverse_log_weights(catalog, cats)
    if obstacles is None:
        obstacles = scene_obstacles(scene, catalog, cfg.cell)
    hm, boxes = obstacles[0].copy(), list(obstacles[1])
    next_id = scene.n_instances
    parts, log = [], []
    for _ in range(cfg.attempts):
        if len(log) >= cfg.n_samples:
            break
        cat = draw_category(cats, probs, rng)
        entry = bank.entries[index[cat][rng.integers(len(index[cat]))]]
        hit = try_insert(hm, boxes, entry, rng, cfg.max_support)
        if hit is None:
            continue
        cand, world, box = hit
        hm.raise_to(world)
        boxes.append(box)
        n = len(world)
        parts.append((world, entry.colors, np.full(n, cat), np.full(n, next_id)))
        log.append(Insertion(cat, next_id, cand, box))
        next_id += 1
    if not parts:
        return scene, log
    out = scene.append(*(np.concatenate(col) for col in zip(*parts)))
    return out, log


def augment_scene(scene: Scene, bank: InstanceBank, catalog: LabelCatalog,
                  cfg: AugmentConfig, rng=None, obstacles=None) -> Scene:
    """Insert up to ``cfg.n_samples`` bank instances into ``scene``.

    Categories are drawn with inverse-log-frequency probabilities over the
    bank's categories.  Fewer insertions than requested is a normal outcome
    once the attempt budget runs out.
    """
    return augment_scene_logged(scene, bank, catalog, cfg, rng, obstacles)[0]


def color_jitter(scene: Scene, sigma: float, rng) -> Scene:
    if sigma < 0:
        raise DataError("jitter sigma must be non-negative")
    if sigma == 0 or len(scene) == 0:
        return scene
    rng = as_generator(rng)
    noisy = scene.colors + rng.normal(0.0, sigma, size=scene.colors.shape)
    return scene.with_labels(colors=np.clip(np.rint(noisy), 0, 255).astype(np.uint8))

