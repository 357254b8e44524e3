"""Deterministic synthetic rooms with a Zipf-distributed object population.

A room is a floor at z=0 plus four walls.  Object categories (every catalog
category that is not structural) are ranked by id; the expected number of
instances of the rank-r category is proportional to ``r ** -zipf_exponent``.
Objects are box, cylinder or sphere surfaces placed with the same
height-map/collision logic used by instance-sampling augmentation.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .augment import InstanceEntry, build_height_map, try_insert
from .catalog import LabelCatalog, make_catalog
from .errors import DataError
from .rng import substream
from .scene import Scene, validate_scene

PRIMITIVES = ("box", "cylinder", "sphere")

OBJECT_NAMES = (
    "chair", "table", "cabinet", "bed", "sofa", "desk", "bookshelf", "lamp",
    "monitor", "box", "pillow", "trash can", "plant", "backpack", "toilet",
    "sink", "towel", "fire extinguisher", "dish rack", "telephone",
)


@dataclass(frozen=True)
class SyntheticSpec:
    n_categories: int = 20
    zipf_exponent: float = 1.0
    extent: tuple = (6.0, 6.0)
    density: float = 2000.0
    color_noise: float = 20.0
    primitives: tuple = PRIMITIVES
    wall_height: float = 2.0
    objects_per_scene: float = 14.0
    placement_attempts: int = 20

    def __post_init__(self):
        if not self.density > 0:
            raise DataError("surface density must be positive")
        if not all(e > 0 for e in self.extent):
            raise DataError("room extent must be positive")
        if not self.zipf_exponent > 0:
            raise DataError("zipf exponent must be positive")
        if not set(self.primitives) <= set(PRIMITIVES) or not self.primitives:
            raise DataError(f"primitives must be drawn from {PRIMITIVES}")


def synthetic_catalog(n_categories: int = 20) -> LabelCatalog:
    """Catalog with ``wall`` and ``floor`` first, then object categories."""
    if n_categories < 3:
        raise DataError("need at least wall, floor and one object category")
    names = ["wall", "floor"]
    for k in range(n_categories - 2):
        names.append(OBJECT_NAMES[k] if k < len(OBJECT_NAMES) else f"object {k}")
    return make_catalog(names)


@dataclass(frozen=True)
class Appearance:
    color: np.ndarray
    primitive: str
    size: np.ndarray


def appearance(name: str, rank: int, n_objects: int, primitives=PRIMITIVES) -> Appearance:
    """Per-category base color, primitive and size, fixed by the category name.

    Rarer categories are smaller, as rare objects tend to be in real scans.
    """
    rng = np.random.default_rng(zlib.crc32(name.encode("utf-8")))
    color = rng.integers(30, 226, size=3).astype(np.float64)
    primitive = primitives[int(rng.integers(len(primitives)))]
    shrink = 1.0 - 0.5 * rank / max(n_objects - 1, 1)
    size = rng.uniform(0.3, 1.0, size=3) * shrink
    return Appearance(color, primitive, size)


def _noisy_colors(base, n, sigma, rng) -> np.ndarray:
    return np.clip(np.rint(base + rng.normal(0.0, sigma, size=(n, 3))), 0, 255).astype(np.uint8)


def _count(area: float, density: float) -> int:
    return max(1, int(round(area * density)))


def sample_box(dims, density, rng) -> np.ndarray:
    """Points on the five visible faces of a box resting on z=0."""
    w, d, h = dims
    faces = np.array([w * d, w * h, w * h, d * h, d * h])
    n = _count(faces.sum(), density)
    face = rng.choice(5, size=n, p=faces / faces.sum())
    u, v = rng.random(n), rng.random(n)
    p = np.empty((n, 3))
    # top
    m = face == 0
    p[m] = np.stack([u[m] * w, v[m] * d, np.full(m.sum(), h)], axis=1)
    # front/back (y = 0 / y = d)
    for k, y in ((1, 0.0), (2, d)):
        m = face == k
        p[m] = np.stack([u[m] * w, np.full(m.sum(), y), v[m] * h], axis=1)
    # left/right (x = 0 / x = w)
    for k, x in ((3, 0.0), (4, w)):
        m = face == k
        p[m] = np.stack([np.full(m.sum(), x), u[m] * d, v[m] * h], axis=1)
    return p


def sample_cylinder(dims, density, rng) -> np.ndarray:
    r, h = dims[0] / 2.0, dims[2]
    side, top = 2 * np.pi * r * h, np.pi * r * r
    n = _count(side + top, density)
    on_top = rng.random(n) < top / (side + top)
    theta = rng.random(n) * 2 * np.pi
    rad = np.where(on_top, r * np.sqrt(rng.random(n)), r)
    z = np.where(on_top, h, rng.random(n) * h)
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


def sample_sphere(dims, density, rng) -> np.ndarray:
    r = dims[0] / 2.0
    n = _count(4 * np.pi * r * r, density)
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * r + (0.0, 0.0, r)


SAMPLERS = {"box": sample_box, "cylinder": sample_cylinder, "sphere": sample_sphere}


def _roles(spec: SyntheticSpec, catalog: LabelCatalog):
    if len(catalog) < spec.n_categories:
        raise DataError(f"catalog has {len(catalog)} categories, spec needs {spec.n_categories}")
    names = [r.name for r in catalog.records[:spec.n_categories]]
    try:
        floor, wall = names.index("floor"), names.index("wall")
    except ValueError as exc:
        raise DataError("synthetic scenes need 'floor' and 'wall' categories") from exc
    objects = [i for i in range(spec.n_categories) if i not in (floor, wall)]
    return floor, wall, objects


def _room(spec: SyntheticSpec, catalog, floor, wall, rng):
    W, L = spec.extent
    H = spec.wall_height
    parts = []
    n = _count(W * L, spec.density)
    pts = np.stack([rng.random(n) * W, rng.random(n) * L, np.zeros(n)], axis=1)
    look = appearance(catalog.records[floor].name, 0, 1)
    parts.append((pts, _noisy_colors(look.color, n, spec.color_noise, rng), floor))
    look = appearance(catalog.records[wall].name, 0, 1)
    for axis, const, length in ((0, 0.0, L), (0, W, L), (1, 0.0, W), (1, L, W)):
        n = _count(length * H, spec.density)
        along, up = rng.random(n) * length, rng.random(n) * H
        pts = np.empty((n, 3))
        pts[:, axis] = const
        pts[:, 1 - axis] = along
        pts[:, 2] = up
        parts.append((pts, _noisy_colors(look.color, n, spec.color_noise, rng), wall))
    return parts


def generate_synthetic_scene_logged(spec: SyntheticSpec, catalog: LabelCatalog, seed: int):
    """Generate a scene and the per-category (instances, points) it emitted."""
    floor, wall, objects = _roles(spec, catalog)
    rng = substream(seed, "synthetic/scene")
    parts = _room(spec, catalog, floor, wall, rng)
    base = Scene(
        np.concatenate([p for p, _, _ in parts]).astype(np.float32),
        np.concatenate([c for _, c, _ in parts]),
        np.concatenate([np.full(len(p), cid) for p, _, cid in parts]),
        np.concatenate([np.full(len(p), k) for k, (p, _, _) in enumerate(parts)]),
    )
    emitted_inst = np.zeros(len(catalog), dtype=np.int64)
    emitted_pts = np.zeros(len(catalog), dtype=np.int64)
    for _, _, cid in parts:
        emitted_inst[cid] += 1
    np.add.at(emitted_pts, base.semantic.astype(np.int64), 1)

    ranks = np.arange(1, len(objects) + 1, dtype=np.float64)
    weights = ranks ** -spec.zipf_exponent
    expected = spec.objects_per_scene * weights / weights.sum()
    counts = rng.poisson(expected)
    queue = np.repeat(np.array(objects, dtype=np.int64), counts)
    rng.shuffle(queue)

    hm = build_height_map(base, 0.05)
    boxes = []
    new = []
    next_id = len(parts)
    for cid in queue:
        rank = objects.index(int(cid))
        look = appearance(catalog.records[cid].name, rank, len(objects), spec.primitives)
        dims = look.size * rng.uniform(0.85, 1.15, size=3)
        pts = SAMPLERS[look.primitive](dims, spec.density, rng)
        entry = InstanceEntry.from_points(cid, pts, _noisy_colors(look.color, len(pts),
                                                                  spec.color_noise, rng))
        for _ in range(spec.placement_attempts):
            hit = try_insert(hm, boxes, entry, rng, max_support=1.5)
            if hit is not None:
                _, world, box = hit
                hm.raise_to(world)
                boxes.append(box)
                n = len(world)
                new.append((world, entry.colors, np.full(n, cid), np.full(n, next_id)))
                emitted_inst[cid] += 1
                emitted_pts[cid] += n
                next_id += 1
                break
    scene = base.append(*(np.concatenate(col) for col in zip(*new))) if new else base
    return validate_scene(scene), (emitted_inst, emitted_pts)


def generate_synthetic_scene(spec: SyntheticSpec, catalog: LabelCatalog, seed: int) -> Scene:
    return generate_synthetic_scene_logged(spec, catalog, seed)[0]


def generate_corpus(spec: SyntheticSpec, catalog: LabelCatalog, n_scenes: int, seed: int):
    """``n_scenes`` scenes plus the summed emission log ``(instances, points)``."""
    scenes = []
    inst = np.zeros(len(catalog), dtype=np.int64)
    pts = np.zeros(len(catalog), dtype=np.int64)
    for k in range(n_scenes):
        scene, (i, p) = generate_synthetic_scene_logged(spec, catalog, scene_seed(seed, k))
        scenes.append(scene)
        inst += i
        pts += p
    return scenes, (inst, pts)


def scene_seed(seed: int, index: int) -> int:
    return int(substream(seed, f"corpus/scene={index}").integers(0, 2**31 - 1))
