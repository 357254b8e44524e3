"""Point-cloud scenes and their binary formats.

SC3D layout (little-endian)::

    "SC3D" | u32 version=1 | u32 count | count x (3 f32 pos, 3 u8 rgb, u16 sem, u32 inst)

SPRD layout::

    "SPRD" | u32 version=1 | u32 count | count x u16 semantic
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from ._binary import Reader, read_source, write_destination
from .catalog import UNLABELED
from .errors import DimensionError, FormatError, SceneInvariantError

NONE = 0xFFFFFFFF
SC3D_MAGIC = b"SC3D"
SPRD_MAGIC = b"SPRD"
VERSION = 1
HEADER = struct.Struct("<4sII")

POINT_DTYPE = np.dtype([
    ("position", "<f4", (3,)),
    ("color", "u1", (3,)),
    ("semantic", "<u2"),
    ("instance", "<u4"),
])


def _frozen(a, dtype, shape_tail=()):
    a = np.ascontiguousarray(a, dtype=dtype)
    if a.ndim != 1 + len(shape_tail) or a.shape[1:] != shape_tail:
        raise DimensionError(f"expected array of shape (n, {shape_tail}), got {a.shape}")
    if a.flags.writeable:
        a = a.copy()
        a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Scene:
    """Immutable labeled point cloud.

    Arrays are stored in their on-disk dtypes: float32 positions, uint8
    colors, uint16 semantic ids (``UNLABELED`` = 0xFFFF) and uint32
    instance ids (``NONE`` = 0xFFFFFFFF).
    """

    positions: np.ndarray
    colors: np.ndarray
    semantic: np.ndarray
    instance: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "positions", _frozen(self.positions, "<f4", (3,)))
        object.__setattr__(self, "colors", _frozen(self.colors, "u1", (3,)))
        object.__setattr__(self, "semantic", _frozen(self.semantic, "<u2"))
        object.__setattr__(self, "instance", _frozen(self.instance, "<u4"))
        n = len(self.positions)
        if not (len(self.colors) == len(self.semantic) == len(self.instance) == n):
            raise DimensionError("scene arrays differ in length")

    @classmethod
    def empty(cls) -> "Scene":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros(0))

    def __len__(self):
        return len(self.positions)

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self._arrays(), other._arrays())
        )

    __hash__ = None

    def _arrays(self):
        return self.positions, self.colors, self.semantic, self.instance

    @property
    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        if len(self) == 0:
            return np.zeros(3), np.zeros(3)
        p = self.positions.astype(np.float64)
        return p.min(axis=0), p.max(axis=0)

    @property
    def n_instances(self) -> int:
        inst = self.instance[self.instance != NONE]
        return int(inst.max()) + 1 if inst.size else 0

    def with_labels(self, semantic=None, instance=None, colors=None) -> "Scene":
        return Scene(
            self.positions,
            self.colors if colors is None else colors,
            self.semantic if semantic is None else semantic,
            self.instance if instance is None else instance,
        )

    def masked(self, mask) -> "Scene":
        """Copy with points outside ``mask`` made UNLABELED."""
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (len(self),):
            raise DimensionError("mask length differs from scene point count")
        sem = np.where(mask, self.semantic, UNLABELED)
        inst = np.where(mask, self.instance, NONE)
        return self.with_labels(semantic=sem, instance=inst)

    def append(self, positions, colors, semantic, instance) -> "Scene":
        return Scene(
            np.concatenate([self.positions, np.asarray(positions, dtype="<f4")]),
            np.concatenate([self.colors, np.asarray(colors, dtype="u1")]),
            np.concatenate([self.semantic, np.asarray(semantic, dtype="<u2")]),
            np.concatenate([self.instance, np.asarray(instance, dtype="<u4")]),
        )

    def instance_aabbs(self, exclude_semantic=()) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        """World AABB per instance id, skipping instances whose category is excluded."""
        out = {}
        keep = self.instance != NONE
        if exclude_semantic:
            keep &= ~np.isin(self.semantic, list(exclude_semantic))
        inst = self.instance[keep].astype(np.int64)
        if inst.size == 0:
            return out
        pos = self.positions[keep].astype(np.float64)
        order = np.argsort(inst, kind="stable")
        inst, pos = inst[order], pos[order]
        ids, starts = np.unique(inst, return_index=True)
        lo = np.minimum.reduceat(pos, starts, axis=0)
        hi = np.maximum.reduceat(pos, starts, axis=0)
        for k, iid in enumerate(ids):
            out[int(iid)] = (lo[k], hi[k])
        return out


def validate_scene(scene: Scene) -> Scene:
    if not np.all(np.isfinite(scene.positions)):
        raise SceneInvariantError("non-finite coordinate")
    unl = scene.semantic == UNLABELED
    if np.any(scene.instance[unl] != NONE):
        raise SceneInvariantError("UNLABELED point carries an instance id")
    has = scene.instance != NONE
    if np.any(has):
        inst = scene.instance[has].astype(np.int64)
        sem = scene.semantic[has].astype(np.int64)
        ids = np.unique(inst)
        if ids[0] != 0 or ids[-1] != len(ids) - 1:
            raise SceneInvariantError("instance ids are not dense 0..K-1")
        pairs = np.unique(inst * 0x10000 + sem)
        if len(pairs) != len(ids):
            raise SceneInvariantError("an instance spans more than one semantic id")
    return scene


def concat_scenes(scenes) -> Scene:
    scenes = list(scenes)
    if not scenes:
        return Scene.empty()
    return Scene(
        np.concatenate([s.positions for s in scenes]),
        np.concatenate([s.colors for s in scenes]),
        np.concatenate([s.semantic for s in scenes]),
        np.concatenate([s.instance for s in scenes]),
    )


# -- SC3D ---------------------------------------------------------------------

def scene_to_bytes(scene: Scene) -> bytes:
    validate_scene(scene)
    rec = np.empty(len(scene), dtype=POINT_DTYPE)
    rec["position"] = scene.positions
    rec["color"] = scene.colors
    rec["semantic"] = scene.semantic
    rec["instance"] = scene.instance
    return HEADER.pack(SC3D_MAGIC, VERSION, len(scene)) + rec.tobytes()


def write_scene(scene: Scene, destination=None) -> int:
    """Serialize ``scene``; returns the number of bytes written."""
    return write_destination(destination, scene_to_bytes(scene))


def read_scene(source) -> Scene:
    reader = Reader(read_source(source), "SC3D")
    reader.magic(SC3D_MAGIC)
    (version,) = reader.unpack("<I")
    if version != VERSION:
        raise FormatError(f"SC3D: unsupported version {version}")
    (count,) = reader.unpack("<I")
    rec = np.frombuffer(reader.take(count * POINT_DTYPE.itemsize), dtype=POINT_DTYPE)
    reader.finish()
    scene = Scene(rec["position"], rec["color"], rec["semantic"], rec["instance"])
    return validate_scene(scene)


# -- SPRD ---------------------------------------------------------------------

def write_prediction(labels, destination=None) -> int:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise DimensionError("prediction labels must be one-dimensional")
    if labels.size and (labels.min() < 0 or labels.max() > UNLABELED):
        raise DimensionError("prediction label outside u16 range")
    payload = HEADER.pack(SPRD_MAGIC, VERSION, len(labels)) + labels.astype("<u2").tobytes()
    return write_destination(destination, payload)


def read_prediction(source) -> np.ndarray:
    reader = Reader(read_source(source), "SPRD")
    reader.magic(SPRD_MAGIC)
    (version,) = reader.unpack("<I")
    if version != VERSION:
        raise FormatError(f"SPRD: unsupported version {version}")
    (count,) = reader.unpack("<I")
    labels = np.frombuffer(reader.take(2 * count), dtype="<u2").copy()
    reader.finish()
    return labels


# -- statistics ---------------------------------------------------------------

def scene_stats(scenes, n_categories: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-category (instance_count, point_count) by enumeration.

    Instances are distinct (scene, instance id) pairs.
    """
    instances = np.zeros(n_categories, dtype=np.int64)
    points = np.zeros(n_categories, dtype=np.int64)
    for scene in scenes:
        sem = scene.semantic
        labeled = sem != UNLABELED
        if np.any(sem[labeled] >= n_categories):
            raise DimensionError("semantic id outside the catalog")
        points += np.bincount(sem[labeled], minlength=n_categories)[:n_categories]
        has = scene.instance != NONE
        if np.any(has):
            pairs = np.unique(scene.instance[has].astype(np.int64) * 0x10000
                              + sem[has].astype(np.int64))
            instances += np.bincount(pairs % 0x10000, minlength=n_categories)[:n_categories]
    return instances, points
