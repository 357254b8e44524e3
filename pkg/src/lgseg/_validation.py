"""Input checks shared by the estimator, the experiment driver and the CLI."""

from __future__ import annotations

import numpy as np

from .catalog import LabelCatalog, assign_splits, default_split_sizes, with_counts
from .errors import DataError, DimensionError
from .scene import Scene, scene_stats


def check_scenes(X, allow_single: bool = True) -> tuple[list[Scene], bool]:
    """Normalize ``X`` to a list of scenes; the flag says whether one bare scene was given."""
    if isinstance(X, Scene):
        if not allow_single:
            raise DataError("expected a sequence of scenes")
        return [X], True
    try:
        scenes = list(X)
    except TypeError as exc:
        raise DataError(f"expected Scene objects, got {type(X).__name__}") from exc
    bad = [type(s).__name__ for s in scenes if not isinstance(s, Scene)]
    if bad:
        raise DataError(f"expected Scene objects, got {bad[0]}")
    if not scenes:
        raise DataError("no scenes given")
    return scenes, False


def check_masks(masks, scenes) -> list | None:
    if masks is None:
        return None
    masks = [None if m is None else np.asarray(m, dtype=bool) for m in masks]
    if len(masks) != len(scenes):
        raise DimensionError(f"{len(masks)} masks for {len(scenes)} scenes")
    for m, s in zip(masks, scenes):
        if m is not None and m.shape != (len(s),):
            raise DimensionError(f"mask of length {m.shape} for a scene of {len(s)} points")
    return masks


def check_labels(labels, n_categories: int, n_points: int | None = None) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise DimensionError("labels must be one-dimensional")
    if n_points is not None and len(labels) != n_points:
        raise DimensionError(f"{len(labels)} labels for {n_points} points")
    if labels.size and (labels.min() < 0 or labels.max() >= n_categories):
        raise DimensionError(f"label outside [0, {n_categories})")
    return labels.astype(np.int64)


def fitted_catalog(catalog: LabelCatalog, scenes) -> LabelCatalog:
    """Catalog with train-set counts and head/common/tail splits.

    A catalog that already carries a split is returned as is.
    """
    if not isinstance(catalog, LabelCatalog):
        raise DataError("a LabelCatalog is required")
    if catalog.split:
        return catalog
    inst, pts = scene_stats(scenes, len(catalog))
    return assign_splits(with_counts(catalog, inst, pts), default_split_sizes(len(catalog)))
