"""Evaluation: confusion-matrix metrics, instance AP and the limited-annotation sampler."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .augment import components
from .catalog import SPLITS, UNLABELED, LabelCatalog
from .errors import DataError, DimensionError
from .rng import as_generator
from .scene import NONE, Scene

AP_RANGE = (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)


# -- semantic metrics ---------------------------------------------------------

def confusion_matrix(n: int) -> np.ndarray:
    return np.zeros((n, n), dtype=np.int64)


def accumulate(cm, gt, pred) -> np.ndarray:
    """Return ``cm`` plus the tally of (gt, pred) pairs; UNLABELED gt is skipped.

    Rows are ground truth, columns predictions.  The input is not modified.
    """
    cm = np.asarray(cm)
    n = cm.shape[0]
    gt = np.asarray(gt).astype(np.int64).ravel()
    pred = np.asarray(pred).astype(np.int64).ravel()
    if gt.shape != pred.shape:
        raise DimensionError(f"{len(gt)} ground-truth labels vs {len(pred)} predictions")
    keep = gt != UNLABELED
    gt, pred = gt[keep], pred[keep]
    if np.any(gt < 0) or np.any(gt >= n) or np.any(pred < 0) or np.any(pred >= n):
        raise DimensionError(f"label outside [0, {n})")
    return cm + np.bincount(gt * n + pred, minlength=n * n).reshape(n, n)


def _split_ids(splits) -> dict:
    if isinstance(splits, LabelCatalog):
        return {s: splits.ids_in(s) for s in SPLITS} if splits.split else {}
    return {k: list(v) for k, v in (splits or {}).items()}


@dataclass
class EvalReport:
    """Per-category IoU / precision / recall; NaN marks an ABSENT category."""

    iou: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    means: dict
    names: list = field(default_factory=list)
    split_of: list = field(default_factory=list)

    @property
    def present(self) -> np.ndarray:
        return ~np.isnan(self.iou)

    @property
    def miou(self) -> float:
        return self.means["all"]

    def _rows(self):
        for c in range(len(self.iou)):
            name = self.names[c] if c < len(self.names) else str(c)
            split = self.split_of[c] if c < len(self.split_of) else "-"
            yield c, name, split, self.iou[c], self.precision[c], self.recall[c]

    def to_text(self) -> str:
        fmt = lambda v: "ABSENT" if np.isnan(v) else f"{v:.6f}"  # noqa: E731
        lines = [f"{c}\t{name}\t{split}\t{fmt(i)}\t{fmt(p)}\t{fmt(r)}"
                 for c, name, split, i, p, r in self._rows()]
        lines += [f"mean\t{k}\t{fmt(v)}" for k, v in self.means.items()]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        num = lambda v: None if np.isnan(v) else round(float(v), 6)  # noqa: E731
        cats = [{"id": c, "name": name, "split": split, "iou": num(i),
                 "precision": num(p), "recall": num(r)}
                for c, name, split, i, p, r in self._rows()]
        return json.dumps({"categories": cats,
                           "means": {k: num(v) for k, v in self.means.items()}}, indent=1)


def metrics(cm, splits=None) -> EvalReport:
    """IoU, precision and recall per category plus split means of IoU.

    ``splits`` is a catalog or a ``{name: ids}`` mapping.  Categories with
    ``tp + fp + fn == 0`` are ABSENT and excluded from every mean; "all" is
    the mean over the union of present categories.
    """
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    union = tp + fp + fn
    present = union > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(present, tp / union, np.nan)
        precision = np.where(present, np.where(tp + fp > 0, tp / (tp + fp), 0.0), np.nan)
        recall = np.where(present, np.where(tp + fn > 0, tp / (tp + fn), 0.0), np.nan)

    def mean(ids):
        vals = iou[list(ids)]
        vals = vals[~np.isnan(vals)]
        return float(vals.mean()) if len(vals) else float("nan")

    groups = _split_ids(splits)
    means = {name: mean(ids) for name, ids in groups.items()}
    means["all"] = mean(range(len(iou)))
    split_of = ["-"] * len(iou)
    for name, ids in groups.items():
        for c in ids:
            split_of[c] = name
    names = splits.names if isinstance(splits, LabelCatalog) else []
    return EvalReport(iou, precision, recall, means, names, split_of)


# -- instance AP --------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class InstancePrediction:
    indices: np.ndarray
    category: int
    confidence: float
    scene: int = 0

    def __post_init__(self):
        idx = np.unique(np.asarray(self.indices, dtype=np.int64))
        if idx.size == 0:
            raise DataError("instance prediction with no points")
        object.__setattr__(self, "indices", idx)


@dataclass(frozen=True, eq=False)
class GroundTruthInstance:
    indices: np.ndarray
    category: int
    scene: int = 0

    def __post_init__(self):
        object.__setattr__(self, "indices", np.unique(np.asarray(self.indices, dtype=np.int64)))


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.intersect1d(a, b, assume_unique=True).size
    union = a.size + b.size - inter
    return inter / union if union else 0.0


def average_precision(tp_flags, n_gt: int) -> float:
    """Area under the all-point interpolated precision/recall curve."""
    if n_gt == 0:
        return float("nan")
    tp_flags = np.asarray(tp_flags, dtype=bool)
    if tp_flags.size == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    precision = tp / np.arange(1, len(tp_flags) + 1)
    recall = tp / n_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope))


def _match(preds, gts, tau):
    order = sorted(range(len(preds)), key=lambda k: (-preds[k].confidence, k))
    used = [False] * len(gts)
    flags = []
    for k in order:
        p = preds[k]
        best, best_iou = -1, -1.0
        for g, gt in enumerate(gts):
            if used[g] or gt.scene != p.scene:
                continue
            v = mask_iou(p.indices, gt.indices)
            if v >= tau and v > best_iou:
                best, best_iou = g, v
        if best >= 0:
            used[best] = True
        flags.append(best >= 0)
    return flags


def ap_at_iou(preds, gts, tau: float) -> dict:
    """AP per category that has ground truth.

    Predictions are visited by descending confidence (ties: lower index
    first) and each claims the unmatched same-category ground truth of
    highest mask IoU, provided that IoU is at least ``tau``.
    """
    out = {}
    for c in sorted({g.category for g in gts}):
        cp = [p for p in preds if p.category == c]
        cg = [g for g in gts if g.category == c]
        out[c] = average_precision(_match(cp, cg, tau), len(cg))
    return out


def mean_ap(preds, gts, tau: float) -> float:
    ap = ap_at_iou(preds, gts, tau)
    return float(np.mean(list(ap.values()))) if ap else float("nan")


def map_range(preds, gts) -> tuple[float, float, float]:
    """(mAP@0.25, mAP@0.5, mAP averaged over the 10 thresholds 0.50..0.95)."""
    ranged = [mean_ap(preds, gts, t) for t in AP_RANGE]
    return mean_ap(preds, gts, 0.25), ranged[0], float(np.mean(ranged))


def ground_truth_instances(scene: Scene, scene_index: int = 0, exclude=()) -> list:
    """One ground-truth instance per instance id, skipping categories in ``exclude``."""
    out = []
    has = np.flatnonzero(scene.instance != NONE)
    for i in np.unique(scene.instance[has]):
        idx = has[scene.instance[has] == i]
        cat = int(scene.semantic[idx[0]])
        if cat not in exclude:
            out.append(GroundTruthInstance(idx, cat, scene_index))
    return out


def proposals_from_labels(positions, labels, scene_index: int = 0, link_radius: float = 0.05,
                          exclude=()) -> list:
    """Instance proposals from a semantic labeling.

    Same-label points closer than ``link_radius`` are linked; each connected
    component becomes a proposal whose confidence is its share of the points
    carrying that label.
    """
    labels = np.asarray(labels).astype(np.int64)
    pos = np.asarray(positions, dtype=np.float64)
    out = []
    for c in np.unique(labels):
        if c in exclude or c == UNLABELED:
            continue
        sel = np.flatnonzero(labels == c)
        comp = components(pos[sel], link_radius)
        for g in np.unique(comp):
            members = sel[comp == g]
            out.append(InstancePrediction(members, int(c), members.size / sel.size, scene_index))
    return out


# -- limited annotations ------------------------------------------------------

def farthest_point_sampling(points, seeds, k: int) -> list[int]:
    """``k`` new indices, each maximizing its distance to everything chosen so far.

    Ties go to the lowest index.
    """
    p = np.asarray(points, dtype=np.float64)
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise DataError("farthest point sampling needs at least one seed")
    if any(s < 0 or s >= len(p) for s in seeds):
        raise DimensionError("seed index out of range")
    free = len(p) - len(set(seeds))
    if k < 0 or k > free:
        raise DimensionError(f"cannot pick {k} new points from {free} unselected")
    chosen = np.zeros(len(p), dtype=bool)
    chosen[seeds] = True
    dist = np.full(len(p), np.inf)
    for s in dict.fromkeys(seeds):
        dist = np.minimum(dist, np.sum((p - p[s]) ** 2, axis=1))
    out = []
    for _ in range(k):
        dist[chosen] = -1.0
        nxt = int(np.argmax(dist))
        out.append(nxt)
        chosen[nxt] = True
        dist = np.minimum(dist, np.sum((p - p[nxt]) ** 2, axis=1))
    return out


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def sample_limited_annotations(scene: Scene, fraction: float, rng=None) -> np.ndarray:
    """Boolean mask of points that keep their labels.

    The budget is ``round(fraction * labeled points)``.  Each instance gets
    one random point first (a random subset of instances if the budget is
    smaller than their number); farthest point sampling over the labeled
    points fills the rest.
    """
    if not 0 < fraction <= 1:
        raise DataError("annotation fraction must lie in (0, 1]")
    rng = as_generator(rng)
    labeled = np.flatnonzero(scene.semantic != UNLABELED)
    mask = np.zeros(len(scene), dtype=bool)
    budget = _round_half_up(fraction * len(labeled))
    if budget >= len(labeled):
        mask[labeled] = True
        return mask
    if budget == 0:
        return mask
    inst = scene.instance[labeled].astype(np.int64)
    ids = np.unique(inst[inst != NONE])
    if budget < len(ids):
        ids = np.sort(rng.choice(ids, size=budget, replace=False))
    picks = [int(rng.choice(np.flatnonzero(inst == i))) for i in ids]
    if not picks:
        picks = [int(rng.integers(len(labeled)))]
    extra = farthest_point_sampling(scene.positions[labeled], picks, budget - len(picks))
    mask[labeled[picks + extra]] = True
    return mask
