"""Training objectives with analytic gradients.

All losses are means over labeled points; points whose target is
``UNLABELED`` contribute neither value nor gradient.  Multiply by the
number of labeled points to recover summed objectives.

The text-anchoring pair uses a *distance* ``d``: matching pairs pay
``max(0, d - t_pos)`` and each sampled negative pays ``max(0, t_neg - d)``,
so matches are pulled onto their anchor and negatives are pushed at least
``t_neg`` away.  With cosine distance ``d = 1 - cos``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .catalog import UNLABELED
from .embed import EmbeddingTable
from .errors import DataError, DegenerateEmbeddingError, DimensionError, NegativeSamplingError, NumericError
from .rng import as_generator

DISTANCES = ("cosine", "l1", "l2")


class LossOutput(NamedTuple):
    value: float
    gradient: np.ndarray


@dataclass(frozen=True)
class ContrastiveConfig:
    t_pos: float = 0.0
    t_neg: float = 0.6
    lam: float = 1.0
    n_neg: int = 3
    distance: str = "cosine"

    def __post_init__(self):
        if self.distance not in DISTANCES:
            raise DataError(f"distance must be one of {DISTANCES}")
        if self.n_neg < 1:
            raise DataError("n_neg must be at least 1")
        if self.distance == "cosine" and not 0 <= self.t_pos < self.t_neg <= 2:
            raise DataError("cosine thresholds need 0 <= t_pos < t_neg <= 2")


@dataclass(frozen=True)
class FocalConfig:
    gamma: float = 2.0
    alpha: tuple | None = None

    def __post_init__(self):
        if self.gamma < 0:
            raise DataError("gamma must be non-negative")
        if self.alpha is not None and min(self.alpha) < 0:
            raise DataError("alpha entries must be non-negative")


# -- distances ----------------------------------------------------------------

def pair_distance(f: np.ndarray, a: np.ndarray, metric: str = "cosine"):
    """Row-wise distance between broadcastable ``f`` and ``a`` and its gradient wrt ``f``."""
    if metric == "cosine":
        nf = np.linalg.norm(f, axis=-1, keepdims=True)
        na = np.linalg.norm(a, axis=-1, keepdims=True)
        if np.any(nf == 0) or np.any(na == 0):
            raise DegenerateEmbeddingError("cosine distance of a zero vector")
        cos = np.sum(f * a, axis=-1, keepdims=True) / (nf * na)
        grad = -(a / (nf * na) - cos * f / nf**2)
        return 1.0 - cos[..., 0], grad
    diff = f - a
    if metric == "l1":
        return np.abs(diff).sum(axis=-1), np.sign(diff)
    if metric == "l2":
        d = np.linalg.norm(diff, axis=-1)
        safe = np.where(d > 0, d, 1.0)[..., None]
        return d, np.where(d[..., None] > 0, diff / safe, 0.0)
    raise DataError(f"unknown distance {metric!r}")


def cosine_distance(u, v) -> LossOutput:
    """``1 - cos(u, v)`` in [0, 2] and its gradient with respect to ``u``."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d, g = pair_distance(u, v, "cosine")
    return LossOutput(float(np.clip(d, 0.0, 2.0)), g)


# -- text anchoring -----------------------------------------------------------

def _labeled(features, assignments, table: EmbeddingTable):
    f = np.asarray(features, dtype=np.float64)
    h = np.asarray(assignments).astype(np.int64)
    if f.ndim != 2 or f.shape[1] != table.dim:
        raise DimensionError(f"features must be (n, {table.dim}), got {f.shape}")
    if h.shape != (len(f),):
        raise DimensionError("one assignment per feature row required")
    lab = h != UNLABELED
    if np.any(h[lab] < 0) or np.any(h[lab] >= len(table)):
        raise DimensionError("assignment outside the anchor table")
    return f, h, lab


def _anchor_cosine(f, rows, ids):
    """Cosine distances from rows of ``f`` to anchors ``rows[ids]``, ids shaped (n, k).

    Works through the (n, N) similarity matrix instead of gathering (n, k, D)
    anchor copies.  Returns the distances plus what :func:`_anchor_cosine_grad`
    needs.
    """
    nf = np.linalg.norm(f, axis=1)
    na = np.linalg.norm(rows, axis=1)
    if np.any(nf == 0) or np.any(na == 0):
        raise DegenerateEmbeddingError("cosine distance of a zero vector")
    unit = rows / na[:, None]
    cos_all = (f @ unit.T) / nf[:, None]
    cos = np.take_along_axis(cos_all, ids, axis=1)
    return 1.0 - cos, (nf, unit, cos)


def _anchor_cosine_grad(f, ids, weights, aux):
    """Gradient wrt ``f`` of ``sum_j weights[:, j] * d(f, a_ids[:, j])``."""
    nf, unit, cos = aux
    n, width = len(f), len(unit)
    flat = (np.arange(n)[:, None] * width + ids).ravel()
    scatter = np.bincount(flat, weights=np.broadcast_to(weights, ids.shape).ravel(),
                          minlength=n * width).reshape(n, width)
    pull = scatter @ unit
    coef = (weights * cos).sum(axis=1)
    return -(pull / nf[:, None]) + (coef / nf**2)[:, None] * f


def loss_pos(features, assignments, table: EmbeddingTable,
             cfg: ContrastiveConfig = ContrastiveConfig()) -> LossOutput:
    f, h, lab = _labeled(features, assignments, table)
    grad = np.zeros_like(f)
    n = int(lab.sum())
    if n == 0:
        return LossOutput(0.0, grad)
    if cfg.distance == "cosine":
        fl, ids = f[lab], h[lab][:, None]
        d, aux = _anchor_cosine(fl, table.rows, ids)
        excess = d[:, 0] - cfg.t_pos
        active = excess > 0
        grad[lab] = _anchor_cosine_grad(fl, ids, (active / n)[:, None], aux)
        return LossOutput(float(excess[active].sum() / n), grad)
    d, g = pair_distance(f[lab], table.rows[h[lab]], cfg.distance)
    excess = d - cfg.t_pos
    active = excess > 0
    grad[lab] = g * (active / n)[:, None]
    return LossOutput(float(excess[active].sum() / n), grad)


def loss_neg(features, assignments, table: EmbeddingTable, negatives,
             cfg: ContrastiveConfig = ContrastiveConfig()) -> LossOutput:
    f, h, lab = _labeled(features, assignments, table)
    neg = np.asarray(negatives).astype(np.int64)
    if neg.ndim != 2 or len(neg) != len(f):
        raise DimensionError("negatives must be an (n, n_neg) id array")
    grad = np.zeros_like(f)
    n = int(lab.sum())
    if n == 0:
        return LossOutput(0.0, grad)
    neg = neg[lab]
    if np.any(neg == h[lab][:, None]):
        raise NegativeSamplingError("a negative set contains the point's own category")
    if np.any(neg < 0) or np.any(neg >= len(table)):
        raise DimensionError("negative id outside the anchor table")
    k = neg.shape[1]
    if cfg.distance == "cosine":
        fl = f[lab]
        d, aux = _anchor_cosine(fl, table.rows, neg)
        shortfall = cfg.t_neg - d
        active = shortfall > 0
        grad[lab] = -_anchor_cosine_grad(fl, neg, active / (k * n), aux)
        return LossOutput(float(shortfall[active].sum() / (k * n)), grad)
    d, g = pair_distance(f[lab][:, None, :], table.rows[neg], cfg.distance)
    shortfall = cfg.t_neg - d
    active = shortfall > 0
    grad[lab] = -(g * active[..., None]).sum(axis=1) / (k * n)
    return LossOutput(float(shortfall[active].sum() / (k * n)), grad)


def loss_total(features, assignments, table: EmbeddingTable, negatives,
               cfg: ContrastiveConfig = ContrastiveConfig()) -> LossOutput:
    pos = loss_pos(features, assignments, table, cfg)
    if cfg.lam == 0:
        return pos
    neg = loss_neg(features, assignments, table, negatives, cfg)
    return LossOutput(pos.value + cfg.lam * neg.value, pos.gradient + cfg.lam * neg.gradient)


def sample_negatives(assignments, n_categories: int, n_neg: int, rng) -> np.ndarray:
    """Per point, ``n_neg`` distinct ids drawn uniformly from all ids except its own.

    ``n_categories`` may also be a catalog or table (its length is used).
    """
    if not isinstance(n_categories, (int, np.integer)):
        n_categories = len(n_categories)
    if n_categories < n_neg + 1:
        raise NegativeSamplingError(f"{n_categories} categories cannot supply {n_neg} negatives")
    rng = as_generator(rng)
    h = np.asarray(assignments).astype(np.int64)
    keys = rng.random((len(h), n_categories - 1))
    draw = np.argpartition(keys, n_neg - 1, axis=1)[:, :n_neg] if n_neg < n_categories - 1 \
        else np.argsort(keys, axis=1)
    return draw + (draw >= h[:, None])


# -- classification -----------------------------------------------------------

def _modulated_ce(logits, targets, gamma: float, weights=None) -> LossOutput:
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2:
        raise DimensionError("logits must be (n, N)")
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite logits")
    t = np.asarray(targets).astype(np.int64)
    if t.shape != (len(z),):
        raise DimensionError("one target per logit row required")
    lab = t != UNLABELED
    tl = t[lab]
    if np.any(tl < 0) or np.any(tl >= z.shape[1]):
        raise DimensionError("target outside the logit range")
    grad = np.zeros_like(z)
    n = len(tl)
    if n == 0:
        return LossOutput(0.0, grad)
    zl = z[lab]
    m = zl.max(axis=1, keepdims=True)
    logp = zl - (m + np.log(np.exp(zl - m).sum(axis=1, keepdims=True)))
    p = np.exp(logp)
    rows = np.arange(n)
    logpt = logp[rows, tl]
    pt = p[rows, tl]
    one_m = -np.expm1(logpt)
    w = 1.0 if weights is None else np.asarray(weights, dtype=np.float64)[tl]
    mod = one_m**gamma
    losses = -w * mod * logpt
    # d loss / d log p_t; the gamma term vanishes where (1 - p_t) = 0
    if gamma == 0:
        dlogpt = -w * mod
    else:
        safe = np.where(one_m > 0, one_m, 1.0)
        focus = np.where(one_m > 0, gamma * pt * logpt * safe ** (gamma - 1), 0.0)
        dlogpt = -w * (mod - focus)
    dl = -p
    dl[rows, tl] += 1.0
    grad[lab] = dl * (dlogpt / n)[:, None]
    return LossOutput(float(losses.sum() / n), grad)


def cross_entropy(logits, targets) -> LossOutput:
    return _modulated_ce(logits, targets, 0.0)


def focal(logits, targets, gamma: float = 2.0) -> LossOutput:
    """Mean of ``-(1 - p_t)^gamma log p_t`` over labeled points."""
    if gamma < 0:
        raise DataError("gamma must be non-negative")
    return _modulated_ce(logits, targets, gamma)


def cfocal(logits, targets, gamma: float = 2.0, alpha=None) -> LossOutput:
    """Class-balanced focal loss, ``-alpha_t (1 - p_t)^gamma log p_t``."""
    if gamma < 0:
        raise DataError("gamma must be non-negative")
    n_classes = np.shape(logits)[1]
    alpha = np.full(n_classes, 1.0 / n_classes) if alpha is None else np.asarray(alpha, float)
    if alpha.shape != (n_classes,):
        raise DimensionError("alpha needs one weight per class")
    return _modulated_ce(logits, targets, gamma, alpha)


def weighted_ce(logits, targets, weights) -> LossOutput:
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (np.shape(logits)[1],):
        raise DimensionError("weights need one entry per class")
    return _modulated_ce(logits, targets, 0.0, weights)


def balanced_ce_weights(point_counts) -> np.ndarray:
    """Inverse-frequency class weights scaled so the average labeled point weighs 1."""
    counts = np.asarray(point_counts, dtype=np.float64)
    if np.any(counts <= 0):
        raise DataError("class weights need positive point counts")
    w = 1.0 / counts
    return w * counts.sum() / (w * counts).sum()


# -- supervised contrastive baseline -----------------------------------------

def sample_supcon_sets(labels, n_pos: int, n_neg: int, rng, n_sources: int | None = None):
    """Source indices and their (positives, negatives) candidate index arrays."""
    rng = as_generator(rng)
    labels = np.asarray(labels).astype(np.int64)
    labeled = np.flatnonzero(labels != UNLABELED)
    sources = labeled
    if n_sources is not None and n_sources < len(labeled):
        sources = np.sort(rng.choice(labeled, n_sources, replace=False))
    members = {c: labeled[labels[labeled] == c] for c in np.unique(labels[labeled])}
    cand = np.empty((len(sources), n_pos + n_neg), dtype=np.int64)
    for row, i in enumerate(sources):
        same = members[labels[i]]
        same = same[same != i]
        diff = labeled[labels[labeled] != labels[i]]
        if len(same) < n_pos or len(diff) < n_neg:
            raise NegativeSamplingError(f"point {i} lacks {n_pos} positives or {n_neg} negatives")
        cand[row, :n_pos] = rng.choice(same, n_pos, replace=False)
        cand[row, n_pos:] = rng.choice(diff, n_neg, replace=False)
    return sources, cand


def supcon_from_sets(features, sources, cand, n_pos: int, temperature: float) -> LossOutput:
    f = np.asarray(features, dtype=np.float64)
    grad = np.zeros_like(f)
    if len(sources) == 0:
        return LossOutput(0.0, grad)
    norms = np.linalg.norm(f, axis=1, keepdims=True)
    if np.any(norms[sources] == 0) or np.any(norms[cand] == 0):
        raise DegenerateEmbeddingError("supcon on a zero feature")
    z = f / np.where(norms > 0, norms, 1.0)
    zs, zc = z[sources], z[cand]
    s = np.einsum("id,ikd->ik", zs, zc) / temperature
    m = s.max(axis=1, keepdims=True)
    e = np.exp(s - m)
    lse = m[:, 0] + np.log(e.sum(axis=1))
    per_source = lse - s[:, :n_pos].mean(axis=1)
    n = len(sources)
    ds = e / e.sum(axis=1, keepdims=True)
    ds[:, :n_pos] -= 1.0 / n_pos
    ds /= n * temperature
    dz = np.zeros_like(f)
    np.add.at(dz, sources, np.einsum("ik,ikd->id", ds, zc))
    np.add.at(dz, cand.reshape(-1), (ds[..., None] * zs[:, None, :]).reshape(-1, f.shape[1]))
    radial = np.sum(z * dz, axis=1, keepdims=True)
    grad = (dz - z * radial) / np.where(norms > 0, norms, 1.0)
    return LossOutput(float(per_source.mean()), grad)


def supcon(features, labels, n_pos: int = 5, n_neg: int = 5, temperature: float = 0.1,
           rng=None, n_sources: int | None = None) -> LossOutput:
    """Supervised contrastive loss over sampled positives and negatives.

    Each source point ``i`` gets ``n_pos`` same-label and ``n_neg``
    different-label candidates; its term is the usual
    ``-mean_p log softmax(z_i . z_c / temperature)_p`` over the candidates.
    """
    sources, cand = sample_supcon_sets(labels, n_pos, n_neg, rng, n_sources)
    return supcon_from_sets(features, sources, cand, n_pos, temperature)
