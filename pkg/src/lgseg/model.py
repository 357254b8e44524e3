"""Per-cell point encoder, classification head and the two training stages.

The encoder is a small multilayer perceptron ``F -> H -> H -> D`` with
rectified hidden layers and a linear output, applied independently to each
occupied voxel cell.  Pre-training pulls its outputs onto fixed text anchors;
fine-tuning trains it jointly with a fresh linear head.

Checkpoint layout (little-endian)::

    "CKPT" | u32 version=1 | per tensor: u16 name_len, name utf-8, u8 rank,
                                          rank x u32 dims, f64 payload
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from ._binary import Reader, read_source, write_destination
from .augment import (
    AugmentConfig,
    InstanceBank,
    augment_scene,
    color_jitter,
    extract_instances,
    scene_obstacles,
)
from .catalog import UNLABELED, LabelCatalog, alpha_weights
from .embed import EmbeddingTable
from .errors import DataError, DimensionError, FormatError, NumericError
from .losses import (
    ContrastiveConfig,
    LossOutput,
    balanced_ce_weights,
    cfocal,
    cross_entropy,
    focal,
    loss_total,
    sample_negatives,
    sample_supcon_sets,
    supcon_from_sets,
    weighted_ce,
)
from .rng import substream
from .scene import Scene
from .voxelize import (
    SparseVoxelGrid,
    cell_coordinates,
    devoxelize,
    majority_labels,
    voxel_downsample,
    voxelize,
)

log = logging.getLogger(__name__)

N_FEATURES = 7
FINETUNE_LOSSES = ("ce", "weighted_ce", "focal", "cfocal")
CKPT_MAGIC = b"CKPT"


# -- configuration ------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    decay: float = 0.3
    milestones: tuple | None = None
    epochs: int = 40
    batch: int = 8
    seed: int = 0
    loss: str = "ce"
    use_color: bool = True
    resolution: float = 0.02
    max_cells: int | None = 4096
    hidden: int = 64
    gamma: float = 2.0
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    objective: str = "anchor"
    augment: AugmentConfig | None = None

    def __post_init__(self):
        if not self.lr > 0:
            raise DataError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise DataError("momentum must lie in [0, 1)")
        if not 0 < self.decay <= 1:
            raise DataError("decay must lie in (0, 1]")
        if self.batch < 1 or self.epochs < 0:
            raise DataError("batch must be >= 1 and epochs >= 0")
        if self.milestones is None:
            object.__setattr__(self, "milestones",
                               (int(0.55 * self.epochs), int(0.85 * self.epochs)))


def pretrain_config(**overrides) -> TrainConfig:
    return TrainConfig(**{"epochs": 60, **overrides})


def finetune_config(**overrides) -> TrainConfig:
    return TrainConfig(**{"epochs": 40, "loss": "cfocal", **overrides})


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Step schedule: base rate times ``decay`` per milestone already reached."""
    if epoch < 0:
        raise DataError("epoch must be non-negative")
    passed = sum(1 for m in cfg.milestones if m <= epoch)
    return cfg.lr * cfg.decay**passed


# -- parameters ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class EncoderParams:
    weights: tuple
    biases: tuple

    @property
    def widths(self) -> tuple:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def arrays(self) -> list:
        return [a for pair in zip(self.weights, self.biases) for a in pair]

    @classmethod
    def from_arrays(cls, arrays) -> "EncoderParams":
        return cls(tuple(arrays[0::2]), tuple(arrays[1::2]))

    def check(self):
        for w, b in zip(self.weights, self.biases):
            if w.shape[1] != b.shape[0]:
                raise DimensionError("bias length differs from layer width")
        for a, b in zip(self.weights[:-1], self.weights[1:]):
            if a.shape[1] != b.shape[0]:
                raise DimensionError("consecutive layer shapes do not chain")
        if not all(np.all(np.isfinite(a)) for a in self.arrays()):
            raise NumericError("non-finite encoder parameter")
        return self


@dataclass(frozen=True, eq=False)
class ClassifierHead:
    weight: np.ndarray
    bias: np.ndarray

    def arrays(self) -> list:
        return [self.weight, self.bias]


def init_encoder(widths, rng) -> EncoderParams:
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    weights, biases = [], []
    for k, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        gain = 1.0 if k == len(widths) - 2 else 2.0
        weights.append(rng.normal(0.0, np.sqrt(gain / a), size=(a, b)))
        biases.append(np.zeros(b))
    return EncoderParams(tuple(weights), tuple(biases))


def init_head(n_classes: int, dim: int, rng) -> ClassifierHead:
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    return ClassifierHead(rng.normal(0.0, 1.0 / np.sqrt(dim), size=(n_classes, dim)),
                          np.zeros(n_classes))


# -- featurization and forward/backward ---------------------------------------

def scene_frame(scene: Scene, resolution: float):
    """Centroid, largest bounding-box side (at least one cell) and lowest z of ``scene``."""
    if len(scene) == 0:
        return np.zeros(3), 1.0, 0.0
    pos = np.ascontiguousarray(scene.positions.T, dtype=np.float64)
    lo, hi = pos.min(axis=1), pos.max(axis=1)
    return pos.mean(axis=1), max(float((hi - lo).max()), resolution), float(lo[2])


def _featurize(centers, mean_color, frame, use_color) -> np.ndarray:
    centroid, extent, floor_z = frame
    out = np.empty((len(centers), N_FEATURES))
    out[:, :3] = (centers - centroid) / extent
    out[:, 3:6] = mean_color / 255.0 if use_color else 0.0
    out[:, 6] = centers[:, 2] - floor_z
    return out


def point_features(grid: SparseVoxelGrid, scene: Scene, use_color: bool = True) -> np.ndarray:
    """Per-cell inputs: centered/scaled center (3), mean color in [0, 1] (3), height (1)."""
    return _featurize(grid.centers.astype(np.float64), grid.mean_color,
                      scene_frame(scene, grid.resolution), use_color)


_KEY_OFFSET = 1 << 20
_KEY_BITS = 21


def frame_keys(coords) -> np.ndarray:
    """Order-preserving int64 keys of integer cell coordinates in a fixed frame."""
    q = np.asarray(coords, dtype=np.int64) + _KEY_OFFSET
    if q.size and (q.min() < 0 or q.max() >= 1 << _KEY_BITS):
        raise DataError("scene extends beyond the supported cell-coordinate range")
    return (q[:, 0] << (2 * _KEY_BITS)) | (q[:, 1] << _KEY_BITS) | q[:, 2]


@dataclass(frozen=True, eq=False)
class CellTable:
    """Occupied cells of one training scene, featurized on demand.

    Holds what :func:`point_features` needs without the per-point grid
    bookkeeping, so that training can featurize only the cells it samples
    and instance insertions can be merged in without re-voxelizing.
    """

    resolution: float
    coords: np.ndarray
    keys: np.ndarray
    counts: np.ndarray
    color_sum: np.ndarray
    labels: np.ndarray
    frame: tuple

    @classmethod
    def from_scene(cls, scene: Scene, resolution: float) -> "CellTable":
        grid = voxelize(scene, resolution)
        return cls(grid.resolution, grid.coords, frame_keys(grid.coords), grid.counts,
                   grid.mean_color * grid.counts[:, None], grid.semantic,
                   scene_frame(scene, resolution))

    def __len__(self):
        return len(self.keys)

    def features(self, idx=None, use_color: bool = True) -> np.ndarray:
        idx = slice(None) if idx is None else idx
        centers = (self.coords[idx] + 0.5) * self.resolution
        color = self.color_sum[idx] / self.counts[idx][:, None]
        return _featurize(centers, color, self.frame, use_color)

    def with_points(self, positions, colors, labels, frame) -> "CellTable":
        """Table of this scene plus extra points, as voxelizing the union would give.

        Exact when every cell that receives points holds a single point,
        which is the case for :func:`voxel_downsample` output.
        """
        if len(positions) == 0:
            return replace(self, frame=frame)
        q = cell_coordinates(positions, self.resolution)
        uk, first, inv = np.unique(frame_keys(q), return_index=True, return_inverse=True)
        inv = inv.reshape(-1)
        n_new = len(uk)
        pos = np.searchsorted(self.keys, uk)
        hit = pos < len(self.keys)
        hit[hit] = self.keys[pos[hit]] == uk[hit]
        if np.any(self.counts[pos[hit]] != 1):
            raise DataError("incremental merge needs single-point base cells")
        # base vote (count 1) plus the votes of the inserted points
        vote_cells = np.concatenate([inv, np.flatnonzero(hit)])
        vote_labels = np.concatenate([np.asarray(labels, dtype=np.int64),
                                      self.labels[pos[hit]]])
        merged = majority_labels(vote_cells, vote_labels, n_new)
        fresh = ~hit
        at = pos[fresh]
        rows = pos + np.searchsorted(at, pos, side="right")
        rows[fresh] = at + np.arange(fresh.sum())
        counts = np.insert(self.counts, at, 0)
        color_sum = np.insert(self.color_sum, at, 0.0, axis=0)
        counts[rows] += np.bincount(inv, minlength=n_new)
        c = np.asarray(colors, dtype=np.float64)
        color_sum[rows] += np.stack([np.bincount(inv, weights=c[:, k], minlength=n_new)
                                     for k in range(3)], axis=1)
        out_labels = np.insert(self.labels, at, UNLABELED)
        out_labels[rows] = merged
        return CellTable(self.resolution, np.insert(self.coords, at, q[first][fresh], axis=0),
                         np.insert(self.keys, at, uk[fresh]), counts, color_sum, out_labels,
                         frame)


def encode_forward(params: EncoderParams, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.weights[0].shape[0]:
        raise DimensionError(f"encoder expects (n, {params.weights[0].shape[0]}) inputs, got {x.shape}")
    acts = [x]
    pre = []
    h = x
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        pre.append(z)
        h = z if k == last else np.maximum(z, 0.0)
        acts.append(h)
    return h, (acts, pre)


def encode(params: EncoderParams, x) -> np.ndarray:
    return encode_forward(params, x)[0]


def encode_backward(params: EncoderParams, cache, dout) -> list:
    """Gradients ``[dW0, db0, dW1, db1, ...]`` for upstream gradient ``dout``."""
    acts, pre = cache
    grads = [None] * (2 * len(params.weights))
    g = dout
    for k in range(len(params.weights) - 1, -1, -1):
        if k != len(params.weights) - 1:
            g = g * (pre[k] > 0)
        grads[2 * k] = acts[k].T @ g
        grads[2 * k + 1] = g.sum(axis=0)
        if k:
            g = g @ params.weights[k].T
    return grads


def sgd_step(params: list, grads: list, state: list | None, lr: float, momentum: float):
    """Momentum SGD: ``v <- momentum * v + g``; ``p <- p - lr * v``."""
    if len(params) != len(grads):
        raise DimensionError("parameter and gradient lists differ in length")
    if state is None:
        state = [np.zeros_like(p) for p in params]
    new_p, new_v = [], []
    for p, g, v in zip(params, grads, state):
        if p.shape != g.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient")
        v = momentum * v + g
        new_v.append(v)
        new_p.append(p - lr * v)
    return new_p, new_v


def anchor_objective(params: EncoderParams, x, assignments, table: EmbeddingTable,
                     negatives, cfg: ContrastiveConfig):
    """Text-anchoring loss of the encoded cells and its encoder gradients."""
    out, cache = encode_forward(params, x)
    loss = loss_total(out, assignments, table, negatives, cfg)
    return loss.value, encode_backward(params, cache, loss.gradient)


def supcon_objective(params: EncoderParams, x, sources, cand, n_pos, temperature):
    out, cache = encode_forward(params, x)
    loss = supcon_from_sets(out, sources, cand, n_pos, temperature)
    return loss.value, encode_backward(params, cache, loss.gradient)


def classification_loss(logits, targets, loss: str, gamma: float = 2.0, weights=None) -> LossOutput:
    if loss == "ce":
        return cross_entropy(logits, targets)
    if loss == "weighted_ce":
        return weighted_ce(logits, targets, weights)
    if loss == "focal":
        return focal(logits, targets, gamma)
    if loss == "cfocal":
        return cfocal(logits, targets, gamma, weights)
    raise DataError(f"unknown loss {loss!r}; expected one of {FINETUNE_LOSSES}")


def segmentation_objective(params: EncoderParams, head: ClassifierHead, x, targets,
                           loss: str, gamma: float = 2.0, weights=None):
    """Classification loss through encoder and head; gradients as ``(encoder, head)`` lists."""
    feats, cache = encode_forward(params, x)
    logits = feats @ head.weight.T + head.bias
    out = classification_loss(logits, targets, loss, gamma, weights)
    g = out.gradient
    head_grads = [g.T @ feats, g.sum(axis=0)]
    enc_grads = encode_backward(params, cache, g @ head.weight)
    return out.value, enc_grads, head_grads


def class_weights(catalog: LabelCatalog, loss: str):
    """Per-class weights used by the weighted losses.

    The class-balanced focal weights are rescaled to average one so that a
    learning rate tuned for cross-entropy carries over.
    """
    if loss == "cfocal":
        return alpha_weights(catalog) * len(catalog)
    if loss == "weighted_ce":
        return balanced_ce_weights(catalog.point_counts)
    return None


# -- training -----------------------------------------------------------------

def scene_cells(scene: Scene, cfg: TrainConfig, mask=None) -> CellTable:
    if mask is not None:
        scene = scene.masked(mask)
    return CellTable.from_scene(scene, cfg.resolution)


def _pick_cells(labels: np.ndarray, max_cells, rng) -> np.ndarray:
    idx = np.flatnonzero(labels != UNLABELED)
    if max_cells is not None and len(idx) > max_cells:
        idx = np.sort(rng.choice(idx, max_cells, replace=False))
    return idx


def _batches(n: int, size: int, rng):
    order = rng.permutation(n)
    return [order[k:k + size] for k in range(0, n, size)]


def _check_masks(scenes, masks):
    if masks is None:
        return [None] * len(scenes)
    if len(masks) != len(scenes):
        raise DimensionError("one annotation mask per scene required")
    for s, m in zip(scenes, masks):
        if m is not None and len(m) != len(s):
            raise DimensionError("annotation mask length differs from scene point count")
    return list(masks)


def pretrain(scenes, catalog: LabelCatalog, table: EmbeddingTable, cfg: TrainConfig,
             rng=None, masks=None, params: EncoderParams | None = None, history=None) -> EncoderParams:
    """Contrastive pre-training of the encoder against fixed text anchors.

    ``rng`` overrides ``cfg.seed`` when given.  Negative sets are redrawn
    at every step.  Per-epoch mean losses are appended to ``history`` if a
    list is passed.
    """
    if len(table) != len(catalog):
        raise DimensionError("anchor table is not aligned to the catalog")
    seed = cfg.seed if rng is None else int(rng)
    masks = _check_masks(scenes, masks)
    data = [scene_cells(s, cfg, m) for s, m in zip(scenes, masks)]
    if params is None:
        params = init_encoder((N_FEATURES, cfg.hidden, cfg.hidden, table.dim),
                              substream(seed, "pretrain/init"))
    if params.out_dim != table.dim:
        raise DimensionError("encoder output width differs from anchor dimension")
    arrays, state = params.arrays(), None
    ccfg = cfg.contrastive
    for epoch in range(cfg.epochs):
        stream = substream(seed, f"pretrain/epoch={epoch}")
        lr = lr_at(cfg, epoch)
        losses = []
        for step, batch in enumerate(_batches(len(data), cfg.batch, stream)):
            p = EncoderParams.from_arrays(arrays)
            total, grads, used = 0.0, [np.zeros_like(a) for a in arrays], 0
            for k in batch:
                d = data[k]
                idx = _pick_cells(d.labels, cfg.max_cells, stream)
                if len(idx) == 0:
                    continue
                x, h = d.features(idx, cfg.use_color), d.labels[idx]
                if cfg.objective == "supcon":
                    src, cand = sample_supcon_sets(h, 5, 5, stream, n_sources=min(len(idx), 256))
                    value, g = supcon_objective(p, x, src, cand, 5, 0.1)
                else:
                    neg = sample_negatives(h, len(table), ccfg.n_neg, stream)
                    value, g = anchor_objective(p, x, h, table, neg, ccfg)
                total += value
                grads = [a + b for a, b in zip(grads, g)]
                used += 1
            if used == 0:
                continue
            grads = [g / used for g in grads]
            try:
                arrays, state = sgd_step(arrays, grads, state, lr, cfg.momentum)
            except NumericError as exc:
                raise NumericError(f"pretrain epoch {epoch} step {step}: {exc}") from exc
            losses.append(total / used)
        if history is not None and losses:
            history.append(float(np.mean(losses)))
        log.debug("pretrain epoch %d lr %.4g loss %.5f", epoch, lr,
                  np.mean(losses) if losses else float("nan"))
    return EncoderParams.from_arrays(arrays)


@dataclass(frozen=True, eq=False)
class AugmentationBases:
    scenes: list
    obstacles: list
    bank: InstanceBank
    cells: list
    resolution: float


def augmentation_bases(scenes, catalog: LabelCatalog, cfg: TrainConfig, masks=None,
                       bank: InstanceBank | None = None) -> AugmentationBases:
    """Per-scene inputs for online instance sampling.

    Scenes are reduced to one point per occupied cell first; that copy
    voxelizes to the same cells and labels, and is far cheaper to augment.
    Without an explicit ``bank``, tail-category instances are extracted
    from the reduced scenes.
    """
    masks = _check_masks(scenes, masks)
    aug = cfg.augment or AugmentConfig()
    reduced = [voxel_downsample(s if m is None else s.masked(m), cfg.resolution)[0]
               for s, m in zip(scenes, masks)]
    if bank is None:
        bank = extract_instances(reduced, catalog.ids_in("tail"))
    return AugmentationBases(reduced, [scene_obstacles(s, catalog, aug.cell) for s in reduced], bank,
                             [CellTable.from_scene(s, cfg.resolution) for s in reduced],
                             cfg.resolution)


def _augmented_cells(bases: AugmentationBases, k: int, catalog, aug: AugmentConfig, rng,
                     resolution: float) -> CellTable:
    base = bases.scenes[k]
    scene = augment_scene(base, bases.bank, catalog, aug, rng, bases.obstacles[k])
    if aug.jitter_sigma > 0:
        # jitter recolors every point, so the cached base cells no longer apply
        return CellTable.from_scene(color_jitter(scene, aug.jitter_sigma, rng), resolution)
    n = len(base)
    return bases.cells[k].with_points(scene.positions[n:], scene.colors[n:], scene.semantic[n:],
                                      scene_frame(scene, resolution))


def finetune(params: EncoderParams, scenes, catalog: LabelCatalog, masks=None,
             loss: str | None = None, cfg: TrainConfig = TrainConfig(), rng=None,
             bank: InstanceBank | None = None, history=None,
             bases: "AugmentationBases | None" = None):
    """Supervised training of encoder plus a fresh linear head on labeled cells.

    With ``cfg.augment`` set, every (epoch, scene) pair is augmented with
    instance sampling on its own random substream before voxelization.
    ``bases`` lets several runs share one :func:`augmentation_bases` result.
    """
    loss = cfg.loss if loss is None else loss
    if loss not in FINETUNE_LOSSES:
        raise DataError(f"unknown loss {loss!r}; expected one of {FINETUNE_LOSSES}")
    seed = cfg.seed if rng is None else int(rng)
    masks = _check_masks(scenes, masks)
    weights = class_weights(catalog, loss)
    head = init_head(len(catalog), params.out_dim, substream(seed, "finetune/head"))
    if all(m is not None and not np.any(m) for m in masks) and masks:
        return params, head

    aug = cfg.augment if cfg.augment is not None and cfg.augment.n_samples > 0 else None
    if aug is not None:
        if bases is None:
            bases = augmentation_bases(scenes, catalog, cfg, masks, bank)
        if bases.resolution != cfg.resolution or len(bases.scenes) != len(scenes):
            raise DataError("augmentation bases were built for a different setup")
        if len(bases.bank) == 0:
            aug = None
    cache = None if aug is not None else [scene_cells(s, cfg, m) for s, m in zip(scenes, masks)]

    arrays = params.arrays() + head.arrays()
    n_enc = len(params.arrays())
    state = None
    for epoch in range(cfg.epochs):
        stream = substream(seed, f"finetune/epoch={epoch}")
        lr = lr_at(cfg, epoch)
        losses = []
        for step, batch in enumerate(_batches(len(scenes), cfg.batch, stream)):
            p = EncoderParams.from_arrays(arrays[:n_enc])
            h = ClassifierHead(*arrays[n_enc:])
            total, grads, used = 0.0, [np.zeros_like(a) for a in arrays], 0
            for k in batch:
                if cache is not None:
                    d = cache[k]
                else:
                    srng = substream(seed, f"augment/epoch={epoch}/scene={k}")
                    d = _augmented_cells(bases, k, catalog, aug, srng, cfg.resolution)
                idx = _pick_cells(d.labels, cfg.max_cells, stream)
                if len(idx) == 0:
                    continue
                value, ge, gh = segmentation_objective(p, h, d.features(idx, cfg.use_color),
                                                       d.labels[idx], loss, cfg.gamma, weights)
                total += value
                grads = [a + b for a, b in zip(grads, ge + gh)]
                used += 1
            if used == 0:
                continue
            grads = [g / used for g in grads]
            try:
                arrays, state = sgd_step(arrays, grads, state, lr, cfg.momentum)
            except NumericError as exc:
                raise NumericError(f"finetune epoch {epoch} step {step}: {exc}") from exc
            losses.append(total / used)
        if history is not None and losses:
            history.append(float(np.mean(losses)))
        log.debug("finetune epoch %d lr %.4g loss %.5f", epoch, lr,
                  np.mean(losses) if losses else float("nan"))
    return EncoderParams.from_arrays(arrays[:n_enc]), ClassifierHead(*arrays[n_enc:])


def scratch_encoder(n_out: int, cfg: TrainConfig, rng=None) -> EncoderParams:
    seed = cfg.seed if rng is None else int(rng)
    return init_encoder((N_FEATURES, cfg.hidden, cfg.hidden, n_out), substream(seed, "scratch/init"))


# -- inference ----------------------------------------------------------------

def cell_logits(params: EncoderParams, head: ClassifierHead, x) -> np.ndarray:
    return encode(params, x) @ head.weight.T + head.bias


def predict(params: EncoderParams, head: ClassifierHead, scene: Scene,
            resolution: float = 0.02, use_color: bool = True) -> np.ndarray:
    """Per-point category ids; argmax ties go to the lowest id."""
    grid = voxelize(scene, resolution)
    if len(grid) == 0:
        return np.zeros(0, dtype=np.int64)
    logits = cell_logits(params, head, point_features(grid, scene, use_color))
    return devoxelize(grid, np.argmax(logits, axis=1))


def nearest_anchor_cells(features, table: EmbeddingTable) -> np.ndarray:
    f = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(f, axis=1, keepdims=True)
    cos = (f / np.where(norms > 0, norms, 1.0)) @ table.rows.T
    return np.argmax(cos, axis=1)


def nearest_anchor_classify(params: EncoderParams, table: EmbeddingTable, scene: Scene,
                            resolution: float = 0.02, use_color: bool = True) -> np.ndarray:
    """Label each cell by its closest anchor in cosine distance (lowest id on ties)."""
    grid = voxelize(scene, resolution)
    feats = encode(params, point_features(grid, scene, use_color))
    return devoxelize(grid, nearest_anchor_cells(feats, table))


# -- checkpoints --------------------------------------------------------------

def checkpoint_to_bytes(tensors: dict) -> bytes:
    out = [CKPT_MAGIC, struct.pack("<I", 1)]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


def write_checkpoint(tensors: dict, destination=None) -> int:
    return write_destination(destination, checkpoint_to_bytes(tensors))


def read_checkpoint(source) -> dict:
    reader = Reader(read_source(source), "CKPT")
    reader.magic(CKPT_MAGIC)
    (version,) = reader.unpack("<I")
    if version != 1:
        raise FormatError(f"CKPT: unsupported version {version}")
    tensors = {}
    while reader.remaining:
        (length,) = reader.unpack("<H")
        try:
            name = reader.take(length).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"CKPT: bad tensor name: {exc}") from exc
        (rank,) = reader.unpack("<B")
        dims = reader.unpack(f"<{rank}I")
        count = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(reader.take(8 * count), dtype="<f8").reshape(dims).copy()
    return tensors


def model_tensors(params: EncoderParams, head: ClassifierHead | None = None,
                  meta: dict | None = None) -> dict:
    """Named tensors for a checkpoint; ``meta`` scalars are stored as rank-0 tensors."""
    tensors = {f"meta.{k}": np.float64(v) for k, v in (meta or {}).items()}
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        tensors[f"encoder.W{k}"] = w
        tensors[f"encoder.b{k}"] = b
    if head is not None:
        tensors["head.W"] = head.weight
        tensors["head.b"] = head.bias
    return tensors


def model_from_tensors(tensors: dict):
    n = sum(1 for k in tensors if k.startswith("encoder.W"))
    if n == 0:
        raise FormatError("checkpoint holds no encoder tensors")
    try:
        params = EncoderParams(tuple(tensors[f"encoder.W{k}"] for k in range(n)),
                               tuple(tensors[f"encoder.b{k}"] for k in range(n))).check()
    except KeyError as exc:
        raise FormatError(f"checkpoint is missing tensor {exc}") from exc
    head = None
    if "head.W" in tensors:
        head = ClassifierHead(tensors["head.W"], tensors["head.b"])
    meta = {k[5:]: float(v) for k, v in tensors.items() if k.startswith("meta.")}
    return params, head, meta


def with_epochs(cfg: TrainConfig, epochs: int) -> TrainConfig:
    """Copy of ``cfg`` with a new epoch count and milestones re-derived from it."""
    return replace(cfg, epochs=epochs, milestones=None)
