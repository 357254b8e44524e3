"""Multi-arm, multi-seed comparison on a synthetic long-tail corpus.

An arm is ``init+loss[+augment]`` with ``init`` in {scratch, pretrain}.
Arms that pre-train share one pre-trained encoder per seed, and all
augmenting arms share the reduced training scenes and instance bank.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .augment import AugmentConfig
from .bench import accumulate, confusion_matrix, metrics
from .catalog import SPLITS
from .embed import synthetic_anchors
from .errors import DataError
from .model import (
    FINETUNE_LOSSES,
    augmentation_bases,
    cell_logits,
    finetune,
    finetune_config,
    point_features,
    pretrain,
    pretrain_config,
    scratch_encoder,
)
from .scene import scene_stats
from .synthetic import SyntheticSpec, generate_corpus, synthetic_catalog
from .voxelize import devoxelize, voxelize
from ._validation import fitted_catalog

OURS = "pretrain+cfocal+augment"
COLUMNS = SPLITS + ("all",)


@dataclass(frozen=True)
class Arm:
    init: str
    loss: str
    augment: bool

    @classmethod
    def parse(cls, text: str) -> "Arm":
        parts = text.strip().split("+")
        if len(parts) not in (2, 3) or parts[0] not in ("scratch", "pretrain") \
                or parts[1] not in FINETUNE_LOSSES or parts[2:] not in ([], ["augment"]):
            raise DataError(f"bad arm {text!r}; expected init+loss[+augment]")
        return cls(parts[0], parts[1], len(parts) == 3)

    @property
    def name(self) -> str:
        return f"{self.init}+{self.loss}" + ("+augment" if self.augment else "")

    @property
    def label(self) -> str:
        return "ours" if self.name == OURS else self.name


@dataclass(frozen=True)
class ExperimentConfig:
    n_categories: int = 20
    zipf_exponent: float = 1.0
    train_scenes: int = 40
    val_scenes: int = 10
    corpus_seed: int = 0
    seeds: tuple = (0, 1, 2, 3, 4)
    arms: tuple = ("scratch+ce", OURS)
    resolution: float = 0.05
    max_cells: int = 256
    pretrain_epochs: int = 120
    finetune_epochs: int = 120
    n_samples: int = 4
    hidden: int = 64
    anchor_dim: int = 64
    use_color: bool = True

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "arms", tuple(Arm.parse(a).name for a in self.arms))
        if not self.seeds or not self.arms:
            raise DataError("an experiment needs at least one seed and one arm")
        if self.train_scenes < 1 or self.val_scenes < 1:
            raise DataError("need at least one training and one validation scene")

    @classmethod
    def from_mapping(cls, values: dict) -> "ExperimentConfig":
        """Build from string values as found in a key=value file."""
        kinds = {f.name: f.default for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in kinds:
                raise DataError(f"unknown experiment key {key!r}")
            default = kinds[key]
            try:
                if isinstance(default, tuple):
                    items = [s.strip() for s in str(raw).split(",") if s.strip()]
                    kwargs[key] = tuple(int(s) for s in items) if key == "seeds" else tuple(items)
                elif isinstance(default, bool):
                    kwargs[key] = str(raw).lower() in ("1", "true", "yes", "on")
                else:
                    kwargs[key] = type(default)(raw)
            except ValueError as exc:
                raise DataError(f"bad value for {key}: {raw!r}") from exc
        return cls(**kwargs)

    def as_mapping(self) -> dict:
        out = asdict(self)
        out["seeds"] = ",".join(str(s) for s in self.seeds)
        out["arms"] = ",".join(self.arms)
        return out


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    scores: dict  # arm name -> seed -> {split: mIoU}
    seconds: dict = field(default_factory=dict)  # arm name -> summed wall time

    def summary(self, arm: str, column: str) -> tuple[float, float]:
        vals = np.array([self.scores[arm][s][column] for s in self.config.seeds])
        std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        return float(vals.mean()), std

    def table(self) -> str:
        """Per-arm mean +/- sample std of each split mIoU (in percent) over seeds."""
        width = max(len(Arm.parse(a).label) for a in self.config.arms) + 2
        head = "arm".ljust(width) + "".join(c.rjust(16) for c in COLUMNS)
        lines = [f"seeds={','.join(map(str, self.config.seeds))}", head]
        for arm in self.config.arms:
            cells = []
            for col in COLUMNS:
                m, s = self.summary(arm, col)
                cells.append(f"{100 * m:.2f} ± {100 * s:.2f}".rjust(16))
            lines.append(Arm.parse(arm).label.ljust(width) + "".join(cells))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({"config": self.config.as_mapping(),
                           "scores": {a: {str(s): v for s, v in by.items()}
                                      for a, by in self.scores.items()}}, indent=1)


class _Context:
    """Corpus, catalog and cached validation features shared by every run."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        spec = SyntheticSpec(n_categories=cfg.n_categories, zipf_exponent=cfg.zipf_exponent)
        base = synthetic_catalog(cfg.n_categories)
        scenes, _ = generate_corpus(spec, base, cfg.train_scenes + cfg.val_scenes, cfg.corpus_seed)
        self.train = scenes[:cfg.train_scenes]
        self.val = scenes[cfg.train_scenes:]
        self.catalog = fitted_catalog(base, self.train)
        self.val_cells = []
        for s in self.val:
            grid = voxelize(s, cfg.resolution)
            self.val_cells.append((grid, point_features(grid, s, cfg.use_color)))
        self._bases = None

    def bases(self, ft_cfg):
        if self._bases is None:
            self._bases = augmentation_bases(self.train, self.catalog, ft_cfg)
        return self._bases

    def configs(self, arm: Arm, seed: int):
        c = self.cfg
        common = dict(seed=seed, resolution=c.resolution, max_cells=c.max_cells, hidden=c.hidden,
                      use_color=c.use_color)
        aug = AugmentConfig(n_samples=c.n_samples) if arm.augment else None
        return (pretrain_config(epochs=c.pretrain_epochs, **common),
                finetune_config(epochs=c.finetune_epochs, loss=arm.loss, augment=aug, **common))

    def evaluate(self, params, head) -> dict:
        n = len(self.catalog)
        cm = confusion_matrix(n)
        for scene, (grid, x) in zip(self.val, self.val_cells):
            pred = devoxelize(grid, np.argmax(cell_logits(params, head, x), axis=1))
            cm = accumulate(cm, scene.semantic, pred)
        report = metrics(cm, self.catalog)
        return {k: float(report.means[k]) for k in COLUMNS}


def _run_seed(ctx: _Context, seed: int, arms) -> tuple[dict, dict]:
    scores, seconds = {}, {}
    encoder = None
    for name in arms:
        arm = Arm.parse(name)
        t0 = time.perf_counter()
        pre_cfg, ft_cfg = ctx.configs(arm, seed)
        if arm.init == "pretrain":
            if encoder is None:
                table = synthetic_anchors(len(ctx.catalog), ctx.cfg.anchor_dim, seed)
                encoder = pretrain(ctx.train, ctx.catalog, table, pre_cfg)
            start = encoder
        else:
            start = scratch_encoder(ctx.cfg.anchor_dim, ft_cfg)
        bases = ctx.bases(ft_cfg) if arm.augment else None
        params, head = finetune(start, ctx.train, ctx.catalog, None, cfg=ft_cfg, bases=bases)
        scores[name] = ctx.evaluate(params, head)
        seconds[name] = time.perf_counter() - t0
    return scores, seconds


_WORKER_CTX = None


def _worker_init(cfg):
    global _WORKER_CTX
    _WORKER_CTX = _Context(cfg)


def _worker_seed(args):
    seed, arms = args
    return _run_seed(_WORKER_CTX, seed, arms)


def run_experiment(cfg: ExperimentConfig, workers: int = 1, progress=None) -> ExperimentResult:
    """Train and evaluate every (arm, seed) pair.

    Results do not depend on ``workers``: each seed is an independent job
    and results are gathered in seed order.
    """
    jobs = [(seed, cfg.arms) for seed in cfg.seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(min(workers, len(jobs)), initializer=_worker_init,
                                 initargs=(cfg,)) as pool:
            outcomes = list(pool.map(_worker_seed, jobs))
    else:
        ctx = _Context(cfg)
        outcomes = []
        for seed, arms in jobs:
            outcomes.append(_run_seed(ctx, seed, arms))
            if progress is not None:
                progress(seed, outcomes[-1])
    scores = {a: {} for a in cfg.arms}
    seconds = {a: 0.0 for a in cfg.arms}
    for (seed, _), (sc, sec) in zip(jobs, outcomes):
        for a in cfg.arms:
            scores[a][seed] = sc[a]
            seconds[a] += sec[a]
    return ExperimentResult(cfg, scores, seconds)
