"""Scikit-learn style wrapper around the two-stage training pipeline."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_masks, check_scenes, fitted_catalog
from .augment import AugmentConfig
from .bench import accumulate, confusion_matrix, metrics
from .embed import EmbeddingTable, synthetic_anchors
from .errors import DimensionError
from .model import (
    finetune,
    finetune_config,
    predict,
    pretrain,
    pretrain_config,
    scratch_encoder,
)


class LanguageGroundedSegmenter(BaseEstimator):
    """Point-cloud semantic segmenter with optional text-anchored pre-training.

    Parameters
    ----------
    catalog : LabelCatalog
        Category taxonomy.  Without a split, counts and head/common/tail
        splits are derived from the training scenes in ``fit``.
    anchors : EmbeddingTable or None
        Text anchors for pre-training.  ``None`` uses synthetic
        orthonormal anchors of width ``anchor_dim``.
    pretrain : bool
        Run contrastive anchoring before supervised training.
    loss : {"ce", "weighted_ce", "focal", "cfocal"}
    augment : bool
        Online instance sampling of tail categories during fine-tuning.
    resolution : float
        Voxel size in meters.
    max_cells : int or None
        Labeled cells drawn per scene per step.
    random_state : int

    Attributes
    ----------
    catalog_ : LabelCatalog
    anchors_ : EmbeddingTable or None
    encoder_ : EncoderParams
    head_ : ClassifierHead
    pretrain_loss_, finetune_loss_ : list of float
        Per-epoch mean training loss.
    """

    def __init__(self, catalog=None, anchors=None, pretrain=True, loss="cfocal", augment=True,
                 gamma=2.0, resolution=0.05, pretrain_epochs=60, finetune_epochs=40,
                 lr=0.05, momentum=0.9, batch_size=8, hidden=64, anchor_dim=64,
                 max_cells=1024, use_color=True, n_samples=4, random_state=0):
        self.catalog = catalog
        self.anchors = anchors
        self.pretrain = pretrain
        self.loss = loss
        self.augment = augment
        self.gamma = gamma
        self.resolution = resolution
        self.pretrain_epochs = pretrain_epochs
        self.finetune_epochs = finetune_epochs
        self.lr = lr
        self.momentum = momentum
        self.batch_size = batch_size
        self.hidden = hidden
        self.anchor_dim = anchor_dim
        self.max_cells = max_cells
        self.use_color = use_color
        self.n_samples = n_samples
        self.random_state = random_state

    def _configs(self):
        common = dict(lr=self.lr, momentum=self.momentum, batch=self.batch_size,
                      seed=int(self.random_state), use_color=self.use_color,
                      resolution=self.resolution, max_cells=self.max_cells, hidden=self.hidden,
                      gamma=self.gamma)
        aug = AugmentConfig(n_samples=self.n_samples) if self.augment else None
        return (pretrain_config(epochs=self.pretrain_epochs, **common),
                finetune_config(epochs=self.finetune_epochs, loss=self.loss, augment=aug, **common))

    def fit(self, X, y=None, masks=None):
        """Train on scenes ``X``; labels are read from the scenes themselves.

        ``masks`` optionally restricts supervision to a subset of points per
        scene.  ``y`` is ignored.
        """
        scenes, _ = check_scenes(X, allow_single=False)
        masks = check_masks(masks, scenes)
        self.catalog_ = fitted_catalog(self.catalog, scenes)
        n = len(self.catalog_)
        pre_cfg, ft_cfg = self._configs()
        self.pretrain_loss_, self.finetune_loss_ = [], []
        if self.pretrain:
            anchors = self.anchors
            if anchors is None:
                anchors = synthetic_anchors(n, self.anchor_dim, int(self.random_state))
            if not isinstance(anchors, EmbeddingTable) or len(anchors) != n:
                raise DimensionError("anchors must be an EmbeddingTable with one row per category")
            self.anchors_ = anchors
            encoder = pretrain(scenes, self.catalog_, anchors, pre_cfg, masks=masks,
                               history=self.pretrain_loss_)
        else:
            self.anchors_ = None
            encoder = scratch_encoder(self.anchor_dim, ft_cfg)
        self.encoder_, self.head_ = finetune(encoder, scenes, self.catalog_, masks, cfg=ft_cfg,
                                             history=self.finetune_loss_)
        self.n_categories_ = n
        return self

    def predict(self, X):
        """Per-point category ids: one array per scene, or one array for a bare scene."""
        check_is_fitted(self, "head_")
        scenes, single = check_scenes(X)
        out = [predict(self.encoder_, self.head_, s, self.resolution, self.use_color)
               for s in scenes]
        return out[0] if single else out

    def evaluate(self, X):
        """:class:`EvalReport` of predictions against the labels stored in ``X``."""
        scenes, _ = check_scenes(X)
        cm = confusion_matrix(self.n_categories_)
        for scene, pred in zip(scenes, self.predict(scenes)):
            cm = accumulate(cm, scene.semantic, pred)
        return metrics(cm, self.catalog_)

    def score(self, X, y=None):
        """Mean IoU over present categories."""
        value = self.evaluate(X).miou
        return float(value) if not np.isnan(value) else 0.0
