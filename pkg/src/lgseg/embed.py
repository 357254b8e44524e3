"""Text-anchor tables: EMB1 files, normalization, PCA projection, synthetic anchors.

EMB1 layout (little-endian)::

    "EMB1" | u32 count | u32 dim | count x (u16 name_len, name utf-8, dim x f32)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._binary import Reader, read_source, write_destination
from .catalog import LabelCatalog, canonicalize
from .errors import (
    DegenerateEmbeddingError,
    DimensionError,
    EmbeddingCoverageError,
    FormatError,
    PcaRankError,
)

EMB1_MAGIC = b"EMB1"
SOURCES = ("clip", "bert", "gpt2", "synthetic")
_UNIT_SLACK = 4 * np.finfo(np.float64).eps


def normalize_rows(x) -> np.ndarray:
    """Scale rows to unit l2 norm.

    Rows whose norm is already within a few ulps of one are left as they
    are, which makes the operation idempotent bit for bit.
    """
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0) or not np.all(np.isfinite(norms)):
        raise DegenerateEmbeddingError("cannot normalize a zero or non-finite vector")
    scale = np.where(np.abs(norms - 1.0) <= _UNIT_SLACK, 1.0, norms)
    return x / scale


@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    rows: np.ndarray
    names: tuple = ()
    source: str = "synthetic"

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2:
            raise DimensionError("embedding rows must be a 2-D array")
        if not np.allclose(np.linalg.norm(rows, axis=1), 1.0, rtol=0, atol=1e-6):
            raise DegenerateEmbeddingError("embedding rows must have unit norm")
        if self.source not in SOURCES:
            raise FormatError(f"unknown embedding source {self.source!r}")
        rows.flags.writeable = False
        object.__setattr__(self, "rows", rows)
        if not self.names:
            object.__setattr__(self, "names", tuple(f"anchor {i}" for i in range(len(rows))))

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def __len__(self):
        return len(self.rows)


# -- EMB1 ---------------------------------------------------------------------

def embeddings_to_bytes(names, vectors) -> bytes:
    vectors = np.asarray(vectors, dtype="<f4")
    if vectors.ndim != 2 or len(vectors) != len(names):
        raise DimensionError("need one vector per name")
    out = [struct.pack("<4sII", EMB1_MAGIC, len(names), vectors.shape[1])]
    for name, vec in zip(names, vectors):
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError("embedding name longer than 65535 bytes")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(vec.tobytes())
    return b"".join(out)


def write_embeddings(names, vectors, destination=None) -> int:
    return write_destination(destination, embeddings_to_bytes(names, vectors))


def read_embeddings(source) -> tuple[list[str], np.ndarray]:
    reader = Reader(read_source(source), "EMB1")
    reader.magic(EMB1_MAGIC)
    count, dim = reader.unpack("<II")
    names, rows = [], []
    for _ in range(count):
        (length,) = reader.unpack("<H")
        try:
            names.append(reader.take(length).decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError(f"EMB1: bad name encoding: {exc}") from exc
        rows.append(np.frombuffer(reader.take(4 * dim), dtype="<f4"))
    reader.finish()
    vectors = np.stack(rows) if rows else np.zeros((0, dim), dtype="<f4")
    return names, vectors


def load_table(source, catalog: LabelCatalog, tag: str = "clip") -> EmbeddingTable:
    """Read an EMB1 file and align its rows to catalog id order."""
    names, vectors = read_embeddings(source)
    by_name = {canonicalize(n): k for k, n in enumerate(names)}
    missing = [r.name for r in catalog.records if canonicalize(r.name) not in by_name]
    if missing:
        raise EmbeddingCoverageError(f"no embedding for {len(missing)} categories, e.g. {missing[:3]}")
    rows = vectors[[by_name[canonicalize(r.name)] for r in catalog.records]].astype(np.float64)
    if np.any(np.linalg.norm(rows, axis=1) == 0):
        raise DegenerateEmbeddingError("zero-norm embedding row")
    return EmbeddingTable(normalize_rows(rows), tuple(catalog.names), tag)


def save_table(table: EmbeddingTable, destination=None) -> int:
    return write_embeddings(list(table.names), table.rows, destination)


# -- PCA ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PcaModel:
    mean: np.ndarray
    basis: np.ndarray
    variances: np.ndarray
    total_variance: float

    @property
    def retained_ratio(self) -> float:
        if self.total_variance == 0:
            return 1.0
        return float(self.variances.sum() / self.total_variance)


def _fix_signs(basis: np.ndarray) -> np.ndarray:
    pivot = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[pivot, np.arange(basis.shape[1])])
    signs[signs == 0] = 1.0
    return basis * signs


def fit_pca_array(x, d: int) -> PcaModel:
    x = np.asarray(x, dtype=np.float64)
    n, dim = x.shape
    if not 1 <= d <= min(n, dim):
        raise PcaRankError(f"cannot keep {d} components of {n} x {dim} data")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / max(n - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:d]
    variances = np.clip(evals[order], 0.0, None)
    return PcaModel(mean, _fix_signs(evecs[:, order]), variances, float(np.trace(cov)))


def fit_pca(table: EmbeddingTable, d: int) -> PcaModel:
    return fit_pca_array(table.rows, d)


def project_array(model: PcaModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != len(model.mean):
        raise DimensionError(f"model expects dim {len(model.mean)}, got {x.shape[-1]}")
    return (x - model.mean) @ model.basis


def project(model: PcaModel, table: EmbeddingTable) -> EmbeddingTable:
    """Center, project and re-normalize every anchor."""
    return EmbeddingTable(normalize_rows(project_array(model, table.rows)),
                          table.names, table.source)


def reconstruct(model: PcaModel, z) -> np.ndarray:
    return np.asarray(z) @ model.basis.T + model.mean


class AnchorPCA(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`fit_pca` / :func:`project`.

    Accepts an :class:`EmbeddingTable` or a plain ``(n, D)`` array.  With
    ``normalize=True`` the projected rows are rescaled to unit length.
    """

    def __init__(self, n_components=96, normalize=True):
        self.n_components = n_components
        self.normalize = normalize

    def fit(self, X, y=None):
        rows = X.rows if isinstance(X, EmbeddingTable) else np.asarray(X, dtype=np.float64)
        self.model_ = fit_pca_array(rows, self.n_components)
        self.mean_ = self.model_.mean
        self.components_ = self.model_.basis.T
        self.explained_variance_ = self.model_.variances
        total = self.model_.total_variance
        self.explained_variance_ratio_ = (self.model_.variances / total if total
                                          else np.zeros_like(self.model_.variances))
        self.n_features_in_ = rows.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        if isinstance(X, EmbeddingTable):
            return project(self.model_, X) if self.normalize else project_array(self.model_, X.rows)
        z = project_array(self.model_, X)
        return normalize_rows(z) if self.normalize else z

    def inverse_transform(self, Z):
        check_is_fitted(self, "model_")
        return reconstruct(self.model_, Z)


def synthetic_anchors(n: int, d: int, seed: int = 0) -> EmbeddingTable:
    """Deterministic stand-in anchors; exactly orthonormal when ``n <= d``."""
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((d, n) if n <= d else (n, d))
    if n <= d:
        q, r = np.linalg.qr(g)
        rows = (q * np.sign(np.diag(r))).T
    else:
        rows = g
    return EmbeddingTable(normalize_rows(rows), source="synthetic")
