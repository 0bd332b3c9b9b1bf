"""Multi-positive, multi-modal InfoNCE loss and collapse diagnostics.

Every view in a batch is compared against all other views by cosine similarity
divided by a temperature.  Views of the same sample (any modality, augmented
or not) are positives; everything else is a negative.  Views belonging to the
negative class only ever sit in other views' denominators.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NORM_EPS, Tensor
from .errors import ConfigError, ContractError, DegenerateInputError

MEAN = "mean"
SUM = "sum"


@dataclass
class ViewRecord:
    view_id: int
    sample_id: int
    modality_id: int
    augmented: bool = False
    is_negative_class: bool = False
    embedding: np.ndarray | None = None


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.1
    use_log: bool = True
    positive_aggregation: str = MEAN
    literal_eq1: bool = False

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.positive_aggregation not in (MEAN, SUM):
            raise ConfigError(f"positive_aggregation must be 'mean' or 'sum', got {self.positive_aggregation!r}")


@dataclass
class PositiveIndex:
    """Positive and denominator sets per view, plus whether the view adds a loss term."""

    view_ids: list
    positives: dict = field(default_factory=dict)
    omega: dict = field(default_factory=dict)
    contributes_loss: dict = field(default_factory=dict)

    def row(self, view_id):
        return self._rows[view_id]

    def __post_init__(self):
        self._rows = {v: i for i, v in enumerate(self.view_ids)}
        self._masks = None

    @property
    def contributing(self):
        return [v for v in self.view_ids if self.contributes_loss[v]]

    def masks(self):
        """Boolean (positives, omega) matrices in batch row order."""
        if self._masks is not None:
            return self._masks
        n = len(self.view_ids)
        pos = np.zeros((n, n), dtype=bool)
        om = np.zeros((n, n), dtype=bool)
        for v, i in self._rows.items():
            pos[i, [self._rows[p] for p in self.positives[v]]] = True
            om[i, [self._rows[o] for o in self.omega[v]]] = True
        return pos, om


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu <= NORM_EPS or nv <= NORM_EPS:
        raise DegenerateInputError("cosine_similarity: zero-norm vector")
    return float(np.clip(np.dot(u / nu, v / nv), -1.0, 1.0))


def build_positive_index(batch) -> PositiveIndex:
    view_ids = [r.view_id for r in batch]
    if len(set(view_ids)) != len(view_ids):
        raise ContractError("view ids must be unique within a batch")
    if len({r.sample_id for r in batch}) < 2:
        raise ContractError("batch needs views from at least 2 distinct samples; "
                            "with one sample the denominator holds only positives")
    by_sample = {}
    for r in batch:
        by_sample.setdefault(r.sample_id, []).append(r.view_id)
    index = PositiveIndex(view_ids)
    everyone = frozenset(view_ids)
    for r in batch:
        pos = set(by_sample[r.sample_id]) - {r.view_id}
        index.positives[r.view_id] = pos
        index.omega[r.view_id] = everyone - {r.view_id}
        index.contributes_loss[r.view_id] = bool(pos) and not r.is_negative_class
    sids = np.array([r.sample_id for r in batch])
    off_diag = ~np.eye(len(batch), dtype=bool)
    index._masks = ((sids[:, None] == sids[None, :]) & off_diag, off_diag)
    return index


def _similarity_logits(embeddings, temperature):
    e = ad.as_tensor(embeddings)
    norms = np.linalg.norm(e.values, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-9):
        raise ContractError("embeddings must be unit-norm; apply l2_normalize first")
    return ad.mul(ad.matmul(e, ad.transpose(e)), 1.0 / temperature)


def _weighted_loss(embeddings, index: PositiveIndex, cfg: ContrastiveConfig, rows):
    """Sum over ``rows`` of per-view losses (as a graph), before averaging."""
    pos, om = index.masks()
    weights = np.zeros(pos.shape)
    for i in rows:
        k = pos[i].sum()
        if cfg.literal_eq1 or cfg.positive_aggregation == SUM:
            weights[i, pos[i]] = 1.0
        else:
            weights[i, pos[i]] = 1.0 / k
    live = np.zeros(len(index.view_ids), dtype=bool)
    live[list(rows)] = True
    logp = ad.masked_log_softmax(_similarity_logits(embeddings, cfg.temperature), om & live[:, None])
    terms = ad.exp(logp) if (cfg.literal_eq1 or not cfg.use_log) else logp
    return ad.mul(ad.sum_(ad.mul(terms, weights)), -1.0)


def info_nce_single(view_id, index: PositiveIndex, embeddings, cfg: ContrastiveConfig) -> Tensor:
    """Loss term of one view; ``embeddings`` rows follow ``index.view_ids``."""
    if not index.contributes_loss.get(view_id, False):
        raise ContractError(f"view {view_id} does not contribute a loss term")
    return _weighted_loss(embeddings, index, cfg, [index.row(view_id)])


def batch_loss(batch, index: PositiveIndex, cfg: ContrastiveConfig, embeddings=None) -> Tensor:
    """Mean per-view loss over the contributing views.

    ``embeddings`` defaults to stacking ``r.embedding`` of the batch records.
    """
    if embeddings is None:
        embeddings = np.stack([r.embedding for r in batch])
    rows = [index.row(v) for v in index.contributing]
    if not rows:
        raise ContractError("batch has no contributing views")
    return ad.mul(_weighted_loss(embeddings, index, cfg, rows), 1.0 / len(rows))


def collapse_metrics(embeddings):
    """Mean off-diagonal cosine similarity, per-dimension std, effective rank."""
    e = np.asarray(getattr(embeddings, "values", embeddings), dtype=np.float64)
    if e.ndim != 2 or e.shape[0] < 2:
        raise ContractError("collapse_metrics needs at least 2 embeddings")
    norms = np.linalg.norm(e, axis=1, keepdims=True)
    if np.any(norms <= NORM_EPS):
        raise DegenerateInputError("collapse_metrics: zero-norm embedding")
    u = e / norms
    sim = u @ u.T
    n = len(e)
    mean_sim = (sim.sum() - np.trace(sim)) / (n * (n - 1))
    sv = np.linalg.svd(e, compute_uv=False)
    # singular values at rounding level are structural zeros
    sv = sv[sv > sv.max() * max(e.shape) * np.finfo(float).eps]
    p = sv / sv.sum()
    erank = float(np.exp(-(p * np.log(p)).sum()))
    return {
        "mean_pairwise_similarity": float(mean_sim),
        "per_dim_std": e.std(axis=0),
        "effective_rank": erank,
    }
