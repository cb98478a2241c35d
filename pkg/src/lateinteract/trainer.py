"""Pairwise softmax cross-entropy training of the projection layer.

Only the projection is learned; the toy contextual embeddings underneath are
frozen, so each text's hidden matrix is computed once and reused. Gradients are
analytic: the argmax choices inside MaxSim are held fixed (first index wins on
ties) and the row normalisation is differentiated exactly, including its
epsilon guard.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterable, NamedTuple

import numpy as np

from .core import SimilarityMetric, similarity_matrix
from .encoder import NORM_EPS, ColEncoder, EncoderConfig, ProjectionLayer

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Triple:
    query: str
    positive: str
    negative: str

    @property
    def degenerate(self) -> bool:
        return self.positive == self.negative


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-3
    batch_size: int = 32
    iterations: int = 100
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1 or self.iterations < 1:
            raise ValueError("batch_size and iterations must be positive")


def read_triples(path) -> list[Triple]:
    """Read ``query \\t positive \\t negative`` lines."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            out.append(Triple(*parts))
    return out


def pairwise_loss(s_pos: float, s_neg: float) -> float:
    """``-log softmax`` of the positive score against the negative one."""
    if not (math.isfinite(s_pos) and math.isfinite(s_neg)):
        raise ValueError(f"scores must be finite, got {s_pos}, {s_neg}")
    return float(np.logaddexp(0.0, s_neg - s_pos))


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


class TripleFeatures(NamedTuple):
    """Frozen hidden matrices (already punctuation-filtered for documents)."""

    query: np.ndarray
    positive: np.ndarray
    negative: np.ndarray


def triple_features(triple: Triple, encoder: ColEncoder) -> TripleFeatures:
    emb = encoder.embedder

    def doc_hidden(text):
        toks = encoder.doc_tokens(text)
        return emb.embed(toks)[encoder.keep_mask(toks)]

    return TripleFeatures(emb.embed(encoder.query_tokens(triple.query)),
                          doc_hidden(triple.positive), doc_hidden(triple.negative))


def _project(hidden: np.ndarray, weights: np.ndarray):
    x = hidden @ weights
    r = np.sqrt((x * x).sum(axis=1, keepdims=True) + NORM_EPS)
    return x, r, x / r


def _normalize_backward(x, r, grad_e):
    # e = x / r with r = sqrt(|x|^2 + eps)
    return grad_e / r - x * (x * grad_e).sum(axis=1, keepdims=True) / r**3


def _score_backward(eq, ed, metric):
    """MaxSim score and its gradients w.r.t. the normalised query/doc rows."""
    sims = similarity_matrix(eq, ed, metric)
    best = sims.argmax(axis=1)
    score = float(sims[np.arange(len(best)), best].sum())
    matched = ed[best]
    if metric is SimilarityMetric.COSINE:
        g_q = matched.copy()
        g_rows = eq
    else:
        g_q = -2.0 * (eq - matched)
        g_rows = 2.0 * (eq - matched)
    g_d = np.zeros_like(ed)
    np.add.at(g_d, best, g_rows)
    return score, g_q, g_d


def loss_and_gradient(features: TripleFeatures, weights: np.ndarray,
                      metric: SimilarityMetric = SimilarityMetric.COSINE) -> tuple[float, np.ndarray]:
    xq, rq, eq = _project(features.query, weights)
    xp, rp, ep = _project(features.positive, weights)
    xn, rn, en = _project(features.negative, weights)
    s_pos, gq_pos, gp = _score_backward(eq, ep, metric)
    s_neg, gq_neg, gn = _score_backward(eq, en, metric)
    loss = pairwise_loss(s_pos, s_neg)
    w_neg = _sigmoid(s_neg - s_pos)  # dL/ds_neg; dL/ds_pos is its negative
    grad = features.query.T @ _normalize_backward(xq, rq, w_neg * (gq_neg - gq_pos))
    grad += features.positive.T @ _normalize_backward(xp, rp, -w_neg * gp)
    grad += features.negative.T @ _normalize_backward(xn, rn, w_neg * gn)
    return loss, grad


def triple_loss(features: TripleFeatures, weights: np.ndarray,
                metric: SimilarityMetric = SimilarityMetric.COSINE) -> float:
    eq = _project(features.query, weights)[2]
    s_pos = float(similarity_matrix(eq, _project(features.positive, weights)[2], metric).max(axis=1).sum())
    s_neg = float(similarity_matrix(eq, _project(features.negative, weights)[2], metric).max(axis=1).sum())
    return pairwise_loss(s_pos, s_neg)


def loss_gradient(triple: Triple, proj: ProjectionLayer, cfg: EncoderConfig) -> np.ndarray:
    """Gradient of the triple's pairwise loss w.r.t. the projection weights."""
    encoder = ColEncoder(cfg, proj)
    return loss_and_gradient(triple_features(triple, encoder), proj.weights, cfg.metric)[1]


def train(triples: Iterable[Triple], cfg: TrainConfig, enc_cfg: EncoderConfig,
          init: ProjectionLayer | None = None,
          callback: Callable[[int, float], None] | None = None) -> ProjectionLayer:
    """Mini-batch gradient descent on the projection.

    ``callback(iteration, mean_batch_loss)`` is invoked once per iteration with
    the loss measured before that iteration's update.
    """
    triples = list(triples)
    if not triples:
        raise ValueError("no training triples")
    usable = [t for t in triples if not t.degenerate]
    if len(usable) < len(triples):
        logger.warning("skipping %d degenerate triples (positive == negative)",
                       len(triples) - len(usable))
    if not usable:
        raise ValueError("all training triples are degenerate")

    proj = (init or ProjectionLayer.for_config(enc_cfg)).copy()
    encoder = ColEncoder(enc_cfg, proj)
    features = [triple_features(t, encoder) for t in usable]
    rng = np.random.default_rng(cfg.seed)
    batch = min(cfg.batch_size, len(features))
    weights = proj.weights
    for it in range(cfg.iterations):
        picks = rng.choice(len(features), size=batch, replace=False)
        total_loss = 0.0
        grad = np.zeros_like(weights)
        for i in picks:
            loss, g = loss_and_gradient(features[i], weights, enc_cfg.metric)
            total_loss += loss
            grad += g
        mean_loss = total_loss / batch
        if callback is not None:
            callback(it, mean_loss)
        logger.debug("iteration %d loss %.6f", it, mean_loss)
        weights = weights - cfg.learning_rate * (grad / batch)
    return ProjectionLayer(weights)
