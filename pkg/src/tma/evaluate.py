"""Ranking evaluation: MRR of each positive against its fixed negative tails.

Embeddings are always computed on the full (training) graph without
neighbor sampling, so repeated evaluations of the same weights are
deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import EdgeSplits, Graph
from .nn import ModelConfig, ModelWeights, decode, encode


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class EvalResult:
    mrr: float
    reciprocal_ranks: np.ndarray
    split: str
    round: int = -1


def rank_of(positive_score: float, negative_scores: np.ndarray) -> float:
    """Average-rank position of the positive among its negatives.

    rank = 1 + #{neg > pos} + #{neg == pos} / 2.
    """
    neg = np.asarray(negative_scores, dtype=np.float64)
    return float(1.0 + np.sum(neg > positive_score) + np.sum(neg == positive_score) / 2.0)


def ranks_of(positive_scores: np.ndarray, negative_scores: np.ndarray) -> np.ndarray:
    """Vectorized rank_of: one positive per row of negatives."""
    pos = np.asarray(positive_scores, dtype=np.float64)[:, None]
    neg = np.asarray(negative_scores, dtype=np.float64)
    return 1.0 + np.sum(neg > pos, axis=1) + np.sum(neg == pos, axis=1) / 2.0


def evaluate(
    w: ModelWeights,
    cfg: ModelConfig,
    full_graph: Graph,
    features: np.ndarray,
    splits: EdgeSplits,
    split: str,
    round: int = -1,
) -> EvalResult:
    """MRR over the fixed negative candidate sets of the chosen split."""
    if split == "val":
        edges, negs = splits.val_edges, splits.val_negatives
    elif split == "test":
        edges, negs = splits.test_edges, splits.test_negatives
    else:
        raise EvalError(f"unknown split {split!r}")
    if len(edges) == 0:
        raise EvalError(f"{split} split is empty")
    if negs.shape[0] != len(edges) or negs.shape[1] == 0:
        raise EvalError("missing negatives for evaluation positives")
    if w.fingerprint != cfg.fingerprint():
        raise EvalError("weights do not match the model config")

    emb = encode(cfg, w, full_graph, features)
    n_pos, k = negs.shape
    pos_scores = decode(cfg, w, emb[edges[:, 0]], emb[edges[:, 1]])
    heads = np.repeat(edges[:, 0], k)
    neg_scores = decode(cfg, w, emb[heads], emb[negs.ravel()]).reshape(n_pos, k)
    rr = 1.0 / ranks_of(pos_scores, neg_scores)
    return EvalResult(mrr=float(rr.mean()), reciprocal_ranks=rr, split=split, round=round)
