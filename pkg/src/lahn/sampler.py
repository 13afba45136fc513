"""Label-aware hard-negative selection over a queue snapshot.

Pipeline per anchor: keep only true negatives (label differs from the
anchor's), weight each candidate's cosine similarity by the momentum head's
probability of assigning it the anchor's class, take the top k. The two
ablation strategies relax that pipeline: SimOnly ranks by similarity alone,
AllQueue skips both the label filter and the top-k cut.

Everything here operates on detached numpy arrays: selection influences
which similarities enter the contrastive loss, but no gradient flows through
the selection itself.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .encoder import EncoderParams, apply_head

_EPS = 1e-8


class Strategy(enum.Enum):
    ALL_QUEUE = "all"
    SIM_ONLY = "sim"
    LABEL_SIM_WEIGHT = "simweight"

    @classmethod
    def parse(cls, name: str) -> "Strategy":
        for s in cls:
            if s.value == name:
                return s
        raise ValueError(f"unknown strategy {name!r}; expected one of {[s.value for s in cls]}")


@dataclass
class HardNegativeSet:
    """Per-anchor selection: feature rows, their queue indices, their scores.

    Scores are non-increasing; ties were broken by lower queue index.
    """

    features: np.ndarray  # [n x d_feat], n <= k
    queue_indices: np.ndarray  # [n] positions within the snapshot
    scores: np.ndarray  # [n]

    @property
    def size(self) -> int:
        return self.queue_indices.shape[0]


def cosine_rows(anchor: np.ndarray, rows: np.ndarray, eps: float = _EPS) -> np.ndarray:
    """cos(anchor, rows[j]) with norms clamped below at eps."""
    na = max(float(np.linalg.norm(anchor)), eps)
    nb = np.maximum(np.linalg.norm(rows, axis=1), eps)
    return (rows @ anchor) / (na * nb)


def filter_true_negatives(anchor_label: int, queue_labels: np.ndarray) -> np.ndarray:
    """Snapshot positions whose label differs from the anchor's, in queue order."""
    queue_labels = np.asarray(queue_labels)
    return np.flatnonzero(queue_labels != anchor_label)


def anchor_class_prob(head_logits, anchor_label: int) -> np.ndarray:
    """Softmax over each row's 2 logits; return the anchor-class column."""
    logits = np.asarray(getattr(head_logits, "values", head_logits), dtype=np.float64)
    if logits.ndim != 2 or logits.shape[1] != 2:
        raise ValueError(f"expected [S x 2] logits, got shape {logits.shape}")
    if anchor_label not in (0, 1):
        raise ValueError(f"anchor label must be 0 or 1, got {anchor_label}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e[:, anchor_label] / e.sum(axis=1)


def score_candidates(
    anchor_feat: np.ndarray,
    candidate_feats: np.ndarray,
    probs: np.ndarray | None,
    strategy: Strategy,
) -> np.ndarray:
    """SimOnly: cos. LabelSimWeight: cos * prob. AllQueue: cos, untouched.

    Negative scores are legal and simply rank low; ordering is all that
    matters downstream.
    """
    anchor_feat = np.asarray(anchor_feat, dtype=np.float64)
    candidate_feats = np.asarray(candidate_feats, dtype=np.float64)
    if candidate_feats.ndim != 2 or candidate_feats.shape[1] != anchor_feat.shape[0]:
        raise ValueError(
            f"candidate shape {candidate_feats.shape} incompatible with anchor {anchor_feat.shape}"
        )
    sims = cosine_rows(anchor_feat, candidate_feats)
    if strategy is Strategy.LABEL_SIM_WEIGHT:
        if probs is None or np.asarray(probs).shape != sims.shape:
            raise ValueError("LabelSimWeight needs one probability per candidate")
        return sims * np.asarray(probs, dtype=np.float64)
    return sims


def select_hard_negatives(
    scores: np.ndarray,
    candidate_indices: np.ndarray,
    candidate_feats: np.ndarray,
    k: int,
) -> HardNegativeSet:
    """Top-k by score, descending; ties broken by lower queue index.

    Fewer than k candidates: all are selected. Zero candidates: empty set.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    scores = np.asarray(scores, dtype=np.float64)
    candidate_indices = np.asarray(candidate_indices, dtype=np.int64)
    order = np.lexsort((candidate_indices, -scores))[: min(k, scores.shape[0])]
    return HardNegativeSet(
        features=np.asarray(candidate_feats, dtype=np.float64)[order],
        queue_indices=candidate_indices[order],
        scores=scores[order],
    )


def sample_for_batch(
    anchor_feats: np.ndarray,
    anchor_labels: np.ndarray,
    snapshot,
    momentum_params: EncoderParams,
    strategy: Strategy,
    k: int,
    exclude_ids: np.ndarray | None = None,
) -> list[HardNegativeSet]:
    """filter -> prob -> score -> select, per anchor, over one shared snapshot.

    One momentum-head application over the snapshot serves every anchor.
    ``exclude_ids[i]`` names anchor i's own entry id from the current step's
    enqueue so its positive never doubles as its negative. AllQueue keeps
    every (other) entry regardless of label and ignores k.
    """
    anchor_feats = np.asarray(anchor_feats, dtype=np.float64)
    n_anchors = anchor_feats.shape[0]
    if snapshot.size == 0:
        empty = [
            HardNegativeSet(
                features=np.zeros((0, anchor_feats.shape[1])),
                queue_indices=np.zeros(0, dtype=np.int64),
                scores=np.zeros(0),
            )
            for _ in range(n_anchors)
        ]
        return empty
    head_logits = apply_head(momentum_params, snapshot.features)
    out = []
    for i in range(n_anchors):
        label = int(anchor_labels[i])
        if strategy is Strategy.ALL_QUEUE:
            cand = np.arange(snapshot.size, dtype=np.int64)
        else:
            cand = filter_true_negatives(label, snapshot.labels)
        if exclude_ids is not None:
            cand = cand[snapshot.entry_ids[cand] != exclude_ids[i]]
        probs = None
        if strategy is Strategy.LABEL_SIM_WEIGHT:
            probs = anchor_class_prob(head_logits[cand], label)
        feats = snapshot.features[cand]
        scores = score_candidates(anchor_feats[i], feats, probs, strategy)
        k_eff = cand.size if strategy is Strategy.ALL_QUEUE else k
        out.append(select_hard_negatives(scores, cand, feats, max(k_eff, 1)))
    return out
