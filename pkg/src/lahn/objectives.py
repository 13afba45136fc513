"""Loss assembly: temperature-scaled contrastive loss over (positive, hard
negatives) per anchor, classification cross-entropy, their convex
combination, and the in-batch supervised contrastive baseline.

The contrastive term is built exactly as the softmax-cross-entropy over the
logit row [pos/tau, neg_1/tau, ..., neg_n/tau] with target index 0, so the
positive similarity appears in the denominator alongside the negatives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass
class AnchorContrast:
    """One anchor's similarities: a scalar positive, 0..k scalar negatives."""

    pos_sim: ad.Tensor  # 0-d
    neg_sims: ad.Tensor | None  # [n] or None when no negatives survived


@dataclass
class LossBreakdown:
    l_cl: float
    l_ce: float
    total: float
    lam: float


def contrastive_loss(anchors: list[AnchorContrast], tau: float) -> ad.Tensor:
    """Mean over all anchors of -log softmax([pos/tau, negs/tau])[0].

    An anchor with zero negatives contributes exactly 0 (its row softmax is
    a single logit), but it still counts in the mean's denominator.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    if not anchors:
        raise ValueError("contrastive_loss over zero anchors")
    inv = 1.0 / tau
    per_anchor = []
    for a in anchors:
        if a.neg_sims is None or a.neg_sims.values.size == 0:
            continue
        n = a.neg_sims.values.shape[0]
        row = ad.concat1d([ad.reshape(a.pos_sim, (1,)), a.neg_sims])
        logits = ad.reshape(ad.scale(row, inv), (1, 1 + n))
        per_anchor.append(ad.softmax_cross_entropy(logits, [0]))
    if not per_anchor:
        return ad.constant(0.0)
    return ad.scale(ad.add_n(per_anchor), 1.0 / len(anchors))


def classification_loss(logits: ad.Tensor, labels) -> ad.Tensor:
    """Batch-mean NLL; the same routine that backs every other CE here."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must all be 0 or 1")
    return ad.softmax_cross_entropy(logits, labels)


def combined_loss(l_cl: ad.Tensor, l_ce: ad.Tensor, lam: float) -> ad.Tensor:
    """(1 - lam) * l_cl + lam * l_ce."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"loss weight must be in [0, 1], got {lam}")
    return ad.add(ad.scale(l_cl, 1.0 - lam), ad.scale(l_ce, lam))


def scl_loss(features: ad.Tensor, labels, tau: float) -> ad.Tensor:
    """In-batch supervised contrastive loss.

    For each anchor i with positives P(i) = same-label others:
        loss_i = -(1/|P(i)|) * sum_{p in P(i)} log softmax_{a != i}(cos(i,a)/tau)[p]
    averaged over anchors with |P(i)| > 0. Anchors without a same-label
    partner contribute nothing (and a batch with no partnered anchor scores 0).
    """
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    labels = np.asarray(labels, dtype=np.int64)
    b = features.values.shape[0]
    if b < 2:
        raise ValueError(f"scl_loss needs a batch of >= 2, got {b}")
    if labels.shape != (b,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {b}")

    rows = [ad.row(features, i) for i in range(b)]
    cos: dict[tuple[int, int], ad.Tensor] = {}
    for i in range(b):
        for j in range(i + 1, b):
            cos[(i, j)] = ad.cosine_similarity(rows[i], rows[j])

    def sim(i: int, j: int) -> ad.Tensor:
        return cos[(i, j)] if i < j else cos[(j, i)]

    anchor_losses = []
    for i in range(b):
        others = [j for j in range(b) if j != i]
        positives = [p for p in others if labels[p] == labels[i]]
        if not positives:
            continue
        vec = ad.concat1d([ad.reshape(sim(i, j), (1,)) for j in others])
        logits = ad.reshape(ad.scale(vec, 1.0 / tau), (1, b - 1))
        terms = [ad.softmax_cross_entropy(logits, [others.index(p)]) for p in positives]
        anchor_losses.append(ad.scale(ad.add_n(terms), 1.0 / len(positives)))
    if not anchor_losses:
        return ad.constant(0.0)
    return ad.scale(ad.add_n(anchor_losses), 1.0 / len(anchor_losses))
