"""Momentum-encoder lifecycle: EMA parameter updates and the bounded FIFO
queue of detached feature vectors with labels.

The queue is the negative-candidate pool. Entries carry a monotonically
increasing insertion id so a training step can exclude an anchor's own
just-enqueued view from that anchor's candidates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import EncoderParams


@dataclass
class QueueSnapshot:
    """Age-ordered copy (oldest first); immutable w.r.t. later enqueues."""

    features: np.ndarray  # [S x d_feat]
    labels: np.ndarray  # [S] int64
    entry_ids: np.ndarray  # [S] int64, insertion order

    @property
    def size(self) -> int:
        return self.features.shape[0]


class MomentumQueue:
    """Bounded FIFO of (feature, label) entries; eviction strictly oldest-first."""

    def __init__(self, capacity: int, d_feat: int):
        if capacity < 1:
            raise ValueError(f"queue capacity must be >= 1, got {capacity}")
        if d_feat < 1:
            raise ValueError(f"d_feat must be >= 1, got {d_feat}")
        self.capacity = capacity
        self.d_feat = d_feat
        self._features: list[np.ndarray] = []
        self._labels: list[int] = []
        self._ids: list[int] = []
        self._counter = 0

    @property
    def size(self) -> int:
        return len(self._labels)

    def fill_fraction(self) -> float:
        return self.size / self.capacity

    def enqueue_batch(self, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
        """Append in batch order, evict oldest beyond capacity.

        Returns the insertion ids assigned to this batch. Features must be
        plain arrays (already detached); they are copied, never aliased.
        """
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels)
        if features.ndim != 2 or features.shape[1] != self.d_feat:
            raise ValueError(f"expected features [B x {self.d_feat}], got shape {features.shape}")
        if labels.shape != (features.shape[0],):
            raise ValueError(f"labels shape {labels.shape} does not match batch {features.shape[0]}")
        assigned = np.arange(self._counter, self._counter + features.shape[0], dtype=np.int64)
        self._counter += features.shape[0]
        for i in range(features.shape[0]):
            self._features.append(features[i].copy())
            self._labels.append(int(labels[i]))
            self._ids.append(int(assigned[i]))
        excess = len(self._labels) - self.capacity
        if excess > 0:
            del self._features[:excess]
            del self._labels[:excess]
            del self._ids[:excess]
        return assigned

    def snapshot(self) -> QueueSnapshot:
        if not self._labels:
            return QueueSnapshot(
                features=np.zeros((0, self.d_feat)),
                labels=np.zeros(0, dtype=np.int64),
                entry_ids=np.zeros(0, dtype=np.int64),
            )
        return QueueSnapshot(
            features=np.stack(self._features).copy(),
            labels=np.array(self._labels, dtype=np.int64),
            entry_ids=np.array(self._ids, dtype=np.int64),
        )


@dataclass
class EmaState:
    m: float
    params: EncoderParams

    def __post_init__(self):
        if not 0.0 <= self.m <= 1.0:
            raise ValueError(f"momentum coefficient must be in [0, 1], got {self.m}")


def ema_update(main: EncoderParams, state: EmaState) -> EmaState:
    """theta_m <- m * theta_m + (1 - m) * theta, elementwise, in place."""
    m = state.m
    for (name, mom), (_, cur) in zip(state.params.named(), main.named()):
        if mom.values.shape != cur.values.shape:
            raise ValueError(f"shape mismatch for {name}: {mom.values.shape} vs {cur.values.shape}")
        mom.values *= m
        mom.values += (1.0 - m) * cur.values
    return state
