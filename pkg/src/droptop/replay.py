"""Fixed-capacity episodic memory with random-replacement or reservoir updates."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

POLICIES = ("random", "reservoir")


@dataclass
class MemoryItem:
    image: np.ndarray
    label: int
    task_id: int
    seen_index: int
    logits: np.ndarray | None = None


@dataclass
class MemoryBatch:
    images: np.ndarray
    labels: np.ndarray
    task_ids: np.ndarray
    seen_index: np.ndarray
    logits: np.ndarray | None = None

    def __len__(self):
        return len(self.labels)


class ReplayBuffer:
    """Episodic memory backed by preallocated arrays.

    ``n_seen`` counts every stream item offered to :meth:`update`. Until the
    buffer is full every item is stored. Afterwards, with ``policy="reservoir"``
    item ``i`` (1-based) draws ``j`` uniformly from ``[0, i)`` and overwrites slot
    ``j`` when ``j < capacity``; with ``policy="random"`` it is accepted with
    probability ``capacity / i`` and overwrites a uniformly chosen slot.
    """

    def __init__(self, capacity, policy="reservoir"):
        if capacity < 0:
            raise ValueError(f"capacity must be >= 0, got {capacity}")
        if policy not in POLICIES:
            raise ValueError(f"unknown policy {policy!r}; expected one of {POLICIES}")
        self.capacity = capacity
        self.policy = policy
        self.n_seen = 0
        self.size = 0
        self.images = None
        self.labels = np.zeros(capacity, dtype=np.int64)
        self.task_ids = np.zeros(capacity, dtype=np.int64)
        self.seen_index = np.zeros(capacity, dtype=np.int64)
        self.logits = None

    def __len__(self):
        return self.size

    def _alloc(self, images, logits):
        if self.images is None:
            self.images = np.zeros((self.capacity,) + images.shape[1:], dtype=images.dtype)
        if logits is not None and self.logits is None:
            self.logits = np.zeros((self.capacity,) + logits.shape[1:], dtype=logits.dtype)

    def _store(self, slot, src, images, labels, task_ids, logits):
        self.images[slot] = images[src]
        self.labels[slot] = labels[src]
        self.task_ids[slot] = task_ids[src]
        self.seen_index[slot] = self.n_seen + src
        if logits is not None:
            self.logits[slot] = logits[src]

    def update(self, images, labels, task_ids, rng, logits=None):
        """Offer a batch of stream items to the memory."""
        images = np.asarray(images)
        labels = np.asarray(labels)
        task_ids = np.broadcast_to(np.asarray(task_ids), labels.shape)
        k = len(labels)
        if self.capacity == 0 or k == 0:
            self.n_seen += k
            return
        self._alloc(images, logits)
        fill = min(k, self.capacity - self.size)
        for src in range(fill):
            self._store(self.size, src, images, labels, task_ids, logits)
            self.size += 1
        if fill < k:
            # 1-based stream positions of the items arriving after the buffer filled
            pos = self.n_seen + np.arange(fill, k) + 1
            if self.policy == "reservoir":
                draws = np.asarray(rng.integers(0, pos))
                accepted = np.flatnonzero(draws < self.capacity)
                slots = draws[accepted]
            else:
                keep = np.asarray(rng.random(len(pos))) < self.capacity / pos
                slot_draws = np.asarray(rng.integers(0, self.capacity, len(pos)))
                accepted = np.flatnonzero(keep)
                slots = slot_draws[accepted]
            for a, slot in zip(accepted, slots):
                self._store(int(slot), fill + int(a), images, labels, task_ids, logits)
        self.n_seen += k

    def _gather(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        if self.images is None:
            return MemoryBatch(np.zeros((0,)), np.zeros(0, np.int64), np.zeros(0, np.int64),
                               np.zeros(0, np.int64), None)
        return MemoryBatch(
            self.images[idx], self.labels[idx], self.task_ids[idx], self.seen_index[idx],
            None if self.logits is None else self.logits[idx],
        )

    def retrieve(self, batch_size, rng):
        """Uniform sample without replacement of up to ``batch_size`` stored items."""
        n = min(batch_size, self.size)
        if n == 0:
            return self._gather([])
        return self._gather(rng.choice(self.size, size=n, replace=False))

    def class_samples(self, class_id):
        """Every stored item of one class, ordered by stream position."""
        idx = np.flatnonzero(self.labels[:self.size] == class_id)
        idx = idx[np.argsort(self.seen_index[idx], kind="stable")]
        return self._gather(idx)

    def contents(self):
        return self._gather(np.arange(self.size))

    def items(self):
        b = self.contents()
        return [
            MemoryItem(b.images[i], int(b.labels[i]), int(b.task_ids[i]), int(b.seen_index[i]),
                       None if b.logits is None else b.logits[i])
            for i in range(len(b))
        ]

    def dump_csv(self, path):
        """Audit snapshot: one row per slot with label, task id and stream position."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["slot", "label", "task_id", "seen_index"])
            for s in range(self.size):
                w.writerow([s, int(self.labels[s]), int(self.task_ids[s]), int(self.seen_index[s])])
