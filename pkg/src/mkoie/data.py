"""Paired datasets on disk and deterministic task-pure batching."""
from __future__ import annotations

from pathlib import Path
from typing import Iterator

import numpy as np
import torch

from .degrade import read_image
from .tasks import ALL_TASKS, TaskKind


class PairedDataset:
    """In-memory (degraded, clean) pairs grouped by task.

    Images are float32 C×H×W arrays in [0, 1].  ``ids`` keeps the sample ids
    so reports and dumps can refer back to files.
    """

    def __init__(self):
        self.pairs: dict[TaskKind, list[tuple[np.ndarray, np.ndarray]]] = {}
        self.ids: dict[TaskKind, list[str]] = {}

    def add(self, task, degraded, clean, sample_id: str | None = None):
        task = TaskKind.parse(task)
        degraded = np.asarray(degraded, dtype=np.float32)
        clean = np.asarray(clean, dtype=np.float32)
        if degraded.shape != clean.shape:
            raise ValueError(f"pair shapes differ: {degraded.shape} vs {clean.shape}")
        bucket = self.pairs.setdefault(task, [])
        self.ids.setdefault(task, []).append(sample_id or f"{task.slug}_{len(bucket):05d}")
        bucket.append((degraded, clean))

    @property
    def tasks(self) -> list[TaskKind]:
        return [t for t in ALL_TASKS if self.pairs.get(t)]

    def __len__(self):
        return sum(len(v) for v in self.pairs.values())

    def count(self, task) -> int:
        return len(self.pairs.get(TaskKind.parse(task), []))

    @classmethod
    def from_directory(cls, root, tasks=None) -> "PairedDataset":
        """Load ``root/<task>/{degraded,clean}/<id>.png``."""
        root = Path(root)
        if not root.is_dir():
            raise FileNotFoundError(f"dataset root {root} does not exist")
        ds = cls()
        wanted = [TaskKind.parse(t) for t in tasks] if tasks else list(ALL_TASKS)
        for task in wanted:
            deg_dir = root / task.slug / "degraded"
            if not deg_dir.is_dir():
                continue
            for path in sorted(deg_dir.glob("*.png")):
                clean_path = root / task.slug / "clean" / path.name
                if not clean_path.exists():
                    raise FileNotFoundError(f"missing clean counterpart for {path}")
                ds.add(task, read_image(path), read_image(clean_path), path.stem)
        return ds


def _weighted_round_robin(counts: dict[TaskKind, int], weights: dict[TaskKind, float]) -> list[TaskKind]:
    # smooth weighted round robin; deterministic, each task emitted counts[t] times
    remaining = dict(counts)
    credit = {t: 0.0 for t in counts}
    order = []
    while any(remaining.values()):
        live = [t for t in remaining if remaining[t] > 0]
        total = sum(weights[t] for t in live)
        for t in live:
            credit[t] += weights[t]
        pick = max(live, key=lambda t: (credit[t], -int(t)))
        credit[pick] -= total
        remaining[pick] -= 1
        order.append(pick)
    return order


def iter_batches(
    dataset: PairedDataset,
    batch_size: int,
    seed: int,
    epoch: int,
    tasks=None,
    task_mix: dict | None = None,
) -> Iterator[tuple[torch.Tensor, torch.Tensor, list[TaskKind]]]:
    """Yield task-pure ``(degraded, clean, task_labels)`` batches.

    Shuffling depends only on ``(seed, epoch)``, so a resumed run sees the same
    order as an uninterrupted one.  With several tasks, batches are interleaved
    by weighted round robin according to ``task_mix``.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    tasks = [TaskKind.parse(t) for t in (tasks or dataset.tasks)]
    weights = {t: 1.0 for t in tasks}
    if task_mix:
        for key, w in task_mix.items():
            t = TaskKind.parse(key)
            if t in weights:
                weights[t] = float(w)
        tasks = [t for t in tasks if weights[t] > 0]
    per_task = {}
    for t in tasks:
        n = dataset.count(t)
        if n == 0:
            raise ValueError(f"dataset has no samples for task {t.slug}")
        rng = np.random.default_rng([seed, epoch, int(t)])
        perm = rng.permutation(n)
        per_task[t] = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    order = _weighted_round_robin({t: len(b) for t, b in per_task.items()}, weights)
    cursor = {t: 0 for t in per_task}
    for t in order:
        idx = per_task[t][cursor[t]]
        cursor[t] += 1
        pairs = [dataset.pairs[t][i] for i in idx]
        degraded = torch.from_numpy(np.stack([p[0] for p in pairs]))
        clean = torch.from_numpy(np.stack([p[1] for p in pairs]))
        yield degraded, clean, [t] * len(pairs)
