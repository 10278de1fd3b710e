"""Training loop, step learning-rate schedule and resumable checkpoints."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

from . import checkpoint as ckpt
from .loss import LOSS_WEIGHTS, FeatureExtractor, total_loss
from .net import MKoIE, ModelConfig, build_model, load_model_arrays, param_arrays
from .tasks import TaskKind

CHECKPOINT_KIND = "train-state"


class MixedTaskBatchError(ValueError):
    pass


class NonFiniteLossError(RuntimeError):
    def __init__(self, step, task, components):
        self.step, self.task, self.components = step, task, components
        super().__init__(
            f"non-finite loss at step {step} (task {TaskKind(task).slug}): "
            + ", ".join(f"{k}={v}" for k, v in components.items())
        )


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 8
    lr0: float = 1e-3
    lr_drop_epochs: tuple = (60, 120, 180)
    lr_drop_factor: float = 0.1
    seed: int = 0
    checkpoint_every: int = 0  # 0: only after the last epoch
    task_mix: dict = field(default_factory=lambda: {"id": 1.0, "llie": 1.0, "nhie": 1.0})
    mode: str = "single"  # "single" or "interleaved"
    task: str = "nhie"  # used in single mode
    grad_clip: float | None = 1.0
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    loss_weights: tuple = LOSS_WEIGHTS

    def __post_init__(self):
        self.lr_drop_epochs = tuple(int(e) for e in self.lr_drop_epochs)
        self.betas = tuple(float(b) for b in self.betas)
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        self.task = TaskKind.parse(self.task).slug
        if self.epochs <= 0:
            raise ValueError("epochs must be > 0")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        drops = self.lr_drop_epochs
        if any(b <= a for a, b in zip(drops, drops[1:])):
            raise ValueError(f"lr_drop_epochs must be strictly increasing, got {drops}")
        if drops and (drops[0] < 0 or drops[-1] >= self.epochs):
            raise ValueError(f"lr_drop_epochs must lie in [0, epochs), got {drops}")
        if self.mode not in ("single", "interleaved"):
            raise ValueError(f"mode must be 'single' or 'interleaved', got {self.mode!r}")
        for key in self.task_mix:
            TaskKind.parse(key)

    def tasks(self) -> list[TaskKind]:
        if self.mode == "single":
            return [TaskKind.parse(self.task)]
        return [TaskKind.parse(k) for k, w in self.task_mix.items() if float(w) > 0]

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("lr_drop_epochs", "betas", "loss_weights"):
            d[k] = list(d[k])
        return d


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """``lr0 * factor**k`` with k the number of drop epochs <= ``epoch``.

    Evaluated in decimal so the decade drops land exactly on 1e-4, 1e-5, ...
    """
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    k = sum(1 for e in cfg.lr_drop_epochs if e <= epoch)
    return float(Decimal(repr(cfg.lr0)) * Decimal(repr(cfg.lr_drop_factor)) ** k)


@dataclass
class TrainState:
    model: MKoIE
    optimizer: torch.optim.Adam
    epoch: int = 0
    global_step: int = 0
    seed: int = 0


def make_optimizer(model: MKoIE, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        model.parameters(), lr=cfg.lr0, betas=cfg.betas, eps=cfg.adam_eps, foreach=False
    )


def init_state(model_config: ModelConfig, cfg: TrainConfig) -> TrainState:
    model = build_model(model_config, seed=cfg.seed)
    return TrainState(model=model, optimizer=make_optimizer(model, cfg), seed=cfg.seed)


def _batch_task(labels) -> TaskKind:
    tasks = {TaskKind.parse(t) for t in labels}
    if len(tasks) != 1:
        raise MixedTaskBatchError(
            f"batch mixes tasks {sorted(t.slug for t in tasks)}; batches must be task-pure"
        )
    return tasks.pop()


def train_epoch(
    state: TrainState,
    batches: Iterable,
    cfg: TrainConfig,
    fx: FeatureExtractor | None,
    log=None,
) -> tuple[TrainState, dict[str, dict[str, float]]]:
    """One pass over ``batches`` of ``(degraded, clean, task_labels)``.

    Updates ``state`` in place (and returns it) together with the mean loss
    components per task.  ``log`` receives one dict per step if given.
    """
    lr = lr_at(state.epoch, cfg)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    model = state.model
    model.train()
    sums: dict[str, dict[str, float]] = {}
    counts: dict[str, int] = {}
    for degraded, clean, labels in batches:
        task = _batch_task(labels)
        t0 = time.perf_counter()
        state.optimizer.zero_grad(set_to_none=True)
        out = model(degraded, task)
        lb = total_loss(out, clean, fx, cfg.loss_weights)
        values = lb.as_floats()
        if not lb.is_finite():
            raise NonFiniteLossError(state.global_step, task, values)
        lb.total.backward()
        if cfg.grad_clip:
            params = [p for p in model.parameters() if p.grad is not None]
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip, foreach=False)
        state.optimizer.step()
        state.global_step += 1
        acc = sums.setdefault(task.slug, {"rec": 0.0, "per": 0.0, "total": 0.0})
        for k, v in values.items():
            acc[k] += v
        counts[task.slug] = counts.get(task.slug, 0) + 1
        if log is not None:
            log(
                {
                    "step": state.global_step,
                    "epoch": state.epoch,
                    "task": task.slug,
                    "lr": lr,
                    **values,
                    "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3),
                }
            )
    state.epoch += 1
    metrics = {t: {k: v / counts[t] for k, v in acc.items()} for t, acc in sums.items()}
    return state, metrics


class MetricsLog:
    """Append-only JSON-lines metrics file."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def __call__(self, record: dict):
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def records(self) -> list[dict]:
        if not self.path.exists():
            return []
        with open(self.path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def save_checkpoint(state: TrainState, path, train_config: TrainConfig | None = None) -> None:
    arrays = {f"model/{k}": v for k, v in param_arrays(state.model).items()}
    names = {id(p): n for n, p in state.model.named_parameters()}
    for p, slot in state.optimizer.state.items():
        name = names[id(p)]
        for key in sorted(slot):
            value = slot[key]
            value = value.detach().cpu().numpy() if torch.is_tensor(value) else np.asarray(value)
            arrays[f"optim/{name}/{key}"] = value
    meta = {
        "kind": CHECKPOINT_KIND,
        "model_config": state.model.config.to_dict(),
        "train_config": train_config.to_dict() if train_config else None,
        "epoch": state.epoch,
        "global_step": state.global_step,
        "seed": state.seed,
    }
    ckpt.write_arrays(path, arrays, meta)


def load_checkpoint(
    path, model_config: ModelConfig | None = None, train_config: TrainConfig | None = None
) -> TrainState:
    """Restore a :class:`TrainState`.

    If ``model_config`` is given, the stored parameters must fit a model built
    from it, otherwise :class:`CheckpointShapeError` is raised.
    """
    arrays, meta = ckpt.read_arrays(path)
    if meta.get("kind") not in (CHECKPOINT_KIND, "params"):
        raise ckpt.CheckpointFormatError(f"unexpected checkpoint kind {meta.get('kind')!r}")
    stored = ModelConfig.from_dict(meta["model_config"])
    model = MKoIE(model_config or stored)
    load_model_arrays(model, {k[6:]: v for k, v in arrays.items() if k.startswith("model/")})
    if train_config is None:
        train_config = TrainConfig(**meta["train_config"]) if meta.get("train_config") else TrainConfig()
    optimizer = make_optimizer(model, train_config)
    params = dict(model.named_parameters())
    for key, value in arrays.items():
        if not key.startswith("optim/"):
            continue
        name, slot = key[6:].rsplit("/", 1)
        if name not in params:
            raise ckpt.CheckpointShapeError(f"optimizer state for unknown parameter {name}")
        optimizer.state[params[name]][slot] = torch.from_numpy(np.array(value))
    return TrainState(
        model=model,
        optimizer=optimizer,
        epoch=int(meta.get("epoch", 0)),
        global_step=int(meta.get("global_step", 0)),
        seed=int(meta.get("seed", 0)),
    )


def fit(
    state: TrainState,
    dataset,
    cfg: TrainConfig,
    fx: FeatureExtractor | None,
    log=None,
    checkpoint_path=None,
    on_epoch=None,
) -> TrainState:
    """Run epochs ``state.epoch .. cfg.epochs - 1`` with periodic checkpoints."""
    from .data import iter_batches

    while state.epoch < cfg.epochs:
        batches = iter_batches(
            dataset, cfg.batch_size, cfg.seed, state.epoch, tasks=cfg.tasks(), task_mix=cfg.task_mix
        )
        state, metrics = train_epoch(state, batches, cfg, fx, log)
        if on_epoch is not None:
            on_epoch(state, metrics)
        last = state.epoch == cfg.epochs
        every = cfg.checkpoint_every
        if checkpoint_path is not None and (last or (every and state.epoch % every == 0)):
            save_checkpoint(state, checkpoint_path, cfg)
    return state
