"""Adam with coupled L2 weight decay, the training loop and evaluation."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from vic import ops
from vic.config import TrainConfig
from vic.data import BatchIterator, DatasetBundle
from vic.model import Module
from vic.tensor import Tensor, no_grad

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, Tensor], state: AdamState, cfg: TrainConfig) -> None:
    """One Adam update in place. Weight decay is added to the gradient (L2), not decoupled."""
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise RuntimeError(f"no gradient for trainable parameter(s): {missing}")
    state.step += 1
    t = state.step
    b1, b2, lr, wd, eps = cfg.beta1, cfg.beta2, cfg.learning_rate, cfg.weight_decay, cfg.eps
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad
        if wd:
            g = g + wd * p.data
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


@dataclass
class History:
    epoch: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    test_acc: list[float] = field(default_factory=list)
    test_loss: list[float] = field(default_factory=list)
    wall_seconds: list[float] = field(default_factory=list)
    step_loss: list[float] = field(default_factory=list)

    @property
    def best_acc(self) -> float:
        accs = [a for a in self.test_acc if not math.isnan(a)]
        return max(accs) if accs else float("nan")

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in vars(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "History":
        return cls(**{k: list(v) for k, v in data.items()})


def predict(model: Module, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    out = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            out.append(model(Tensor(images[start:start + batch_size])).data)
    return np.concatenate(out) if out else np.zeros((0, model.config.num_classes), np.float32)


def accuracy_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index
    return float((np.argmax(logits, axis=1) == labels).mean()) if len(labels) else float("nan")


def evaluate(model: Module, images: np.ndarray, labels: np.ndarray, batch_size: int = 512) -> dict:
    logits = predict(model, images, batch_size)
    loss = ops.cross_entropy_logits(Tensor(logits), labels).item() if len(labels) else float("nan")
    return {"accuracy": accuracy_from_logits(logits, labels), "loss": loss}


def train_step(model: Module, images: np.ndarray, labels: np.ndarray, state: AdamState, cfg: TrainConfig) -> float:
    params = dict(model.named_parameters())
    for p in params.values():
        p.grad = None
    loss = ops.cross_entropy_logits(model(Tensor(images)), labels)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite loss {value} at step {state.step + 1} (lr={cfg.learning_rate})")
    loss.backward()
    adam_step(params, state, cfg)
    for p in params.values():
        p.grad = None
    return value


def train(
    model: Module,
    bundle: DatasetBundle,
    cfg: TrainConfig,
    state: AdamState | None = None,
    history: History | None = None,
    start_epoch: int = 0,
    max_steps: int | None = None,
    on_epoch_end: Callable[[int, History, AdamState], None] | None = None,
) -> History:
    """Train ``model`` on ``bundle.train_*`` for epochs ``start_epoch .. cfg.epochs - 1``.

    Test accuracy is evaluated every ``cfg.eval_every`` epochs and on the last
    epoch; NaN marks epochs that were not evaluated. ``max_steps`` stops early
    (for smoke and determinism runs) after that many optimizer steps in total.
    """
    state = state or AdamState()
    history = history or History()
    it = BatchIterator(bundle.train_images, bundle.train_labels, cfg.batch_size, seed=cfg.seed)
    # wall clock continues across resumes
    t0 = time.perf_counter() - (history.wall_seconds[-1] if history.wall_seconds else 0.0)
    for epoch in range(start_epoch, cfg.epochs):
        total, count = 0.0, 0
        for images, labels in it.batches(epoch):
            if max_steps is not None and state.step >= max_steps:
                break
            loss = train_step(model, images, labels, state, cfg)
            history.step_loss.append(loss)
            total += loss * len(labels)
            count += len(labels)
        stopped = max_steps is not None and state.step >= max_steps
        last = epoch == cfg.epochs - 1 or stopped
        if (epoch + 1) % cfg.eval_every == 0 or last:
            res = evaluate(model, bundle.test_images, bundle.test_labels)
        else:
            res = {"accuracy": float("nan"), "loss": float("nan")}
        history.epoch.append(epoch + 1)
        history.train_loss.append(total / count if count else float("nan"))
        history.test_acc.append(res["accuracy"])
        history.test_loss.append(res["loss"])
        history.wall_seconds.append(time.perf_counter() - t0)
        log.info("epoch %d train_loss %.4f test_acc %.4f", epoch + 1, history.train_loss[-1], res["accuracy"])
        if on_epoch_end is not None:
            on_epoch_end(epoch + 1, history, state)
        if stopped:
            break
    return history
