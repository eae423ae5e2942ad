"""Adam and a deterministic classification training loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from ..blocks import ClassifierModel
from ..numcore.ops import cross_entropy_with_logits
from ..numcore.params import ParamStore, backward
from ..numcore.tensor import no_tape, recording
from .data import Dataset

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    patience: int | None = None
    target_accuracy: float | None = None
    eval_batch_size: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError("epochs and batch sizes must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be positive")


class Adam:
    def __init__(self, params: ParamStore, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


@dataclass
class EpochMetrics:
    epoch: int
    split: str
    loss: float
    accuracy: float


@dataclass
class TrainHistory:
    metrics: list[EpochMetrics] = field(default_factory=list)
    best_test_accuracy: float = 0.0
    best_epoch: int = 0
    best_state: dict | None = None
    first_batch_loss: float | None = None

    def split(self, name: str) -> list[EpochMetrics]:
        return [m for m in self.metrics if m.split == name]

    def write_csv(self, dest) -> None:
        """Write ``epoch,split,loss,accuracy`` rows to a path or an open text file."""
        if not hasattr(dest, "write"):
            with open(dest, "w", newline="") as f:
                return self.write_csv(f)
        w = csv.writer(dest, lineterminator="\n")
        w.writerow(["epoch", "split", "loss", "accuracy"])
        for m in self.metrics:
            w.writerow([m.epoch, m.split, repr(m.loss), repr(m.accuracy)])


def evaluate(model: ClassifierModel, x: np.ndarray, y: np.ndarray, batch_size: int = 500):
    """Mean loss and accuracy over (x, y) without recording a tape."""
    total_loss, correct = 0.0, 0
    with no_tape():
        for i in range(0, len(x), batch_size):
            logits = model.logits(x[i:i + batch_size])
            loss = cross_entropy_with_logits(logits, y[i:i + batch_size])
            total_loss += loss.item() * len(logits.data)
            correct += int((logits.data.argmax(axis=1) == y[i:i + batch_size]).sum())
    return total_loss / len(x), correct / len(x)


def train(model: ClassifierModel, data: Dataset, cfg: TrainConfig) -> TrainHistory:
    if model.n_classes != data.n_classes:
        raise ValueError(f"model has {model.n_classes} classes, dataset has {data.n_classes}")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.params, cfg.learning_rate, cfg.betas, cfg.eps)
    hist = TrainHistory()
    stale = 0
    n = len(data.x_train)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = data.x_train[idx], data.y_train[idx]
            model.params.zero_grad()
            try:
                with recording() as tape:
                    logits = model.logits(xb)
                    loss = cross_entropy_with_logits(logits, yb)
            except FloatingPointError as exc:
                raise DivergenceError(f"epoch {epoch}, batch at {start}: {exc}") from exc
            lv = loss.item()
            if not np.isfinite(lv):
                raise DivergenceError(f"epoch {epoch}, batch at {start}: loss is {lv}")
            if hist.first_batch_loss is None:
                hist.first_batch_loss = lv
            backward(tape, loss, model.params)
            opt.step()
            loss_sum += lv * len(idx)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
        hist.metrics.append(EpochMetrics(epoch, "train", loss_sum / n, correct / n))
        test_loss, test_acc = evaluate(model, data.x_test, data.y_test, cfg.eval_batch_size)
        hist.metrics.append(EpochMetrics(epoch, "test", test_loss, test_acc))
        log.info("epoch %d train_loss %.4f train_acc %.4f test_loss %.4f test_acc %.4f",
                 epoch, loss_sum / n, correct / n, test_loss, test_acc)
        if test_acc > hist.best_test_accuracy or hist.best_state is None:
            hist.best_test_accuracy = test_acc
            hist.best_epoch = epoch
            hist.best_state = model.params.state()
            stale = 0
        else:
            stale += 1
        if cfg.target_accuracy is not None and test_acc >= cfg.target_accuracy:
            break
        if cfg.patience is not None and stale >= cfg.patience:
            break
    return hist
