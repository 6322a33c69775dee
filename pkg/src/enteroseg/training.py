"""Optimizer, schedules, and the seeded minibatch training loop.

Adam with bias correction drives both stages; the learning rate halves on a
validation plateau and training stops early after a fixed window without
improvement. Improvement always means a strict decrease beyond an absolute
threshold of 1e-6. The best-validation parameter snapshot is what gets
checkpointed.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import checkpoint
from .dataset import AugmentationSpec, augment
from .losses import composite_loss, weighted_cross_entropy
from .medio import GrayscaleSlice, LabelMask
from .tensor import Tensor, backward, no_grad

__all__ = [
    "TrainConfig", "AdamState", "adam_step", "PlateauScheduler", "EarlyStop",
    "EpochRecord", "TrainLog", "TrainingAborted", "train",
]

IMPROVEMENT_EPS = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 16
    max_epochs: int = 100
    early_stop_patience: int = 20
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0


class AdamState:
    """First/second moment buffers keyed by parameter name, plus step count."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update in place; missing grads are skipped."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad.astype(np.float64)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.data.shape, dtype=np.float64)
        v = state.v.get(name)
        if v is None:
            v = state.v[name] = np.zeros(p.data.shape, dtype=np.float64)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data.astype(np.float64) - step).astype(p.data.dtype)


class PlateauScheduler:
    """Halve (by ``factor``) when ``patience`` epochs bring no improvement.

    The bad-epoch counter resets after each reduction; the first observed
    value always becomes the incumbent best.
    """

    def __init__(self, lr: float, factor: float = 0.5, patience: int = 5,
                 eps: float = IMPROVEMENT_EPS):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.eps = eps
        self.best = np.inf
        self.bad = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best - self.eps:
            self.best = val_loss
            self.bad = 0
        else:
            self.bad += 1
            if self.bad >= self.patience:
                self.lr *= self.factor
                self.bad = 0
        return self.lr


class EarlyStop:
    """True once ``patience`` consecutive epochs fail to improve."""

    def __init__(self, patience: int = 20, eps: float = IMPROVEMENT_EPS):
        self.patience = patience
        self.eps = eps
        self.best = np.inf
        self.bad = 0

    def step(self, val_loss: float) -> bool:
        if val_loss < self.best - self.eps:
            self.best = val_loss
            self.bad = 0
            return False
        self.bad += 1
        return self.bad >= self.patience


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    seconds: float


@dataclass
class TrainLog:
    """Per-epoch history; wall time is carried but excluded from determinism."""
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = float("inf")
    stop_reason: str = ""

    def deterministic_view(self) -> dict:
        return {
            "epochs": [(r.epoch, r.train_loss, r.val_loss, r.lr)
                       for r in self.records],
            "best_epoch": self.best_epoch,
            "best_val": self.best_val,
            "stop_reason": self.stop_reason,
        }

    def to_jsonl(self) -> str:
        lines = [json.dumps(asdict(r), sort_keys=True) for r in self.records]
        lines.append(json.dumps({"best_epoch": self.best_epoch,
                                 "best_val": self.best_val,
                                 "stop_reason": self.stop_reason},
                                sort_keys=True))
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_jsonl(text: str) -> "TrainLog":
        log = TrainLog()
        for line in text.strip().splitlines():
            raw = json.loads(line)
            if "stop_reason" in raw:
                log.best_epoch = raw["best_epoch"]
                log.best_val = raw["best_val"]
                log.stop_reason = raw["stop_reason"]
            else:
                log.records.append(EpochRecord(**raw))
        return log


class TrainingAborted(RuntimeError):
    """Raised on a non-finite loss, carrying the offending batch provenance."""

    def __init__(self, epoch: int, batch_index: int, provenance):
        self.epoch = epoch
        self.batch_index = batch_index
        self.provenance = list(provenance)
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch_index}, "
                         f"samples {self.provenance}")


def _as_batch(items, idxs, augmenter=None) -> tuple[np.ndarray, np.ndarray]:
    imgs, lbls = [], []
    for i in idxs:
        img, lbl = items[i]
        if augmenter is not None:
            img, lbl = augmenter(img, lbl)
        imgs.append(img)
        lbls.append(lbl)
    x = np.stack(imgs)[:, None, :, :].astype(np.float32)
    y = np.stack(lbls)
    return x, y


def _loss_for(model, x: np.ndarray, y: np.ndarray, loss_kind: str,
              class_weights, train: bool):
    pred = model.forward(Tensor(x), train=train)
    if loss_kind == "weighted_ce":
        if class_weights is None:
            raise ValueError("weighted_ce needs class weights")
        return pred, weighted_cross_entropy(pred, y, class_weights)
    if loss_kind == "composite":
        return pred, composite_loss(pred, y[:, None, :, :])
    raise ValueError(f"unknown loss kind {loss_kind!r}")


def train(model, train_items, val_items, cfg: TrainConfig, loss_kind: str,
          class_weights=None, aug_spec: AugmentationSpec | None = None,
          checkpoint_path=None) -> tuple[dict[str, np.ndarray], TrainLog]:
    """Seeded minibatch loop returning the best-validation state and the log.

    ``train_items``/``val_items`` are sequences of (image[H,W] float,
    target[H,W] int) pairs. Augmentation, when given, is applied on the fly
    to training samples only, with one rng stream per (seed, epoch) so a
    single-worker rerun is bit-identical.
    """
    if not train_items or not val_items:
        raise ValueError("need non-empty train and val streams")
    params = model.params()
    opt = AdamState(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
    sched = PlateauScheduler(cfg.lr, factor=cfg.plateau_factor,
                             patience=cfg.plateau_patience)
    stopper = EarlyStop(patience=cfg.early_stop_patience)
    shuffle_rng = np.random.default_rng(cfg.seed)
    log = TrainLog()
    best_state: dict[str, np.ndarray] | None = None
    lr = cfg.lr

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.monotonic()
        order = shuffle_rng.permutation(len(train_items))
        aug_rng = np.random.default_rng([cfg.seed, epoch]) if aug_spec else None
        augmenter = None
        if aug_spec is not None:
            def augmenter(img, lbl):
                a_img, a_lbl = augment(GrayscaleSlice(pixels=img),
                                       LabelMask(labels=lbl), aug_spec, aug_rng)
                return a_img.pixels, a_lbl.labels

        train_losses = []
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idxs = order[start:start + cfg.batch_size]
            x, y = _as_batch(train_items, idxs, augmenter)
            model.zero_grads()
            _, loss = _loss_for(model, x, y, loss_kind, class_weights, train=True)
            lval = float(loss.data)
            if not np.isfinite(lval):
                raise TrainingAborted(epoch, b, [int(i) for i in idxs])
            backward(loss)
            adam_step(params, opt, lr)
            train_losses.append(lval)

        val_losses = []
        with no_grad():
            for start in range(0, len(val_items), cfg.batch_size):
                idxs = range(start, min(start + cfg.batch_size, len(val_items)))
                x, y = _as_batch(val_items, idxs)
                _, loss = _loss_for(model, x, y, loss_kind, class_weights,
                                    train=False)
                val_losses.append(float(loss.data) * len(idxs))
        val_loss = float(sum(val_losses) / len(val_items))

        log.records.append(EpochRecord(
            epoch=epoch, train_loss=float(np.mean(train_losses)),
            val_loss=val_loss, lr=lr, seconds=time.monotonic() - t0))

        if val_loss < log.best_val:
            log.best_val = val_loss
            log.best_epoch = epoch
            best_state = model.state_arrays()

        lr = sched.step(val_loss)
        if stopper.step(val_loss):
            log.stop_reason = "early_stop"
            break
    else:
        log.stop_reason = "max_epochs"

    assert best_state is not None
    if checkpoint_path is not None:
        checkpoint.save_checkpoint(checkpoint_path, best_state)
    return best_state, log
