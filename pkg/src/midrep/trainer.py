"""Toy-scale N-way identity classification training and end-to-end gradient checks."""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import netdef
from . import tensor as T
from .data import apply_augmentation, preprocess, sample_augmentation
from .errors import ArgumentError, DegenerateDataError
from .netdef import NetworkSpec, WeightStore


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.015
    lr_decay_factor: float = 0.1
    plateau_patience: int = 3
    max_decays: int = 2
    momentum: float = 0.9
    batch_size: int = 16
    dropout_rate: float = 0.5
    weight_decay: float = 0.0
    clip_norm: float = 0.0  # global gradient-norm clip; 0 disables
    seed: int = 0
    epochs: int = 30
    augment: bool = True

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ArgumentError("base_lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ArgumentError("momentum must be in [0, 1)")
        if not 0 <= self.dropout_rate < 1:
            raise ArgumentError("dropout_rate must be in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ArgumentError("batch_size and epochs must be >= 1")


class PlateauSchedule:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement, at most ``max_decays`` times."""

    def __init__(self, base_lr: float, factor: float = 0.1, patience: int = 3, max_decays: int = 2):
        self.lr = base_lr
        self.factor = factor
        self.patience = patience
        self.max_decays = max_decays
        self.best = -np.inf
        self.wait = 0
        self.decays = 0

    def step(self, metric: float) -> bool:
        """Record one epoch's validation metric; returns True when the rate was decayed."""
        if metric > self.best:
            self.best = metric
            self.wait = 0
            return False
        self.wait += 1
        if self.wait >= self.patience and self.decays < self.max_decays:
            self.lr *= self.factor
            self.decays += 1
            self.wait = 0
            return True
        return False


@dataclass
class TrainLog:
    epochs: list[dict] = field(default_factory=list)
    decay_events: list[int] = field(default_factory=list)

    def deterministic_view(self) -> dict:
        """Everything except wall-clock times."""
        rows = [{k: v for k, v in e.items() if k != "wall_time"} for e in self.epochs]
        return {"epochs": rows, "decay_events": list(self.decay_events)}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss", "val_acc", "lr"])
            for e in self.epochs:
                writer.writerow([e["epoch"], repr(e["loss"]), repr(e["val_acc"]), repr(e["lr"])])

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({"epochs": self.epochs, "decay_events": self.decay_events}, fh, indent=2)


def _with_dropout(spec: NetworkSpec, rate: float) -> NetworkSpec:
    layers = tuple(dataclasses.replace(l, rate=rate) if l.kind == "dropout" else l for l in spec.layers)
    return dataclasses.replace(spec, layers=layers)


def evaluate_classifier(spec: NetworkSpec, weights: WeightStore, images: np.ndarray, labels: np.ndarray,
                        batch_size: int = 32) -> float:
    """Top-1 accuracy on center patches of aligned faces."""
    correct = 0
    for start in range(0, len(images), batch_size):
        batch = np.stack([preprocess(im).data for im in images[start : start + batch_size]])
        out = netdef.forward(spec, weights, batch, taps=(), logits=True)
        correct += int(np.sum(out.logits.argmax(axis=1) == labels[start : start + batch_size]))
    return correct / len(images)


def train_cnn(spec: NetworkSpec, train_images, train_labels, val_images, val_labels,
              config: TrainConfig = TrainConfig(), weights: WeightStore | None = None):
    """SGD with momentum on softmax cross-entropy over augmented patches.

    ``*_images`` are aligned faces ``(N, 3, 120, 120)`` on [0, 255] and labels are
    class indices.  Returns the weights with the best validation accuracy and
    the training log.
    """
    train_labels = np.asarray(train_labels)
    val_labels = np.asarray(val_labels)
    if not spec.num_classes:
        raise ArgumentError("spec needs a classifier head (num_classes > 0)")
    if len(np.unique(train_labels)) < 2:
        raise DegenerateDataError("training needs at least two identity classes")
    if len(val_labels) == 0:
        raise ArgumentError("validation split is empty")
    spec = _with_dropout(spec, config.dropout_rate)
    rng = np.random.default_rng(config.seed)
    weights = netdef.init_weights(spec, config.seed) if weights is None else weights.copy()
    velocity = {l: {k: np.zeros_like(v) for k, v in b.items()} for l, b in weights.params.items()}
    schedule = PlateauSchedule(config.base_lr, config.lr_decay_factor, config.plateau_patience, config.max_decays)
    log = TrainLog()
    best_acc, best = -1.0, weights.copy()
    n = len(train_images)
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = schedule.lr
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            if config.augment:
                patches = [apply_augmentation(train_images[i], sample_augmentation(rng)) for i in idx]
            else:
                patches = [preprocess(train_images[i]).data for i in idx]
            acts = netdef.forward(spec, weights, np.stack(patches), taps=(), mode="train", rng=rng,
                                  logits=True, cache=True)
            loss, dlogits = T.softmax_xent_batch(acts.logits, train_labels[idx])
            _, grads = netdef.backward(spec, weights, acts, dlogits.astype(acts.logits.dtype))
            if config.clip_norm:
                norm = np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for b in grads.values() for g in b.values()))
                if norm > config.clip_norm:
                    grads = {l: {k: g * np.float32(config.clip_norm / norm) for k, g in b.items()}
                             for l, b in grads.items()}
            for layer, blobs in grads.items():
                for k, g in blobs.items():
                    p = weights.params[layer][k]
                    if config.weight_decay and k != "slopes":
                        g = g + config.weight_decay * p
                    v = velocity[layer][k]
                    v *= config.momentum
                    v -= np.float32(lr) * g.astype(np.float32)
                    p += v
            losses.append(loss)
        val_acc = evaluate_classifier(spec, weights, val_images, val_labels)
        if val_acc > best_acc:
            best_acc, best = val_acc, weights.copy()
        decayed = schedule.step(val_acc)
        if decayed:
            log.decay_events.append(epoch)
        log.epochs.append({"epoch": epoch, "loss": float(np.mean(losses)), "val_acc": val_acc, "lr": lr,
                           "wall_time": time.perf_counter() - t0})
    best.meta = dict(best.meta, seed=config.seed)
    return best, log


# --------------------------------------------------------------------------
# gradient checking


def _loss(spec, weights, x, label):
    out = netdef.forward(spec, weights, x, taps=(), logits=True)
    return T.softmax_xent(out.logits, label)[0]


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(spec: NetworkSpec, weights: WeightStore, x: np.ndarray, label: int, probes: int = 200,
               h: float = 1e-5, seed: int = 0, details: bool = False):
    """Max relative error between backprop and central differences at random parameter coordinates.

    Runs in 64-bit precision with dropout inactive (inference mode).  Probes
    pick a parameter blob uniformly, then a coordinate uniformly within it.
    With ``details=True`` the per-probe records are returned as well.
    """
    w64 = weights.astype(np.float64)
    x64 = np.asarray(x, dtype=np.float64)
    acts = netdef.forward(spec, w64, x64, taps=(), logits=True, cache=True)
    _, dlogits = T.softmax_xent(acts.logits, label)
    _, grads = netdef.backward(spec, w64, acts, dlogits)
    blobs = [(layer, k) for layer, b in w64.params.items() for k in b]
    rng = np.random.default_rng(seed)
    records = []
    for _ in range(probes):
        layer, k = blobs[rng.integers(len(blobs))]
        arr = w64.params[layer][k]
        flat = int(rng.integers(arr.size))
        idx = np.unravel_index(flat, arr.shape)
        orig = arr[idx]
        arr[idx] = orig + h
        plus = _loss(spec, w64, x64, label)
        arr[idx] = orig - h
        minus = _loss(spec, w64, x64, label)
        arr[idx] = orig
        numeric = (plus - minus) / (2 * h)
        analytic = float(grads[layer][k][idx])
        records.append({"layer": layer, "blob": k, "index": flat, "analytic": analytic, "numeric": numeric,
                        "rel_error": relative_error(analytic, numeric)})
    worst = max((r["rel_error"] for r in records), default=0.0)
    return (worst, records) if details else worst
