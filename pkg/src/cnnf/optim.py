"""SGD with momentum and weight decay, plateau-driven learning-rate decay,
and the epoch-level training loop.

The update rule is

    v' = momentum * v - lr * (grad + weight_decay * param)
    p' = p + v'

and the learning rate drops by `decay_factor` (never below `min_lr`)
whenever the validation error has not set a new best for `patience`
consecutive epochs.  Every source of randomness in an epoch (batch order,
dropout masks) derives from the run seed, so a finished run is a pure
function of (net, data, config, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import layers as L
from .data import Dataset, make_batches
from .errors import DataError, DivergenceError, InvalidArgumentError, ShapeError
from .model import Network
from .tensor import derive_seed


@dataclass
class SGDConfig:
    lr: float = 1e-3  # one decade below the 1e-2 from-scratch rate
    momentum: float = 0.5
    weight_decay: float = 5e-4
    batch_size: int = 50
    epochs: int = 400
    early_stop_patience: Optional[int] = None  # None disables early stopping

    def __post_init__(self):
        if self.lr <= 0:
            raise InvalidArgumentError("lr must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidArgumentError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise InvalidArgumentError("weight_decay must be >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise InvalidArgumentError("batch_size and epochs must be >= 1")


@dataclass
class LRSchedule:
    """Plateau rule: divide the rate by `decay_factor` once the validation
    error has gone `patience` consecutive epochs without a new best."""

    decay_factor: float = 10.0
    patience: int = 10
    min_lr: float = 1e-6
    lr: Optional[float] = None  # filled from SGDConfig.lr by train()
    best: Optional[float] = field(default=None, repr=False)
    bad_epochs: int = field(default=0, repr=False)

    def __post_init__(self):
        if self.decay_factor <= 1:
            raise InvalidArgumentError("decay_factor must be > 1")
        if self.patience < 1:
            raise InvalidArgumentError("patience must be >= 1")
        if self.min_lr <= 0:
            raise InvalidArgumentError("min_lr must be > 0")


def schedule_update(sched: LRSchedule, epoch_val_error: float) -> float:
    """Feed one epoch's validation error; returns the rate for the next epoch."""
    if not 0.0 <= epoch_val_error <= 1.0:
        raise InvalidArgumentError("error must lie in [0, 1]")
    if sched.lr is None:
        raise InvalidArgumentError("schedule has no learning rate set")
    if sched.best is None or epoch_val_error < sched.best:
        sched.best = epoch_val_error
        sched.bad_epochs = 0
    else:
        sched.bad_epochs += 1
        if sched.bad_epochs >= sched.patience:
            sched.lr = max(sched.lr / sched.decay_factor, sched.min_lr)
            sched.bad_epochs = 0
    return sched.lr


@dataclass
class EpochRecord:
    epoch: int
    train_top1: float
    val_top1: float
    lr: float


def sgd_step(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray,
             cfg: SGDConfig, lr: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray]:
    """One momentum step; returns (param', velocity') as fresh arrays."""
    if not (param.shape == grad.shape == velocity.shape):
        raise ShapeError(
            f"param {param.shape}, grad {grad.shape}, velocity {velocity.shape} differ")
    step_lr = cfg.lr if lr is None else lr
    if cfg.weight_decay:
        grad = grad + cfg.weight_decay * param
    new_v = cfg.momentum * velocity - step_lr * grad
    return param + new_v, new_v


Velocities = Dict[Tuple[str, str], np.ndarray]


def _frozen_prefix_boundary(net: Network) -> Optional[int]:
    """Index of fc6 when everything before it is frozen and batchnorm-free.

    Under those conditions prefix activations are per-sample deterministic
    and mode-independent, so the trainer may cache them across epochs.
    """
    if not net.has_layer("fc6"):
        return None
    boundary = net.index("fc6")
    for spec in net.layers[:boundary]:
        if spec.kind == "bn" or spec.trainable:
            return None
    return boundary


class _PrefixCache:
    """Caches frozen-prefix activations keyed by (split, sample index)."""

    def __init__(self, net: Network, boundary: int):
        self._prefix = Network(net.layers[:boundary], net.input_hw,
                               net.in_channels, net.num_classes, net.dtype)
        self._store: Dict[Tuple[str, int], np.ndarray] = {}

    def features(self, split: str, samples, idx: List[int]) -> np.ndarray:
        missing = [i for i in idx if (split, i) not in self._store]
        if missing:
            x = np.concatenate([samples[i].image for i in missing], axis=0)
            out = self._prefix.forward(x, L.EVAL)
            for row, i in enumerate(missing):
                self._store[(split, i)] = out[row:row + 1]
        return np.concatenate([self._store[(split, i)] for i in idx], axis=0)


def _top1_count(logits: np.ndarray, labels: np.ndarray) -> int:
    preds = logits.reshape(logits.shape[0], -1).argmax(axis=1)
    return int(np.count_nonzero(preds != labels))


def train(net: Network, train_set: Dataset, val_set: Dataset, cfg: SGDConfig,
          sched: Optional[LRSchedule] = None, seed: int = 0,
          feature_cache: bool = True,
          on_epoch: Optional[Callable[[Network, EpochRecord, Velocities], None]] = None,
          ) -> Tuple[Network, List[EpochRecord], Velocities]:
    """Run the training loop; `net` is updated in place and returned.

    Per epoch: seeded shuffle, batches of cfg.batch_size (final partial
    batch included), forward/loss/backward/step per batch, then train and
    validation top-1 error in eval mode, then the plateau schedule.
    Raises DivergenceError with epoch/batch context on a non-finite loss.
    """
    if not train_set.samples or not val_set.samples:
        raise DataError("train and validation sets must be non-empty")
    trainable = list(net.trainable_param_items())
    if not trainable:
        raise DataError("network has no trainable layers")
    if sched is None:
        sched = LRSchedule()
    if sched.lr is None:
        sched.lr = cfg.lr
    lr = sched.lr

    velocities: Velocities = {(name, fieldname): np.zeros_like(arr)
                              for name, fieldname, arr in trainable}

    boundary = _frozen_prefix_boundary(net) if feature_cache else None
    cache = _PrefixCache(net, boundary) if boundary is not None else None

    def batch_logits(samples, split, idx, xb, mode, dropout_seed=None):
        if cache is not None:
            feats = cache.features(split, samples, idx)
            return net.forward(feats, mode, dropout_seed=dropout_seed, start=boundary)
        return net.forward(xb, mode, dropout_seed=dropout_seed)

    def split_error(samples, labels, split) -> float:
        n = len(samples)
        wrong = 0
        for start in range(0, n, cfg.batch_size):
            idx = list(range(start, min(start + cfg.batch_size, n)))
            xb = None if cache is not None else np.concatenate(
                [samples[i].image for i in idx], axis=0)
            logits = batch_logits(samples, split, idx, xb, L.EVAL)
            wrong += _top1_count(logits, labels[idx])
        return wrong / n

    train_labels = train_set.labels()
    val_labels = val_set.labels()

    history: List[EpochRecord] = []
    best_val = math.inf
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        for b, (xb, yb, idx) in enumerate(
                make_batches(train_set.samples, cfg.batch_size, seed, epoch)):
            dropout_seed = derive_seed(seed, f"dropout/{epoch}/{b}")
            logits = batch_logits(train_set.samples, "train", idx, xb, L.TRAIN,
                                  dropout_seed=dropout_seed)
            loss, probs = L.softmax_xent(logits, yb)
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {b}")
            grads = net.backward(L.softmax_xent_grad(probs, yb))
            for lname, per_layer in grads.items():
                params = net.layer(lname).params
                for fieldname, g in per_layer.items():
                    key = (lname, fieldname)
                    p_new, v_new = sgd_step(getattr(params, fieldname), g,
                                            velocities[key], cfg, lr=lr)
                    setattr(params, fieldname, p_new)
                    velocities[key] = v_new
        record = EpochRecord(epoch,
                             split_error(train_set.samples, train_labels, "train"),
                             split_error(val_set.samples, val_labels, "val"),
                             lr)
        history.append(record)
        if on_epoch is not None:
            on_epoch(net, record, velocities)
        lr = schedule_update(sched, record.val_top1)
        if cfg.early_stop_patience is not None:
            if record.val_top1 < best_val:
                best_val = record.val_top1
                stale = 0
            else:
                stale += 1
                if stale >= cfg.early_stop_patience:
                    break
    return net, history, velocities
