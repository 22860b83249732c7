"""Epoch loop tying together network, optimizer, and LR schedule."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .nn import SGD, Network

log = logging.getLogger(__name__)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_err: float
    pool_params: dict = field(default_factory=dict)


def pool_param_summary(net: Network) -> dict:
    """Compact per-layer view of learned pooling parameters (mean ``a`` for mixed)."""
    out = {}
    for i, layer in enumerate(net.layers):
        if getattr(layer, "variant", None) == "mixed":
            out[f"{i}.a"] = float(layer.params["a"].mean())
        elif getattr(layer, "variant", None) in ("gated", "tree"):
            out[f"{i}.omega_norm"] = float(np.linalg.norm(layer.params["omega"]))
    return out


def run_epoch(net: Network, opt: SGD, x: np.ndarray, y: np.ndarray, batch_size: int,
              seed: int, epoch: int) -> float:
    order = np.random.default_rng([seed, epoch]).permutation(len(y))
    total = 0.0
    for start in range(0, len(y), batch_size):
        idx = order[start:start + batch_size]
        loss, _ = net.loss_and_grads(x[idx], y[idx], train=True, step=opt.steps)
        opt.step(net)
        total += loss * len(idx)
    return total / len(y)


def fit(net: Network, opt: SGD, train: Dataset, val: Dataset, *, batch_size: int = 64,
        max_epochs: int = 30, seed: int = 0, start_epoch: int = 0,
        target_train_acc: float | None = None, callback=None) -> list[EpochRecord]:
    """Train until the LR schedule is exhausted or ``max_epochs`` is reached.

    With ``target_train_acc`` set, training also stops after the first epoch
    whose training accuracy reaches it.  Both datasets are centred with the
    *training* channel means.
    """
    x_tr = train.centered
    x_val = val.with_means(train.channel_means).centered
    history = []
    for epoch in range(start_epoch, max_epochs):
        lr = opt.schedule.lr
        loss = run_epoch(net, opt, x_tr, train.labels, batch_size, seed, epoch)
        rec = EpochRecord(epoch + 1, lr, loss, net.accuracy(x_tr, train.labels),
                          1.0 - net.accuracy(x_val, val.labels), pool_param_summary(net))
        history.append(rec)
        log.info("epoch %d lr=%g loss=%.4f train_acc=%.4f val_err=%.4f %s", rec.epoch, lr,
                 loss, rec.train_acc, rec.val_err, rec.pool_params)
        if callback is not None:
            callback(rec)
        opt.schedule.observe(rec.val_err)
        if opt.schedule.done:
            break
        if target_train_acc is not None and rec.train_acc >= target_train_acc:
            break
    return history
