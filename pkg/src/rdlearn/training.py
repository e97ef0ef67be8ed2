"""Mini-batch training loop shared by every transfer method."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import Network, SgdState, network_sgd_step, softmax_xent
from .rng import derive_seed, substream


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_error: float
    learning_rate: float
    extra: dict = field(default_factory=dict)


def batch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return substream(seed, "shuffle", epoch).permutation(n)


def train_epoch(net: Network, images: np.ndarray, labels: np.ndarray, sgd: SgdState, batch_size: int = 100,
                seed: int = 0, epoch: int = 0, auxiliaries=(), output_weight: float = 1.0,
                augment=None) -> EpochMetrics:
    """One pass over ``images`` in a seeded shuffled order.

    Each auxiliary exposes ``begin_epoch(epoch)``,
    ``tap_gradients(result, batch, labels, epoch, step) -> (grads, weights)``,
    ``after_backward(epoch, step)`` and ``epoch_metrics()``. Their tap
    gradients are added into the backward stream at the named taps.
    ``augment(batch, seed)`` optionally transforms each batch.
    """
    for aux in auxiliaries:
        aux.begin_epoch(epoch)
    order = batch_order(len(images), seed, epoch)
    losses, wrong, seen = [], 0, 0
    for step, start in enumerate(range(0, len(order), batch_size)):
        idx = order[start : start + batch_size]
        batch, y = images[idx], labels[idx]
        if augment is not None:
            batch = augment(batch, derive_seed(seed, "augment", epoch, step))
        result = net.forward(batch, "train", derive_seed(seed, "dropout", epoch, step))
        loss, grad = softmax_xent(result.logits, y)
        losses.append(loss)
        wrong += int(np.count_nonzero(result.logits.argmax(axis=1) != y))
        seen += len(y)
        tap_grads, tap_weights = {}, {}
        for aux in auxiliaries:
            g, w = aux.tap_gradients(result, batch, y, epoch, step)
            for tap in g:
                if tap in tap_grads:
                    # two hooks on one tap: fold the first into a unit-weight gradient
                    tap_grads[tap] = tap_weights[tap] * tap_grads[tap] + w[tap] * g[tap]
                    tap_weights[tap] = 1.0
                else:
                    tap_grads[tap], tap_weights[tap] = g[tap], w[tap]
        output_grad = None if output_weight == 0 else (grad if output_weight == 1 else output_weight * grad)
        grads = net.backward(result, output_grad, tap_grads, tap_weights)
        network_sgd_step(sgd, net, grads)
        for aux in auxiliaries:
            aux.after_backward(epoch, step)
    extra = {}
    for aux in auxiliaries:
        extra.update(aux.epoch_metrics())
    return EpochMetrics(
        epoch=epoch,
        train_loss=float(np.mean(losses)) if losses else 0.0,
        train_error=wrong / seen if seen else 0.0,
        learning_rate=sgd.learning_rate,
        extra=extra,
    )


def error_rate(net: Network, images: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return 0.0
    return float(np.mean(net.predict(images) != labels))
