"""Training recipe: masked multi-label BCE, Adam, and the epoch loop.

Defaults mirror the training setup this package reproduces: Adam with
beta1=0.9, beta2=0.999, learning rate 1e-4, L2 regularization 1e-3
(applied as a gradient term, the classic coupling), batch size 128.
Desk-scale runs shrink the batch via configuration, not by changing
these defaults.

The optimizer is a single writer over its parameter map; nothing here is
safe to call concurrently on the same model.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from geoinfra.autodiff import Tape, Tensor, backward, emit, _sigmoid_stable
from geoinfra.rng import RngState


@dataclass
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 1e-3
    lr_decay_per_epoch: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError(f"betas must lie in [0, 1): {self.beta1}, {self.beta2}")
        # lr == 0 is allowed so a frozen pass can be expressed as a no-op epoch
        if self.lr < 0:
            raise ValueError(f"learning rate must be non-negative: {self.lr}")
        if self.weight_decay < 0:
            raise ValueError(f"weight decay must be non-negative: {self.weight_decay}")


@dataclass
class AdamState:
    """Per-parameter moment buffers; t counts completed steps."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    epoch: int = 0


@dataclass(frozen=True)
class LossBatch:
    """Logits (N,k) against {0,1} labels, with an optional mask.

    Masked entries (mask==0, marking missing survey outcomes) are removed
    from both the loss sum and the averaging denominator.
    """

    logits: Tensor
    labels: np.ndarray
    mask: Optional[np.ndarray] = None


def multilabel_bce(batch: LossBatch) -> Tensor:
    """Mean binary cross-entropy over unmasked (example, outcome) entries.

    Uses the logit form max(z,0) - z*y + log(1 + exp(-|z|)) so log(0) is
    never materialized; gradient w.r.t. logits is (sigmoid(z) - y) / M.
    """
    z = batch.logits
    y = np.asarray(batch.labels, dtype=z.dtype)
    if y.shape != z.shape:
        raise ValueError(f"labels shape {y.shape} != logits shape {z.shape}")
    if batch.mask is None:
        mask = np.ones_like(y)
    else:
        mask = np.asarray(batch.mask, dtype=z.dtype)
        if mask.shape != z.shape:
            raise ValueError(f"mask shape {mask.shape} != logits shape {z.shape}")
    m_count = float(mask.sum())
    if m_count == 0:
        raise ValueError("all loss entries are masked")

    zd = z.data
    per_entry = np.maximum(zd, 0) - zd * y + np.log1p(np.exp(-np.abs(zd)))
    loss_val = np.asarray((per_entry * mask).sum() / m_count, dtype=z.dtype)

    def bwd(g):
        p = _sigmoid_stable(zd)
        return (g * (p - y) * mask / m_count,)

    return emit("multilabel_bce", (z,), loss_val, bwd)


def adam_step(params: dict, state: AdamState, config: AdamConfig,
              lr_override: Optional[float] = None) -> None:
    """One bias-corrected Adam update over a {path: Tensor} parameter map.

    Weight decay enters as an additive L2 gradient term (decay * theta)
    before the moment updates. Parameters whose .grad is None contribute a
    zero gradient, so decay still applies to them.
    """
    state.t += 1
    t = state.t
    lr = config.lr if lr_override is None else lr_override
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for path, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for parameter '{path}'")
        if config.weight_decay:
            g = g + config.weight_decay * p.data
        m = state.m.get(path)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[path] = m
            state.v[path] = np.zeros_like(p.data)
        v = state.v[path]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + config.epsilon)


@dataclass(frozen=True)
class EpochStats:
    mean_loss: float
    examples_seen: int


def iterate_batches(n: int, batch_size: int, rng: RngState) -> Iterable[np.ndarray]:
    """Shuffled index batches covering all n examples once."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_epoch(model, x: np.ndarray, labels: np.ndarray, mask: np.ndarray,
                state: AdamState, config: AdamConfig, rng: RngState,
                batch_size: int = 128, augment_hflip: bool = True) -> EpochStats:
    """One pass over a prepared training array, updating the model in place.

    x is (n, C, S, S) already normalized; labels/mask are (n, k). Horizontal
    flips are drawn per example from rng. Applies lr_decay_per_epoch at the
    end: the effective rate for epoch e is lr * decay**e.
    """
    n = x.shape[0]
    if n == 0:
        raise ValueError("training set is empty")
    lr = config.lr * (config.lr_decay_per_epoch ** state.epoch)
    params = model.trainable_parameters()
    total = 0.0
    seen = 0
    for idx in iterate_batches(n, batch_size, rng):
        xb = x[idx]
        if augment_hflip:
            flips = rng.bernoulli(0.5, size=len(idx))
            if np.any(flips):
                xb = xb.copy()
                xb[flips] = xb[flips, :, :, ::-1]
        for p in params.values():
            p.grad = None
        with Tape() as tape:
            logits = model.forward(Tensor(xb), training=True)
            loss = multilabel_bce(LossBatch(logits, labels[idx], mask[idx]))
        if not np.isfinite(loss.item()):
            raise ValueError(f"non-finite loss on batch of examples {idx[:4].tolist()}...")
        backward(tape, loss)
        adam_step(params, state, config, lr_override=lr)
        total += loss.item() * len(idx)
        seen += len(idx)
    state.epoch += 1
    return EpochStats(mean_loss=total / seen, examples_seen=seen)
