"""Mini-batch SGD with momentum on patch samples."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..augment import PatchSample
from .layers import NumericalError, softmax_cross_entropy
from .network import Network, pad_to_stride


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 10
    batch_size: int = 8
    seed: int = 0
    precision: int = 32
    class_weights: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("need epochs >= 0 and batch_size >= 1")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")
        object.__setattr__(self, "class_weights", tuple(float(w) for w in self.class_weights))

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    batches: int


def sgd_step(network: Network, gradients: dict[str, np.ndarray], config: TrainConfig) -> None:
    """``v <- momentum * v - lr * (g + weight_decay * w); w <- w + v``.

    Applies to every parameter, the bilinear upsampling kernels included.
    """
    lr = config.learning_rate
    for name, weight in network.named_parameters():
        grad = gradients[name]
        if grad.shape != weight.shape:
            raise ValueError(f"gradient for {name} has shape {grad.shape}, expected {weight.shape}")
        v = network.velocity.get(name)
        if v is None:
            v = np.zeros_like(weight)
        v = config.momentum * v - lr * (grad + config.weight_decay * weight)
        network.velocity[name] = v.astype(weight.dtype, copy=False)
        weight += network.velocity[name]


def stack_samples(samples: Sequence[PatchSample], dtype=np.float32):
    """``(images (N, C, h, w), targets (N, h, w) uint8)`` from patch samples."""
    images = np.stack([s.image_patch.data.transpose(2, 0, 1) for s in samples]).astype(dtype)
    targets = np.stack([s.mask_patch.data for s in samples]).astype(np.uint8)
    return images, targets


def assemble_batch(images: np.ndarray, targets: np.ndarray):
    """Pad a batch to multiples of 32 by edge replication.

    Returns ``(images, targets, pixel_mask)``; the mask marks the original,
    unpadded pixels, or is ``None`` when no padding was needed.
    """
    h, w = images.shape[-2:]
    if h % 32 == 0 and w % 32 == 0:
        return images, targets, None
    padded_images = pad_to_stride(images)
    padded_targets = pad_to_stride(targets)
    valid = np.zeros(padded_targets.shape, dtype=bool)
    valid[:, :h, :w] = True
    return padded_images, padded_targets, valid


def train_step(network: Network, images: np.ndarray, targets: np.ndarray, config: TrainConfig) -> float:
    images, targets, valid = assemble_batch(images.astype(network.dtype, copy=False), targets)
    logits = network.forward(images)
    loss, grad = softmax_cross_entropy(logits, targets, valid, config.class_weights)
    if not math.isfinite(loss):
        raise NumericalError("non-finite loss")
    grads = network.backward(grad)
    sgd_step(network, grads, config)
    return loss


def train(
    network: Network,
    images: np.ndarray,
    targets: np.ndarray,
    config: TrainConfig,
    on_epoch: Callable[[EpochRecord, Network], None] | None = None,
) -> list[EpochRecord]:
    """Run ``config.epochs`` shuffled passes over the patch arrays.

    ``on_epoch`` is called after every epoch. A non-finite loss raises
    :class:`NumericalError` with the epoch and batch index in the message.
    """
    if len(images) == 0 or len(images) != len(targets):
        raise ValueError("need equally many (and at least one) images and targets")
    rng = np.random.default_rng(config.seed)
    history = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(images))
        total, n_batches = 0.0, 0
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start:start + config.batch_size]
            try:
                # overflow is caught by the explicit finiteness checks
                with np.errstate(over="ignore", invalid="ignore"):
                    loss = train_step(network, images[idx], targets[idx], config)
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch} batch {b}: {exc}") from None
            total += loss * len(idx)
            n_batches += 1
        record = EpochRecord(epoch, total / len(order), n_batches)
        history.append(record)
        if on_epoch is not None:
            on_epoch(record, network)
    return history
