"""Label-smoothed cross-entropy, Adam, reduce-on-plateau and the epoch loop."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint
from .dataset import AugmentationConfig, DatasetManifest, augment, load_image, resize, sample_generator
from .layers import Network
from .tensor import Tape, Tensor, backward, log, mul, reduce_sum, rng

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# loss


def label_smooth(one_hot, epsilon: float, classes: int | None = None) -> Tensor:
    """(1 - eps) * y + eps / K."""
    y = np.asarray(one_hot.data if isinstance(one_hot, Tensor) else one_hot, dtype=np.float64)
    k = y.shape[-1] if classes is None else classes
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"smoothing epsilon must lie in [0, 1), got {epsilon}")
    if y.shape[-1] != k:
        raise ValueError(f"one-hot vector has {y.shape[-1]} entries, expected {k}")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=-1) == 1)):
        raise ValueError("input is not a one-hot vector")
    return Tensor((1.0 - epsilon) * y + epsilon / k)


def one_hot(labels, classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def cross_entropy(probs: Tensor, target) -> Tensor:
    """-sum_k t_k log(p_k + 1e-12); averaged over rows for [N,K] input."""
    t = target if isinstance(target, Tensor) else Tensor(target)
    if t.shape != probs.shape:
        raise ValueError(f"target shape {t.shape} differs from probabilities {probs.shape}")
    total = reduce_sum(mul(t, log(probs + 1e-12)))
    n = probs.shape[0] if probs.ndim == 2 else 1
    return total * (-1.0 / n)


def entropy(target) -> float:
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    return float(-np.sum(t * np.log(t + 1e-12)))


# ---------------------------------------------------------------------------
# optimiser and scheduler


@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict, state: AdamState) -> tuple[dict[str, Tensor], AdamState]:
    """One bias-corrected Adam update; ``state`` is advanced in place."""
    for name, g in grads.items():
        g = g.data if isinstance(g, Tensor) else np.asarray(g)
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name}")
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} differs from parameter {params[name].shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    updated = dict(params)
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros(p.shape) if g is None else (g.data if isinstance(g, Tensor) else np.asarray(g))
        m = state.m.get(name, np.zeros(p.shape))
        v = state.v.get(name, np.zeros(p.shape))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        step = state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        updated[name] = Tensor(p.data - step)
    return updated, state


@dataclass
class PlateauScheduler:
    """Halve the learning rate after ``patience`` epochs without a gain above ``min_improvement``."""

    learning_rate: float = 1e-4
    factor: float = 0.5
    patience: int = 3
    min_improvement: float = 1e-4
    best: float | None = None
    stale: int = 0


def plateau_update(sched: PlateauScheduler, value: float) -> float:
    if sched.best is None or value - sched.best > sched.min_improvement:
        sched.best = value
        sched.stale = 0
    else:
        sched.stale += 1
        if sched.stale >= sched.patience:
            sched.learning_rate *= sched.factor
            sched.stale = 0
    return sched.learning_rate


# ---------------------------------------------------------------------------
# data plumbing


def load_images(manifest: DatasetManifest, records, resolution: int) -> tuple[np.ndarray, np.ndarray]:
    """Decode records into raw 0-255 arrays [N,1,R,R] plus labels."""
    images = np.empty((len(records), 1, resolution, resolution))
    for i, r in enumerate(records):
        images[i] = resize(load_image(manifest, r).data, resolution)
    labels = np.array([r.label for r in records], dtype=np.int64)
    return images, labels


def predict(network: Network, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Inference-mode probabilities for raw 0-255 images."""
    out = []
    for start in range(0, len(images), batch_size):
        batch = images[start : start + batch_size] / 255.0
        out.append(network.forward(Tensor(batch)).data)
    return np.concatenate(out) if out else np.zeros((0, network.classes))


def accuracy(network: Network, data: tuple[np.ndarray, np.ndarray]) -> float:
    images, labels = data
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(predict(network, images).argmax(axis=1) == labels))


# ---------------------------------------------------------------------------
# epoch loop


@dataclass
class TrainConfig:
    epochs: int = 25
    batch_size: int = 16
    seed: int = 0
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    val_fraction: float = 0.15
    learning_rate: float = 1e-4
    smoothing: float = 0.1
    threads: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_accuracy: float
    learning_rate: float


def _augment_batch(images, indices, config: TrainConfig, epoch: int, pool) -> np.ndarray:
    def one(i):
        return augment(images[i], config.augmentation, sample_generator(config.seed, epoch, int(i))).data

    rows = list(pool.map(one, indices)) if pool is not None else [one(i) for i in indices]
    return np.stack(rows)


def train(
    network: Network,
    train_data: tuple[np.ndarray, np.ndarray],
    val_data: tuple[np.ndarray, np.ndarray],
    config: TrainConfig,
    evaluator=None,
) -> tuple[Checkpoint, list[EpochStats]]:
    """Train for ``config.epochs`` and keep the best-validation-accuracy state.

    ``train_data``/``val_data`` are ``(raw 0-255 images [N,1,R,R], labels)``.
    ``evaluator(network, val_data)`` defaults to inference-mode accuracy.
    On return the network holds the best state.
    """
    images, labels = train_data
    if len(labels) == 0 or len(val_data[1]) == 0:
        raise ValueError("train and validation sets must be non-empty")
    evaluator = evaluator or accuracy
    k = network.classes
    targets = label_smooth(one_hot(labels, k), config.smoothing, k).data
    adam = AdamState(learning_rate=config.learning_rate)
    sched = PlateauScheduler(learning_rate=config.learning_rate)
    history: list[EpochStats] = []
    best: Checkpoint | None = None
    pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
    try:
        for epoch in range(config.epochs):
            lr = sched.learning_rate
            adam.learning_rate = lr
            order = rng([config.seed, epoch, 0x5EED]).permutation(len(labels))
            loss_sum = correct = 0.0
            for b, start in enumerate(range(0, len(order), config.batch_size)):
                idx = order[start : start + config.batch_size]
                x = Tensor(_augment_batch(images, idx, config, epoch, pool))
                params = {name: leaf.params[key] for name, leaf, key in network.parameters()}
                with Tape() as tape:
                    tape.watch(*params.values())
                    probs = network.forward(x, training=True, generator=rng([config.seed, epoch, b, 0xD0]))
                    loss = cross_entropy(probs, targets[idx])
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
                grads = backward(tape, loss)
                try:
                    new, _ = adam_step(params, {n: grads[p] for n, p in params.items()}, adam)
                except TrainingError as exc:
                    raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from None
                for name, leaf, key in network.parameters():
                    leaf.params[key] = new[name]
                loss_sum += value * len(idx)
                correct += float(np.sum(probs.data.argmax(axis=1) == labels[idx]))
            val_acc = float(evaluator(network, val_data))
            stats = EpochStats(epoch, loss_sum / len(labels), correct / len(labels), val_acc, lr)
            history.append(stats)
            logger.info("epoch %d loss %.4f val_acc %.4f lr %.3g", epoch, stats.train_loss, val_acc, lr)
            if best is None or val_acc > best.val_accuracy:
                best = Checkpoint.from_network(network, epoch, val_acc, f"philox:{config.seed}:{epoch + 1}")
            plateau_update(sched, val_acc)
    finally:
        if pool is not None:
            pool.shutdown()
    best.load_into(network)
    return best, history
