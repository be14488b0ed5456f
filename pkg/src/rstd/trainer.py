"""SGD with Nesterov momentum, the step-decay schedule, and the repetition loop.

The optimizer uses the common look-ahead parameterization

    v <- momentum * v - lr * g
    theta <- theta + momentum * v - lr * g

which with momentum 0 degenerates to vanilla SGD.  A run consists of
``repetitions`` independent trainings (fresh parameters, fresh permutations,
fresh batch orders) whose final accuracies are averaged.  All randomness is
derived from the config seed, so a rerun reproduces the report exactly.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset, batches
from .nn import Network, softmax_cross_entropy, softmax_cross_entropy_backward
from .shuffle import mix_seed


@dataclass
class TrainConfig:
    base_lr: float = 0.1
    momentum: float = 0.9
    lr_milestones: tuple[int, ...] = (80, 110)
    lr_decay_factor: float = 10.0
    total_epochs: int = 120
    batch_size: int = 128
    repetitions: int = 5
    seed: int = 0
    # Desk-scale overrides consumed by the experiment runner.
    channels: int = 256
    train_per_class: int | None = None
    test_per_class: int | None = None

    def __post_init__(self):
        ms = tuple(int(m) for m in self.lr_milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {ms}")
        if ms and ms[-1] >= self.total_epochs and self.total_epochs > 0:
            raise ValueError("milestones must lie before total_epochs")
        if self.lr_decay_factor <= 1:
            raise ValueError("decay factor must be > 1")
        if self.total_epochs < 0 or self.batch_size < 1 or self.repetitions < 1:
            raise ValueError("epochs >= 0, batch_size >= 1, repetitions >= 1 required")
        object.__setattr__(self, "lr_milestones", ms)

    @classmethod
    def desk_scale(cls, **overrides) -> "TrainConfig":
        """CPU-feasible preset: 32 channels, 2000 train / 1000 test images,
        20 epochs with decays at 12 and 17."""
        base = cls(total_epochs=20, lr_milestones=(12, 17), repetitions=1,
                   channels=32, train_per_class=200, test_per_class=100)
        return replace(base, **overrides) if overrides else base


@dataclass
class TrainReport:
    """Per-epoch metrics for each repetition plus the averaged outcome."""

    train_loss: list = field(default_factory=list)      # [rep][epoch]
    test_accuracy: list = field(default_factory=list)   # [rep][epoch]
    final_accuracies: list = field(default_factory=list)
    mean_accuracy: float = 0.0
    std_accuracy: float = 0.0
    compression_ratio: float = 1.0
    wall_clock_seconds: float = 0.0
    repetition_seeds: list = field(default_factory=list)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """base_lr / decay^(number of milestones at or before this epoch)."""
    hits = sum(1 for m in cfg.lr_milestones if m <= epoch)
    return cfg.base_lr / cfg.lr_decay_factor ** hits


def sgd_nesterov_step(params: dict, grads: dict, velocities: dict,
                      lr: float, momentum: float) -> None:
    """One in-place look-ahead update of every parameter."""
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for parameter {name!r}")
        v = velocities.get(name)
        if v is None:
            v = velocities[name] = np.zeros_like(p)
        np.copyto(v, momentum * v - lr * g)
        p += momentum * v - lr * g


def evaluate(network: Network, ds: Dataset, batch_size: int = 256) -> float:
    """Fraction of argmax-correct predictions (eval mode, running stats)."""
    correct = 0
    for start in range(0, len(ds), batch_size):
        x = ds.images[start:start + batch_size]
        y = ds.labels[start:start + batch_size]
        logits = network.forward(x, train=False)
        correct += int((logits.argmax(axis=1) == y).sum())
    return correct / len(ds)


def train(network_or_factory, train_ds: Dataset, test_ds: Dataset,
          cfg: TrainConfig) -> TrainReport:
    """Full training protocol: repetitions x (epochs x (shuffle, forward,
    loss, backward, Nesterov update)), with test evaluation every epoch.

    ``network_or_factory`` is either a seed -> Network callable (fresh network
    per repetition) or a single Network (allowed only for one repetition).
    """
    if callable(network_or_factory):
        factory = network_or_factory
    else:
        if cfg.repetitions != 1:
            raise ValueError(
                "a fixed network instance cannot be reused across repetitions; "
                "pass a seed -> Network factory"
            )
        factory = lambda seed: network_or_factory

    t0 = time.monotonic()
    report = TrainReport()
    net = None
    for rep in range(cfg.repetitions):
        rep_seed = mix_seed(cfg.seed, rep)
        report.repetition_seeds.append(rep_seed)
        net = factory(rep_seed)
        velocities: dict = {}
        losses, accs = [], []
        for epoch in range(cfg.total_epochs):
            lr = lr_schedule(epoch, cfg)
            total_loss = 0.0
            for x, y in batches(train_ds, cfg.batch_size, mix_seed(rep_seed, epoch)):
                logits = net.forward(x, train=True)
                loss = softmax_cross_entropy(logits, y)
                if not math.isfinite(loss):
                    raise ValueError(f"non-finite loss at repetition {rep}, epoch {epoch}")
                net.backward(softmax_cross_entropy_backward(logits, y))
                sgd_nesterov_step(net.parameters(), net.gradients(),
                                  velocities, lr, cfg.momentum)
                total_loss += loss * len(y)
            losses.append(total_loss / len(train_ds))
            # evaluating at the training batch size reuses the warm conv buffers
            accs.append(evaluate(net, test_ds, cfg.batch_size))
        report.train_loss.append(losses)
        report.test_accuracy.append(accs)
        report.final_accuracies.append(accs[-1] if accs else evaluate(net, test_ds))

    report.mean_accuracy = float(np.mean(report.final_accuracies))
    report.std_accuracy = float(np.std(report.final_accuracies))
    report.compression_ratio = net.compression_ratio()
    report.wall_clock_seconds = time.monotonic() - t0
    return report
