"""Shared mini-batch training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from ..numerics import Adam, Tape, Tensor

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    clip_norm: float | None = 5.0
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    loss_curve: list[float] = field(default_factory=list)
    initial_loss: float | None = None
    steps: int = 0
    seconds: float = 0.0


def length_bucketed_batches(lengths: Sequence[int], batch_size: int, rng: np.random.Generator,
                            pool: int = 16) -> list[np.ndarray]:
    """Shuffle, sort within pools of ``pool`` batches by length, then shuffle batch order."""
    order = rng.permutation(len(lengths))
    lengths = np.asarray(lengths)
    batches = []
    span = batch_size * pool
    for start in range(0, len(order), span):
        chunk = order[start:start + span]
        chunk = chunk[np.argsort(lengths[chunk], kind="stable")]
        batches.extend(chunk[i:i + batch_size] for i in range(0, len(chunk), batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


def _clip(params: list[Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(scale)
    return total


def fit(params: dict[str, Tensor], n_examples: int, lengths: Sequence[int],
        loss_fn: Callable[[Tape, np.ndarray, np.random.Generator], tuple[Tensor, float]],
        config: TrainConfig, initial_loss_fn: Callable[[], float] | None = None,
        on_epoch: Callable[[int, float], None] | None = None) -> TrainResult:
    """Run Adam over shuffled mini-batches.

    ``loss_fn(tape, batch_indices, rng)`` returns ``(loss, weight)``; the
    epoch loss is the weight-averaged batch loss.
    """
    if n_examples == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(config.seed)
    opt = Adam(params, lr=config.lr)
    result = TrainResult()
    if initial_loss_fn is not None:
        result.initial_loss = float(initial_loss_fn())
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        total, weight = 0.0, 0.0
        for batch in length_bucketed_batches(lengths, config.batch_size, rng):
            tape = Tape(train=True, seed=int(rng.integers(2**63)))
            loss, w = loss_fn(tape, batch, rng)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss {value} at epoch {epoch + 1}, step {result.steps + 1}")
            opt.zero_grad()
            tape.backward(loss)
            if config.clip_norm:
                _clip(opt.params, config.clip_norm)
            opt.step()
            result.steps += 1
            total += value * w
            weight += w
        epoch_loss = total / max(weight, 1e-12)
        result.loss_curve.append(epoch_loss)
        log.info("epoch %d/%d loss %.4f (%.1fs)", epoch + 1, config.epochs, epoch_loss, time.perf_counter() - t0)
        if on_epoch is not None:
            on_epoch(epoch, epoch_loss)
    result.seconds = time.perf_counter() - t0
    return result


def chunks(seq: Sequence, size: int) -> Iterable[Sequence]:
    for i in range(0, len(seq), size):
        yield seq[i:i + size]
