"""Shared pieces for the trainable models: init, input scaling, the GD loop."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from slideagg import diffcore as dc
from slideagg.errors import TrainingError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 0.1
    batch_size: int = 8
    seed: int = 0
    hidden: int = 32
    memory_units: int = 4

    def __post_init__(self):
        for name, value in asdict(self).items():
            if name != "seed" and not value > 0:
                raise ValueError(f"TrainConfig.{name} must be positive, got {value}")

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})


def canonical_order(x: np.ndarray) -> np.ndarray:
    """Row order that depends only on the set of rows (lexicographic by column)."""
    return np.lexsort(x.T[::-1])


def canonical_rows(x: np.ndarray) -> np.ndarray:
    return x[canonical_order(x)]


def init_params(shapes: Sequence[tuple[str, tuple[int, ...]]], rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Glorot-uniform matrices, zero vectors; drawn in the order given."""
    params = {}
    for name, shape in shapes:
        if len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-limit, limit, size=shape)
    return params


@dataclass
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, rows: np.ndarray) -> "Standardizer":
        rows = np.asarray(rows, dtype=np.float64)
        return cls(rows.mean(axis=0), np.maximum(rows.std(axis=0), 1e-6))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.scale


def gradient_descent(
    params: dict[str, np.ndarray],
    batch_loss: Callable[[dict[str, dc.Tensor], Sequence[int]], tuple[dc.Tensor, dict[str, dc.Tensor]]],
    n_items: int,
    config: TrainConfig,
    rng: np.random.Generator,
    *,
    batch_size: int | None = None,
    name: str = "model",
) -> list[float]:
    """Plain mini-batch gradient descent, updating ``params`` in place.

    ``batch_loss(tensors, indices)`` returns the total loss and its named
    terms. Returns the mean batch loss of each epoch.
    """
    batch_size = batch_size or config.batch_size
    history = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n_items)
        losses = []
        for start in range(0, n_items, batch_size):
            idx = order[start:start + batch_size]
            leaves = {k: dc.param(v) for k, v in params.items()}
            loss, terms = batch_loss(leaves, idx)
            value = loss.item()
            if not np.isfinite(value):
                bad = [k for k, t in terms.items() if not np.all(np.isfinite(t.value))] or ["total"]
                raise TrainingError(f"{name}: loss became non-finite at epoch {epoch} (term: {', '.join(bad)})")
            names = list(leaves)
            grads = dc.grad(loss, [leaves[k] for k in names], allow_unused=True)
            for k, g in zip(names, grads):
                if not np.all(np.isfinite(g.value)):
                    raise TrainingError(f"{name}: gradient of {k} became non-finite at epoch {epoch}")
                params[k] = params[k] - config.lr * g.value
            losses.append(value)
        history.append(float(np.mean(losses)))
        log.debug("%s epoch %d loss %.5f", name, epoch, history[-1])
    return history
