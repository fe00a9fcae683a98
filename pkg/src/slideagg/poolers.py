"""Set aggregators: static mean/max pooling and three trained neural poolers.

The neural models (Deep Sets, a memory-network block, focal attention) are
trained with slide-level softmax cross-entropy; the retrieval embedding is
the penultimate activation. Patch rows are put in a canonical order before
every forward pass, so outputs do not depend on the order patches arrive in.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from slideagg import diffcore as dc
from slideagg._nn import Standardizer, TrainConfig, canonical_rows, gradient_descent, init_params
from slideagg.dataset import PatchSet
from slideagg.embedding import SlideEmbedding
from slideagg.errors import FormatError, ShapeError, TrainingError
from slideagg.io import load_model_file, save_model_file

POOL_KINDS = ("mean", "max", "sum", "prod")
MODEL_POOLS = {
    "deepsets": POOL_KINDS,
    "memnet": POOL_KINDS,
    "focatt": ("max", "mean", "sum"),
}


def _rows(patches) -> np.ndarray:
    x = patches.patches if isinstance(patches, PatchSet) else patches
    return np.asarray(x, dtype=np.float64)


def pool_mean(patches) -> SlideEmbedding:
    return SlideEmbedding.dense_of(canonical_rows(_rows(patches)).mean(axis=0))


def pool_max(patches) -> SlideEmbedding:
    return SlideEmbedding.dense_of(canonical_rows(_rows(patches)).max(axis=0))


def pool(x: dc.Tensor, kind: str, axis: int = 0) -> dc.Tensor:
    """Reduce a set of rows. ``prod`` is the geometric mean of softplus activations."""
    if kind == "mean":
        return dc.mean(x, axis=axis)
    if kind == "sum":
        return dc.sum(x, axis=axis)
    if kind == "max":
        return dc.max(x, axis=axis)
    if kind == "prod":
        return dc.exp(dc.mean(dc.log(dc.softplus(x)), axis=axis))
    raise ValueError(f"unknown pool kind {kind!r}; expected one of {POOL_KINDS}")


def _dense(x: dc.Tensor, p: dict[str, dc.Tensor], name: str) -> dc.Tensor:
    return dc.add_bias(x @ p[f"{name}_w"], p[f"{name}_b"])


def _row(v: dc.Tensor) -> dc.Tensor:
    return dc.reshape(v, (1, v.shape[0]))


# -- graphs ------------------------------------------------------------------


def _deepsets_graph(p, x, pool_kind):
    phi = dc.tanh(_dense(dc.tanh(_dense(x, p, "phi1")), p, "phi2"))
    emb = dc.tanh(_dense(_row(pool(phi, pool_kind)), p, "rho1"))
    return _dense(emb, p, "rho2"), emb, {}


def _memnet_graph(p, x, pool_kind):
    enc = dc.tanh(_dense(x, p, "enc"))
    memory = p["memory"]
    m, h = memory.shape
    scores = (enc @ dc.transpose(memory)) * (1.0 / np.sqrt(h))
    attention = dc.softmax(scores, axis=0)
    units = dc.transpose(attention) @ enc
    combined = units + dc.broadcast_to(pool(units, pool_kind), (m, h), axis=0)
    emb = dc.reshape(combined, (1, m * h))
    return _dense(emb, p, "head"), emb, {"attention": attention}


def _focatt_graph(p, x, pool_kind):
    h = p["pred_b"].shape[0]
    pred = dc.tanh(_dense(x, p, "pred"))
    context = dc.tanh(_dense(_row(dc.mean(dc.tanh(_dense(x, p, "ctx1")), axis=0)), p, "ctx2"))
    context_bias = dc.reshape(context @ p["attc_w"], (h,)) + p["attu_b"]
    gate_a = dc.tanh(dc.add_bias(x @ p["attu_w"], context_bias))
    gate_b = dc.sigmoid(_dense(x, p, "attv"))
    attention = dc.sigmoid(_dense(gate_a * gate_b, p, "att"))
    weighted = pred * (attention @ dc.const(np.ones((1, h))))
    focal = 1.0 + dc.tanh(_dense(context, p, "focal"))
    emb = focal * _row(pool(weighted, pool_kind))
    return _dense(emb, p, "out"), emb, {"attention": attention, "focal": focal}


_GRAPHS = {"deepsets": _deepsets_graph, "memnet": _memnet_graph, "focatt": _focatt_graph}


def _param_shapes(kind: str, d: int, c: int, cfg: TrainConfig) -> list[tuple[str, tuple[int, ...]]]:
    h, m = cfg.hidden, cfg.memory_units
    if kind == "deepsets":
        layers = [("phi1", d, h), ("phi2", h, h), ("rho1", h, h), ("rho2", h, c)]
        extra = []
    elif kind == "memnet":
        layers = [("enc", d, h), ("head", m * h, c)]
        extra = [("memory", (m, h))]
    elif kind == "focatt":
        layers = [("pred", d, h), ("ctx1", d, h), ("ctx2", h, h), ("attv", d, h),
                  ("att", h, 1), ("focal", h, h), ("out", h, c)]
        extra = [("attu_w", (d, h)), ("attu_b", (h,)), ("attc_w", (h, h))]
    else:
        raise ValueError(f"unknown aggregator kind {kind!r}; expected one of {sorted(_GRAPHS)}")
    shapes = []
    for name, fan_in, fan_out in layers:
        shapes += [(f"{name}_w", (fan_in, fan_out)), (f"{name}_b", (fan_out,))]
    return shapes + extra


# -- model ---------------------------------------------------------------------


@dataclass
class AggregatorModel:
    """Trained parameters of a neural aggregator. Treat as immutable after training."""

    kind: str
    pool: str
    params: dict[str, np.ndarray]
    n_classes: int
    scaler: Standardizer
    history: list[float] = field(default_factory=list)

    @property
    def input_dim(self) -> int:
        return self.scaler.mean.shape[0]

    @property
    def embedding_dim(self) -> int:
        if self.kind == "memnet":
            return self.params["memory"].size
        return self.params[{"deepsets": "rho1_b", "focatt": "pred_b"}[self.kind]].shape[0]

    def _prepare(self, patches) -> dc.Tensor:
        x = _rows(patches)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"{self.kind}: expected patches with {self.input_dim} columns, got shape {x.shape}")
        return dc.const(self.scaler(canonical_rows(x)))

    def run(self, patches) -> tuple[np.ndarray, np.ndarray, dict[str, np.ndarray]]:
        """``(logits, embedding, aux)`` for one slide, in canonical row order."""
        with dc.no_grad():
            p = {k: dc.const(v) for k, v in self.params.items()}
            logits, emb, aux = _GRAPHS[self.kind](p, self._prepare(patches), self.pool)
        return logits.value.ravel(), emb.value.ravel(), {k: v.value for k, v in aux.items()}

    def forward(self, patches) -> tuple[np.ndarray, np.ndarray]:
        logits, emb, _ = self.run(patches)
        return logits, emb

    def loss(self, params: dict[str, dc.Tensor], slides: Sequence[PatchSet]) -> dc.Tensor:
        """Mean cross-entropy over ``slides`` as a differentiable graph."""
        total = None
        for s in slides:
            logits, _, _ = _GRAPHS[self.kind](params, self._prepare(s), self.pool)
            term = dc.softmax_cross_entropy(logits, [s.label])
            total = term if total is None else total + term
        return total * (1.0 / len(slides))

    def save(self, path: str | Path) -> None:
        arrays = dict(self.params)
        arrays["scaler_mean"] = self.scaler.mean
        arrays["scaler_scale"] = self.scaler.scale
        meta = {"pool": self.pool, "n_classes": self.n_classes, "history": self.history}
        save_model_file(path, self.kind, arrays, meta)

    @classmethod
    def load(cls, path: str | Path) -> "AggregatorModel":
        kind, arrays, meta = load_model_file(path)
        if kind not in _GRAPHS:
            raise FormatError(f"SAGM kind {kind!r} is not a neural aggregator")
        scaler = Standardizer(arrays.pop("scaler_mean"), arrays.pop("scaler_scale"))
        return cls(kind, meta["pool"], arrays, meta["n_classes"], scaler, meta.get("history", []))


def init_aggregator(kind: str, pool_kind: str, input_dim: int, n_classes: int,
                    config: TrainConfig, scaler: Standardizer | None = None) -> AggregatorModel:
    if kind not in MODEL_POOLS:
        raise ValueError(f"unknown aggregator kind {kind!r}; expected one of {sorted(MODEL_POOLS)}")
    if pool_kind not in MODEL_POOLS[kind]:
        raise ValueError(f"{kind} does not support pool {pool_kind!r}; expected one of {MODEL_POOLS[kind]}")
    rng = np.random.default_rng(config.seed)
    params = init_params(_param_shapes(kind, input_dim, n_classes, config), rng)
    scaler = scaler or Standardizer(np.zeros(input_dim), np.ones(input_dim))
    return AggregatorModel(kind, pool_kind, params, n_classes, scaler)


def train_aggregator(kind: str, pool_kind: str, slides: Sequence[PatchSet], config: TrainConfig,
                     n_classes: int | None = None) -> AggregatorModel:
    """Fit a neural aggregator to slide labels by mini-batch gradient descent."""
    labels = {s.label for s in slides}
    if len(labels) < 2:
        raise TrainingError(f"{kind}: training needs at least 2 classes, got {sorted(labels)}")
    n_classes = n_classes or max(labels) + 1
    dims = {s.dim for s in slides}
    if len(dims) != 1:
        raise ShapeError(f"{kind}: slides disagree on embedding dimension: {sorted(dims)}")
    scaler = Standardizer.fit(np.vstack([s.patches for s in slides]))
    model = init_aggregator(kind, pool_kind, dims.pop(), n_classes, config, scaler)
    rng = np.random.default_rng([config.seed, 1])
    slides = list(slides)

    def batch_loss(p, idx):
        loss = model.loss(p, [slides[i] for i in idx])
        return loss, {"cross_entropy": loss}

    model.history = gradient_descent(model.params, batch_loss, len(slides), config, rng,
                                     name=f"{kind}:{pool_kind}")
    return model


def deepsets_forward(model: AggregatorModel, patches) -> tuple[np.ndarray, np.ndarray]:
    return model.forward(patches)


def memnet_forward(model: AggregatorModel, patches) -> tuple[np.ndarray, np.ndarray]:
    return model.forward(patches)


def focatt_forward(model: AggregatorModel, patches) -> tuple[np.ndarray, np.ndarray]:
    return model.forward(patches)


def embed_slides(model: AggregatorModel, slides: Sequence[PatchSet], threads: int = 1) -> list[SlideEmbedding]:
    """One dense embedding per slide, in input order."""

    def one(s):
        return SlideEmbedding.dense_of(model.forward(s)[1])

    if threads > 1 and len(slides) > 1:
        with ThreadPoolExecutor(threads) as pool_:
            return list(pool_.map(one, slides))
    return [one(s) for s in slides]
