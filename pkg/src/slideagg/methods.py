"""Named aggregation methods, as used by the CLI and the evaluation harness."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from typing import Callable, Sequence

import numpy as np

from slideagg._nn import TrainConfig
from slideagg.dataset import PatchSet
from slideagg.embedding import SlideEmbedding
from slideagg.errors import ConfigError
from slideagg.gmm_fisher import em_fit, improved_fv
from slideagg.poolers import MODEL_POOLS, embed_slides, pool_max, pool_mean, train_aggregator
from slideagg.vae_fisher import DEFAULT_VAE_TRAIN, DeepFisherMethod, FisherConfig

METHOD_NAMES = (
    ["mean", "max"]
    + [f"{kind}:{p}" for kind, pools in MODEL_POOLS.items() for p in pools]
    + ["gmm_fv", "deep_fv_sparse", "deep_fv_binary", "yottixel"]
)
AGGREGATORS = [m for m in METHOD_NAMES if m != "yottixel"]

DEFAULT_POOLER_TRAIN = TrainConfig()
GMM_MAX_ROWS = 20000


@dataclass(frozen=True)
class MethodParams:
    """Hyperparameters; ``None`` means the default of the method family."""

    n_components: int = 16
    alpha: float = 0.0
    n_dims: int = 300
    hidden: int | None = None
    memory_units: int | None = None
    epochs: int | None = None
    lr: float | None = None
    batch_size: int | None = None
    latent: int = 16

    def train_config(self, base: TrainConfig) -> TrainConfig:
        changes = {f.name: getattr(self, f.name) for f in fields(self)
                   if f.name in ("hidden", "memory_units", "epochs", "lr", "batch_size")
                   and getattr(self, f.name) is not None}
        return base.replace(**changes)


@dataclass
class FittedEncoder:
    """Callable mapping patch sets to representations, keeping the fitted model if any."""

    encode: Callable[[Sequence[PatchSet]], list]
    model: object = None

    def __call__(self, items: Sequence[PatchSet]) -> list:
        return self.encode(items)


def threaded(encoder: Callable[[Sequence[PatchSet]], list], threads: int = 1) -> Callable[[Sequence[PatchSet]], list]:
    """Wrap a per-slide encoder so contiguous chunks of slides run on ``threads`` workers.

    Output order matches input order, so results do not depend on ``threads``.
    """
    if threads <= 1:
        return encoder

    def run(items):
        items = list(items)
        if len(items) < 2:
            return encoder(items)
        chunks = [c for c in np.array_split(np.arange(len(items)), min(threads, len(items))) if len(c)]
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            parts = pool.map(lambda idx: encoder([items[i] for i in idx]), chunks)
            return [e for part in parts for e in part]

    return run


@dataclass
class StaticPoolMethod:
    name: str
    metric: str = "euclidean"

    def fit(self, slides, n_classes, seed):
        fn = pool_mean if self.name == "mean" else pool_max
        return FittedEncoder(lambda items: [fn(s) for s in items])


@dataclass
class NeuralPoolMethod:
    kind: str
    pool: str
    train: TrainConfig = DEFAULT_POOLER_TRAIN
    metric: str = "euclidean"

    @property
    def name(self) -> str:
        return f"{self.kind}:{self.pool}"

    def fit(self, slides, n_classes, seed):
        model = train_aggregator(self.kind, self.pool, slides, self.train.replace(seed=seed), n_classes)
        return FittedEncoder(lambda items: embed_slides(model, items), model)


@dataclass
class GmmFisherMethod:
    n_components: int = 16
    name: str = "gmm_fv"
    metric: str = "euclidean"

    def fit(self, slides, n_classes, seed):
        rows = np.vstack([s.patches for s in slides]).astype(np.float64)
        if len(rows) > GMM_MAX_ROWS:
            rows = rows[np.sort(np.random.default_rng(seed).choice(len(rows), GMM_MAX_ROWS, replace=False))]
        model = em_fit(rows, self.n_components, seed=seed)
        return FittedEncoder(lambda items: [SlideEmbedding.dense_of(improved_fv(model, s)) for s in items], model)


@dataclass
class YottixelMethod:
    """Median-of-minimums over raw patch sets; nothing is trained or aggregated."""

    name: str = "yottixel"
    metric: str = "set_median_min"

    def fit(self, slides, n_classes, seed):
        return FittedEncoder(lambda items: list(items))


def build_method(name: str, params: MethodParams | None = None):
    params = params or MethodParams()
    if name in ("mean", "max"):
        return StaticPoolMethod(name)
    if name == "gmm_fv":
        return GmmFisherMethod(params.n_components)
    if name in ("deep_fv_sparse", "deep_fv_binary"):
        config = FisherConfig(flavor=name.rsplit("_", 1)[1], alpha=params.alpha, n_dims=params.n_dims,
                              latent=params.latent)
        return DeepFisherMethod(config, params.train_config(DEFAULT_VAE_TRAIN))
    if name == "yottixel":
        return YottixelMethod()
    kind, _, pool = name.partition(":")
    if kind in MODEL_POOLS and pool in MODEL_POOLS[kind]:
        return NeuralPoolMethod(kind, pool, params.train_config(DEFAULT_POOLER_TRAIN))
    raise ConfigError(f"unknown method {name!r}; valid methods: {', '.join(METHOD_NAMES)}")


def encode_all(name: str, slides: Sequence[PatchSet], n_classes: int, seed: int = 0,
               params: MethodParams | None = None) -> list:
    """Fit ``name`` on ``slides`` and return their representations."""
    return build_method(name, params).fit(slides, n_classes, seed)(slides)
