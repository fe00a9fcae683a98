"""Deep Fisher vectors from a gradient-regularized VAE.

A small VAE with a latent-space classifier is trained on patches. A slide is
then encoded by the mean, over its patches, of the reconstruction-loss
gradient with respect to the decoder weights, followed by power and L2
normalization and restriction to the coordinates whose training-set
gradients vary most. The binary flavor keeps only the sign bits.

The regularizer acts on per-patch decoder gradients. For a dense layer with
input row ``a`` and output adjoint ``delta`` the per-patch weight gradient is
the outer product ``a ⊗ delta``, so its L1 norm is ``|a|_1 * |delta|_1`` and
its squared L2 norm is ``|a|_2^2 * |delta|_2^2``. ``delta`` comes from a first
differentiation pass with ``create_graph=True``; the training gradient of the
regularizer is a second pass through it.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from slideagg import diffcore as dc
from slideagg._nn import Standardizer, TrainConfig, canonical_rows, gradient_descent, init_params
from slideagg.dataset import FoldPlan, PatchSet, make_folds
from slideagg.embedding import SlideEmbedding
from slideagg.errors import ConfigError, FormatError, ShapeError, SlideAggError, TrainingError
from slideagg.gmm_fisher import l2_normalize, power_normalize
from slideagg.io import load_model_file, save_model_file

log = logging.getLogger(__name__)

FLAVORS = ("sparse", "binary")
TARGET_PARAMS = ("dec1_w", "dec2_w")
ALPHA_GRID = (0.0, 0.1, 0.01, 0.001, 0.0001, 0.00001)
DIM_GRID = (300, 3000, 30000)

# batch_size counts patches per step for the VAE
DEFAULT_VAE_TRAIN = TrainConfig(epochs=20, lr=0.05, batch_size=64, hidden=64)


@dataclass(frozen=True)
class FisherConfig:
    flavor: str = "sparse"
    alpha: float = 0.0
    w_rec: float = 1.0
    w_kl: float = 0.1
    w_cls: float = 1.0
    n_dims: int = 300
    latent: int = 16

    def __post_init__(self):
        if self.flavor not in FLAVORS:
            raise ConfigError(f"unknown Fisher flavor {self.flavor!r}; expected one of {FLAVORS}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.n_dims < 1 or self.latent < 1:
            raise ConfigError("n_dims and latent must be >= 1")

    def replace(self, **changes) -> "FisherConfig":
        return FisherConfig(**{**asdict(self), **changes})


@dataclass
class VaeModel:
    params: dict[str, np.ndarray]
    n_classes: int
    scaler: Standardizer
    history: list[float] = field(default_factory=list)

    @property
    def latent(self) -> int:
        return self.params["dec1_w"].shape[0]

    @property
    def input_dim(self) -> int:
        return self.params["dec2_w"].shape[1]

    @property
    def n_target(self) -> int:
        return sum(self.params[k].size for k in TARGET_PARAMS)

    def save(self, path: str | Path) -> None:
        arrays = dict(self.params, scaler_mean=self.scaler.mean, scaler_scale=self.scaler.scale)
        save_model_file(path, "vae", arrays, {"n_classes": self.n_classes, "history": self.history})

    @classmethod
    def load(cls, path: str | Path) -> "VaeModel":
        kind, arrays, meta = load_model_file(path)
        if kind != "vae":
            raise FormatError(f"SAGM kind {kind!r} is not 'vae'")
        scaler = Standardizer(arrays.pop("scaler_mean"), arrays.pop("scaler_scale"))
        return cls(arrays, meta["n_classes"], scaler, meta.get("history", []))


def init_vae(input_dim: int, n_classes: int, latent: int, hidden: int, seed: int,
             scaler: Standardizer | None = None) -> VaeModel:
    shapes = []
    for name, fan_in, fan_out in [("enc1", input_dim, hidden), ("enc2", hidden, 2 * latent),
                                  ("dec1", latent, hidden), ("dec2", hidden, input_dim),
                                  ("cls", latent, n_classes)]:
        shapes += [(f"{name}_w", (fan_in, fan_out)), (f"{name}_b", (fan_out,))]
    params = init_params(shapes, np.random.default_rng(seed))
    scaler = scaler or Standardizer(np.zeros(input_dim), np.ones(input_dim))
    return VaeModel(params, n_classes, scaler)


# -- graph pieces ----------------------------------------------------------------


def _encode(p, x):
    h = dc.tanh(dc.add_bias(x @ p["enc1_w"], p["enc1_b"]))
    stats = dc.add_bias(h @ p["enc2_w"], p["enc2_b"])
    z = p["dec1_w"].shape[0]
    return dc.slice_cols(stats, 0, z), dc.slice_cols(stats, z, 2 * z)


def _decode(p, z):
    pre1 = dc.add_bias(z @ p["dec1_w"], p["dec1_b"])
    act1 = dc.tanh(pre1)
    pre2 = dc.add_bias(act1 @ p["dec2_w"], p["dec2_b"])
    return pre1, act1, pre2


def _per_patch_rec(x, recon):
    """Sum over patches of each patch's mean squared reconstruction error."""
    return dc.sum(dc.square(recon - x)) * (1.0 / x.shape[1])


def _row_l1(t):
    return dc.sum(dc.abs(t), axis=1)


def _row_sq(t):
    return dc.sum(dc.square(t), axis=1)


def gradient_penalty(p, x, z, flavor: str) -> dc.Tensor:
    """Mean over patches of the flavor's penalty on per-patch decoder gradients.

    sparse: ``|g|_1 / n``; binary: ``mean_j (|g_j| - 1)^2``, where ``g`` is the
    per-patch gradient of the reconstruction loss over the decoder weights.
    Differentiable in every parameter (double backpropagation).
    """
    if not z.requires_grad:
        # constant latent (encoder frozen): record the decoder anyway so its adjoints exist
        z = dc.Tensor(z.value, requires_grad=True)
    pre1, act1, pre2 = _decode(p, z)
    delta1, delta2 = dc.grad(_per_patch_rec(x, pre2), [pre1, pre2], create_graph=True)
    layers = [(z, delta1), (act1, delta2)]
    n_params = sum(a.shape[1] * d.shape[1] for a, d in layers)
    total = None
    for a, d in layers:
        l1 = _row_l1(a) * _row_l1(d)
        if flavor == "sparse":
            term = l1
        else:
            term = _row_sq(a) * _row_sq(d) - 2.0 * l1 + float(a.shape[1] * d.shape[1])
        total = term if total is None else total + term
    return dc.mean(total) * (1.0 / n_params)


def vae_loss_terms(p, x, labels, noise, config: FisherConfig) -> dict[str, dc.Tensor]:
    mu, logvar = _encode(p, x)
    z = mu + dc.exp(logvar * 0.5) * dc.const(noise)
    _, _, recon = _decode(p, z)
    n = x.shape[0]
    terms = {
        "reconstruction": _per_patch_rec(x, recon) * (1.0 / n),
        "kl": dc.sum(dc.square(mu) + dc.exp(logvar) - logvar - 1.0) * (0.5 / n),
        "classification": dc.softmax_cross_entropy(dc.add_bias(mu @ p["cls_w"], p["cls_b"]), labels),
    }
    if config.alpha > 0:
        terms["gradient_regularization"] = gradient_penalty(p, x, z, config.flavor)
    return terms


def total_loss(terms: dict[str, dc.Tensor], config: FisherConfig) -> dc.Tensor:
    loss = (terms["reconstruction"] * config.w_rec + terms["kl"] * config.w_kl
            + terms["classification"] * config.w_cls)
    if "gradient_regularization" in terms:
        loss = loss + terms["gradient_regularization"] * config.alpha
    return loss


def vae_train(slides: Sequence[PatchSet], config: FisherConfig, train: TrainConfig = DEFAULT_VAE_TRAIN,
              n_classes: int | None = None) -> VaeModel:
    """Train the VAE on all patches; each patch carries its slide's label."""
    labels = {s.label for s in slides}
    if len(labels) < 2:
        raise TrainingError(f"vae: training needs at least 2 classes, got {sorted(labels)}")
    n_classes = n_classes or max(labels) + 1
    rows = np.vstack([s.patches for s in slides]).astype(np.float64)
    y = np.concatenate([np.full(s.n_patches, s.label) for s in slides])
    scaler = Standardizer.fit(rows)
    x_all = scaler(rows)
    model = init_vae(rows.shape[1], n_classes, config.latent, train.hidden, train.seed, scaler)
    if config.n_dims > model.n_target:
        raise ConfigError(f"n_dims={config.n_dims} exceeds the {model.n_target} decoder weights")
    order_rng = np.random.default_rng([train.seed, 1])
    noise_rng = np.random.default_rng([train.seed, 2])

    def batch_loss(p, idx):
        noise = noise_rng.standard_normal((len(idx), config.latent))
        terms = vae_loss_terms(p, dc.const(x_all[idx]), y[idx], noise, config)
        return total_loss(terms, config), terms

    model.history = gradient_descent(model.params, batch_loss, len(x_all), train, order_rng,
                                     name=f"vae[{config.flavor}, alpha={config.alpha}]")
    return model


# -- encoding ------------------------------------------------------------------------


def _prepare(model: VaeModel, patches) -> np.ndarray:
    x = patches.patches if isinstance(patches, PatchSet) else patches
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != model.input_dim:
        raise ShapeError(f"vae: expected {model.input_dim} columns, got shape {x.shape}")
    return model.scaler(x)


def _decoder_adjoints(model: VaeModel, x: np.ndarray):
    """Latent means, hidden activations and per-row output adjoints of both decoder layers."""
    p = {k: dc.const(v) for k, v in model.params.items()}
    xt = dc.const(x)
    with dc.no_grad():
        mu, _ = _encode(p, xt)
    z = dc.Tensor(mu.value, requires_grad=True)
    pre1, act1, pre2 = _decode(p, z)
    # z is the only leaf so the graph reaches the decoder pre-activations
    delta1, delta2 = dc.grad(_per_patch_rec(xt, pre2), [pre1, pre2])
    return mu.value, act1.value, delta1.value, delta2.value


def patch_grads(model: VaeModel, patches) -> np.ndarray:
    """Per-patch reconstruction gradients over the decoder weights, shape (N, n_target).

    The latent is taken at its mean. Coordinates follow ``TARGET_PARAMS``,
    each matrix flattened row-major.
    """
    mu, act, d1, d2 = _decoder_adjoints(model, _prepare(model, patches))
    g1 = np.einsum("ni,nj->nij", mu, d1).reshape(len(mu), -1)
    g2 = np.einsum("ni,nj->nij", act, d2).reshape(len(mu), -1)
    return np.hstack([g1, g2])


def patch_grad(model: VaeModel, x) -> np.ndarray:
    return patch_grads(model, np.atleast_2d(x))[0]


def slide_gradient(model: VaeModel, patches) -> np.ndarray:
    """Mean of the per-patch gradients, computed without materializing them."""
    x = _prepare(model, patches)
    mu, act, d1, d2 = _decoder_adjoints(model, canonical_rows(x))
    n = len(mu)
    return np.concatenate([(mu.T @ d1).ravel() / n, (act.T @ d2).ravel() / n])


def normalized_slide_gradient(model: VaeModel, patches) -> np.ndarray:
    return l2_normalize(power_normalize(slide_gradient(model, patches)))


def gradient_stats(model: VaeModel, slides: Sequence[PatchSet]) -> dict[str, float]:
    """Mean per-coordinate |g| and mean (|g| - 1)^2 over all training patches."""
    l1, quant, count = 0.0, 0.0, 0
    for s in slides:
        mu, act, d1, d2 = _decoder_adjoints(model, _prepare(model, s))
        n_params = mu.shape[1] * d1.shape[1] + act.shape[1] * d2.shape[1]
        for a, d in ((mu, d1), (act, d2)):
            row_l1 = np.abs(a).sum(1) * np.abs(d).sum(1)
            l1 += np.sum(row_l1) / n_params
            quant += np.sum((a * a).sum(1) * (d * d).sum(1) - 2 * row_l1 + a.shape[1] * d.shape[1]) / n_params
        count += len(mu)
    return {"grad_l1": l1 / count, "quantization_error": quant / count}


@dataclass(frozen=True)
class DimSelector:
    indices: np.ndarray
    n_params: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim != 1 or np.any(np.diff(idx) <= 0) or (idx.size and (idx[0] < 0 or idx[-1] >= self.n_params)):
            raise ValueError("selector indices must be unique, sorted and within range")
        object.__setattr__(self, "indices", idx)

    @property
    def n_dims(self) -> int:
        return self.indices.size

    def save(self, path: str | Path) -> None:
        save_model_file(path, "dimsel", {"indices": self.indices.astype(np.float64)}, {"n_params": self.n_params})

    @classmethod
    def load(cls, path: str | Path) -> "DimSelector":
        kind, arrays, meta = load_model_file(path)
        if kind != "dimsel":
            raise FormatError(f"SAGM kind {kind!r} is not 'dimsel'")
        return cls(arrays["indices"].astype(np.int64), meta["n_params"])


def select_top_m(train_grads: np.ndarray, n_dims: int) -> DimSelector:
    """Keep the ``n_dims`` coordinates with the largest population variance; ties go to lower index."""
    g = np.asarray(train_grads, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] < 2:
        raise SlideAggError(f"select_top_m: need a (slides >= 2, params) matrix, got shape {g.shape}")
    if not 1 <= n_dims <= g.shape[1]:
        raise ValueError(f"select_top_m: M={n_dims} out of range [1, {g.shape[1]}]")
    var = g.var(axis=0)
    order = np.lexsort((np.arange(g.shape[1]), -var))
    return DimSelector(np.sort(order[:n_dims]), g.shape[1])


def encode_slide_fv(model: VaeModel, selector: DimSelector, patches, flavor: str) -> SlideEmbedding:
    if selector.n_params != model.n_target:
        raise ShapeError(f"selector covers {selector.n_params} parameters, model has {model.n_target}")
    v = normalized_slide_gradient(model, patches)[selector.indices]
    if flavor == "sparse":
        return SlideEmbedding.sparse_or_dense(v)
    if flavor == "binary":
        return SlideEmbedding.binary_of(v)
    raise ConfigError(f"unknown Fisher flavor {flavor!r}")


# -- retrieval wiring -------------------------------------------------------------------


@dataclass
class DeepFisherEncoder:
    model: VaeModel
    selector: DimSelector
    flavor: str

    def __call__(self, slides: Sequence[PatchSet]) -> list[SlideEmbedding]:
        return [encode_slide_fv(self.model, self.selector, s, self.flavor) for s in slides]


@dataclass
class DeepFisherMethod:
    config: FisherConfig
    train: TrainConfig = DEFAULT_VAE_TRAIN

    @property
    def name(self) -> str:
        return f"deep_fv_{self.config.flavor}"

    @property
    def metric(self) -> str:
        return "hamming" if self.config.flavor == "binary" else "euclidean"

    def fit(self, slides: Sequence[PatchSet], n_classes: int, seed: int) -> DeepFisherEncoder:
        model = vae_train(slides, self.config, self.train.replace(seed=seed), n_classes)
        train_fv = np.vstack([normalized_slide_gradient(model, s) for s in slides])
        selector = select_top_m(train_fv, self.config.n_dims)
        return DeepFisherEncoder(model, selector, self.config.flavor)


def alpha_sweep(slides: Sequence[PatchSet], n_classes: int, flavor: str, alphas: Sequence[float],
                train: TrainConfig = DEFAULT_VAE_TRAIN, config: FisherConfig | None = None,
                plan: FoldPlan | None = None, k: int = 1, seed: int = 0) -> list[dict]:
    """One full cross-validated run per alpha, sharing folds and seeds.

    A failing alpha yields a row with an ``error`` entry and NaN metrics; the
    sweep carries on.
    """
    from slideagg.retrieval import NeighborQuery, cross_validate

    config = (config or FisherConfig()).replace(flavor=flavor)
    plan = plan or make_folds(slides, seed)
    rows = []
    for alpha in alphas:
        method = DeepFisherMethod(config.replace(alpha=float(alpha)), train)
        try:
            report = cross_validate(slides, n_classes, method, plan, NeighborQuery(k, method.metric), seed=seed)
        except SlideAggError as exc:
            log.warning("alpha=%g failed: %s", alpha, exc)
            rows.append({"alpha": float(alpha), "accuracy": float("nan"), "macro_f1": float("nan"),
                         "weighted_f1": float("nan"), "error": str(exc)})
            continue
        rows.append({"alpha": float(alpha), **report.mean, "std": report.std, "report": report})
    return rows


def format_alpha_table(rows: Sequence[dict], flavor: str) -> str:
    lines = [f"{'alpha':<10}{'Accuracy':>10}{'Macro F1':>10}{'Weighted F1':>13}   ({flavor})"]
    for r in rows:
        lines.append(f"{r['alpha']:<10g}{r['accuracy']:>10.3f}{r['macro_f1']:>10.3f}{r['weighted_f1']:>13.3f}"
                     + (f"   error: {r['error']}" if "error" in r else ""))
    return "\n".join(lines)

