"""GMM Fisher vectors: diagonal-covariance EM and the improved-FV encoding.

The encoding of a set ``X`` under a fitted mixture is laid out as
``[weight block (K) | mean block (K*D) | variance block (K*D)]``, each
block being the gradient of the average log-likelihood with respect to one
parameter group, scaled by the diagonal Fisher information.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from slideagg._nn import canonical_rows
from slideagg.dataset import PatchSet
from slideagg.errors import EmptyComponentWarning, FormatError, ShapeError, SlideAggError, ZeroNormWarning
from slideagg.io import load_model_file, save_model_file

VAR_FLOOR = 1e-4
KMEANS_ITERS = 10
_LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class GmmModel:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, D)
    variances: np.ndarray  # (K, D)
    log_likelihood: list[float] = field(default_factory=list)

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def fv_dim(self) -> int:
        return self.n_components * (2 * self.dim + 1)

    def log_joint(self, x: np.ndarray) -> np.ndarray:
        """``log w_k + log N(x_i; mu_k, var_k)`` for every row and component, shape (N, K)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.dim:
            raise ShapeError(f"gmm: expected {self.dim} columns, got shape {x.shape}")
        inv = 1.0 / self.variances
        # sum_d (x-mu)^2/var expanded to avoid an (N, K, D) temporary
        quad = (x * x) @ inv.T - 2.0 * x @ (self.means * inv).T + np.sum(self.means ** 2 * inv, axis=1)
        log_det = np.sum(np.log(self.variances), axis=1)
        return np.log(self.weights) - 0.5 * (quad + log_det + self.dim * _LOG_2PI)

    def mean_log_likelihood(self, x: np.ndarray) -> float:
        return float(np.mean(logsumexp(self.log_joint(x), axis=1)))

    def save(self, path: str | Path) -> None:
        save_model_file(path, "gmm", {"weights": self.weights, "means": self.means, "variances": self.variances},
                        {"log_likelihood": self.log_likelihood})

    @classmethod
    def load(cls, path: str | Path) -> "GmmModel":
        kind, arrays, meta = load_model_file(path)
        if kind != "gmm":
            raise FormatError(f"SAGM kind {kind!r} is not 'gmm'")
        return cls(arrays["weights"], arrays["means"], arrays["variances"], meta.get("log_likelihood", []))


def responsibilities(model: GmmModel, x: np.ndarray) -> np.ndarray:
    """Posterior component probabilities; a single row gives a (K,) vector."""
    log_joint = model.log_joint(x)
    gamma = np.exp(log_joint - logsumexp(log_joint, axis=1, keepdims=True))
    return gamma[0] if np.ndim(x) == 1 else gamma


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.choice(len(x), p=d2 / total) if total > 0 else rng.integers(len(x))
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    centers = np.array(centers)
    for _ in range(KMEANS_ITERS):
        assign = np.argmin(((x[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
        for j in range(k):
            members = x[assign == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    return centers


def _initial_model(x: np.ndarray, k: int, rng: np.random.Generator) -> GmmModel:
    centers = _kmeanspp(x, k, rng)
    assign = np.argmin(((x[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    global_var = np.maximum(x.var(axis=0), VAR_FLOOR)
    variances = np.tile(global_var, (k, 1))
    counts = np.bincount(assign, minlength=k).astype(np.float64)
    for j in range(k):
        if counts[j] > 1:
            variances[j] = np.maximum(x[assign == j].var(axis=0), VAR_FLOOR)
    weights = np.maximum(counts, 1.0)
    return GmmModel(weights / weights.sum(), centers.astype(np.float64), variances)


def em_fit(x: np.ndarray, n_components: int, seed: int = 0, max_iters: int = 100, tol: float = 1e-6) -> GmmModel:
    """Fit a diagonal GMM by EM from k-means++ seeding.

    Iteration stops after ``max_iters`` or when the per-row log-likelihood
    improves by less than ``tol``. ``model.log_likelihood`` records the value
    before each M-step, which EM keeps non-decreasing.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < n_components:
        raise SlideAggError(f"em_fit: {n} rows cannot support {n_components} components")
    rng = np.random.default_rng(seed)
    model = _initial_model(x, n_components, rng)
    history: list[float] = []
    for _ in range(max_iters):
        log_joint = model.log_joint(x)
        log_px = logsumexp(log_joint, axis=1)
        history.append(float(np.mean(log_px)))
        if len(history) > 1 and history[-1] - history[-2] < tol:
            break
        gamma = np.exp(log_joint - log_px[:, None])
        nk = gamma.sum(axis=0)
        means = model.means.copy()
        variances = model.variances.copy()
        for k in range(n_components):
            if nk[k] < 1e-10:
                far = int(np.argmin(log_px))
                warnings.warn(f"em_fit: component {k} is empty; re-seeding at row {far}",
                              EmptyComponentWarning, stacklevel=2)
                means[k] = x[far]
                variances[k] = np.maximum(x.var(axis=0), VAR_FLOOR)
                nk[k] = 1.0
                continue
            means[k] = gamma[:, k] @ x / nk[k]
            variances[k] = np.maximum(gamma[:, k] @ (x - means[k]) ** 2 / nk[k], VAR_FLOOR)
        model = GmmModel(nk / nk.sum(), means, variances)
    model.log_likelihood = history
    return model


def fisher_encode(model: GmmModel, patches) -> np.ndarray:
    """Unnormalized Fisher vector of one patch set, length ``K * (2D + 1)``."""
    x = patches.patches if isinstance(patches, PatchSet) else patches
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.dim:
        raise ShapeError(f"fisher_encode: expected {model.dim} columns, got shape {x.shape}")
    x = canonical_rows(x)
    n = x.shape[0]
    gamma = responsibilities(model, x)  # (N, K)
    w = model.weights
    sigma = np.sqrt(model.variances)
    g_w = (gamma - w).sum(axis=0) / (n * np.sqrt(w))
    z = (x[:, None, :] - model.means[None]) / sigma[None]  # (N, K, D)
    g_mu = np.einsum("nk,nkd->kd", gamma, z) / (n * np.sqrt(w))[:, None]
    g_var = np.einsum("nk,nkd->kd", gamma, z * z - 1.0) / (n * np.sqrt(2.0 * w))[:, None]
    return np.concatenate([g_w, g_mu.ravel(), g_var.ravel()])


def power_normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.sqrt(np.abs(v))


def l2_normalize(v) -> np.ndarray:
    """Scale to unit L2 norm; an all-zero vector is returned as is with a :class:`ZeroNormWarning`."""
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        warnings.warn("l2_normalize: zero vector left unnormalized", ZeroNormWarning, stacklevel=2)
        return v.copy()
    return v / norm


def improved_fv(model: GmmModel, patches) -> np.ndarray:
    return l2_normalize(power_normalize(fisher_encode(model, patches)))
