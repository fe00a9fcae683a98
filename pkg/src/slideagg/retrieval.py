"""k-NN retrieval, majority-vote classification, metrics and 5-fold evaluation."""

from __future__ import annotations

import logging
import time
import warnings
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from slideagg.dataset import N_FOLDS, FoldPlan, PatchSet
from slideagg.embedding import SlideEmbedding, pack_bits, stack_dense, stack_packed
from slideagg.errors import AbsentClassWarning, ShapeError
from slideagg.set_distance import median_of_minimums

log = logging.getLogger(__name__)

QUERY_METRICS = ("euclidean", "hamming", "set_median_min")
METRIC_NAMES = ("accuracy", "macro_f1", "weighted_f1")


@dataclass(frozen=True)
class NeighborQuery:
    k: int = 1
    metric: str = "euclidean"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.metric not in QUERY_METRICS:
            raise ValueError(f"unknown metric {self.metric!r}; expected one of {QUERY_METRICS}")


class Gallery:
    """Indexed slide representations for repeated distance queries."""

    def __init__(self, items: Sequence, metric: str):
        if len(items) == 0:
            raise ValueError("gallery is empty")
        self.metric = metric
        self.items = list(items)
        if metric == "euclidean":
            self.matrix = stack_dense(self.items)
        elif metric == "hamming":
            if not all(isinstance(e, SlideEmbedding) and e.is_binary for e in self.items):
                raise ValueError("hamming search needs binary embeddings")
            self.matrix, self.nbits = stack_packed(self.items)
        elif metric == "set_median_min":
            if not all(isinstance(e, PatchSet) for e in self.items):
                raise ValueError("set_median_min search needs patch sets")
        else:
            raise ValueError(f"unknown metric {metric!r}; expected one of {QUERY_METRICS}")

    def __len__(self) -> int:
        return len(self.items)

    def distances(self, query) -> np.ndarray:
        if self.metric == "euclidean":
            q = query.dense() if isinstance(query, SlideEmbedding) else np.asarray(query, dtype=np.float64)
            if q.shape != (self.matrix.shape[1],):
                raise ShapeError(f"query has shape {q.shape}, gallery vectors have {self.matrix.shape[1]} dims")
            diff = self.matrix - q
            return np.sqrt(np.einsum("ij,ij->i", diff, diff))
        if self.metric == "hamming":
            if query.dim != self.nbits:
                raise ShapeError(f"query has {query.dim} bits, gallery has {self.nbits}")
            return np.bitwise_count(self.matrix ^ query.data).sum(axis=1).astype(np.float64)
        return np.array([median_of_minimums(query, g) for g in self.items])


def knn(query, gallery: Gallery | Sequence, q: NeighborQuery) -> np.ndarray:
    """Indices of the ``k`` nearest gallery items, nearest first; ties go to the lower index."""
    if not isinstance(gallery, Gallery):
        gallery = Gallery(gallery, q.metric)
    if q.k > len(gallery):
        raise ValueError(f"k={q.k} exceeds gallery size {len(gallery)}")
    return np.argsort(gallery.distances(query), kind="stable")[:q.k]


def classify(neighbor_labels: Sequence[int], k: int | None = None) -> int:
    """Majority vote over labels ordered nearest first; ties go to the nearest tied class."""
    labels = list(neighbor_labels)[:k]
    if not labels:
        raise ValueError("classify needs at least one label")
    counts = Counter(labels)
    top = max(counts.values())
    return next(lab for lab in labels if counts[lab] == top)


def metrics(y_true: Sequence[int], y_pred: Sequence[int], n_classes: int) -> tuple[float, float, float]:
    """``(accuracy, macro_f1, weighted_f1)``; macro averages over all ``n_classes`` classes."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape or y_true.size == 0:
        raise ValueError("metrics need equal-length, non-empty label vectors")
    tp = np.bincount(y_true[y_true == y_pred], minlength=n_classes).astype(np.float64)
    support = np.bincount(y_true, minlength=n_classes).astype(np.float64)
    predicted = np.bincount(y_pred, minlength=n_classes).astype(np.float64)
    # F1 = 2TP / (2TP + FP + FN) equals 2PR/(P+R), and is 0 when P+R=0
    denom = support + predicted
    f1 = np.divide(2.0 * tp, denom, out=np.zeros(n_classes), where=denom > 0)
    accuracy = tp.sum() / y_true.size
    return float(accuracy), float(f1.mean()), float(np.dot(f1, support) / support.sum())


@dataclass
class RetrievalReport:
    method: str
    folds: list[dict[str, float]]
    timings: list[dict] = field(default_factory=list)

    @property
    def mean(self) -> dict[str, float]:
        return {m: float(np.mean([f[m] for f in self.folds])) for m in METRIC_NAMES}

    @property
    def std(self) -> dict[str, float]:
        return {m: float(np.std([f[m] for f in self.folds])) for m in METRIC_NAMES}

    def to_json(self, include_timings: bool = True) -> dict:
        doc = {"method": self.method, "folds": self.folds, "mean": self.mean, "std": self.std}
        if include_timings:
            doc["timings"] = self.timings
        return doc

    def to_text(self) -> str:
        lines = [f"{'Experiment':<20}{'Accuracy':>10}{'Macro F1':>10}{'Weighted F1':>13}"]
        for i, f in enumerate(self.folds):
            lines.append(f"{'  fold ' + str(i):<20}{f['accuracy']:>10.3f}{f['macro_f1']:>10.3f}{f['weighted_f1']:>13.3f}")
        mean, std = self.mean, self.std
        lines.append(f"{self.method:<20}{mean['accuracy']:>10.3f}{mean['macro_f1']:>10.3f}{mean['weighted_f1']:>13.3f}")
        lines.append(f"{'  +/- std':<20}{std['accuracy']:>10.3f}{std['macro_f1']:>10.3f}{std['weighted_f1']:>13.3f}")
        return "\n".join(lines)


class Method(Protocol):
    """What :func:`cross_validate` needs from an aggregation scheme."""

    name: str
    metric: str

    def fit(self, slides: Sequence[PatchSet], n_classes: int, seed: int) -> Callable[[Sequence[PatchSet]], list]:
        ...


def cross_validate(slides: Sequence[PatchSet], n_classes: int, method: Method, plan: FoldPlan,
                   query: NeighborQuery | None = None, seed: int = 0, threads: int = 1) -> RetrievalReport:
    """Train on four folds, search the held-out fold against them, for each of the five folds.

    ``threads`` only parallelizes slide encoding; results are identical for any value.
    """
    from slideagg.methods import threaded
    query = query or NeighborQuery(1, method.metric)
    folds, timings = [], []
    for fold in range(N_FOLDS):
        train, test = plan.split(slides, fold)
        if not test:
            log.warning("fold %d has no test slides", fold)
            continue
        absent = sorted(set(range(n_classes)) - {s.label for s in train})
        if absent:
            warnings.warn(f"fold {fold}: classes {absent} are absent from the gallery", AbsentClassWarning,
                          stacklevel=2)
        encode = threaded(method.fit(train, n_classes, seed + fold), threads)
        gallery_items = encode(train)
        query_items = encode(test)
        gallery_labels = np.array([s.label for s in train])

        start = time.perf_counter()
        gallery = Gallery(gallery_items, query.metric)
        k = min(query.k, len(gallery))
        preds = [classify(gallery_labels[knn(item, gallery, NeighborQuery(k, query.metric))])
                 for item in query_items]
        elapsed = time.perf_counter() - start

        acc, macro, weighted = metrics([s.label for s in test], preds, n_classes)
        folds.append({"accuracy": acc, "macro_f1": macro, "weighted_f1": weighted})
        dim = gallery_items[0].dim if isinstance(gallery_items[0], SlideEmbedding) else gallery_items[0].dim
        timings.append({"method": method.name, "fold": fold, "dimension": int(dim), "total_ms": elapsed * 1e3})
    return RetrievalReport(method.name, folds, timings)


# -- search timing -----------------------------------------------------------------

BENCH_METHODS = ("sparse-euclidean", "binary-hamming", "yottixel-median")


def _time_min(fn: Callable[[], object], repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def _all_vs_all(distance_rows: Callable[[int], np.ndarray], n: int, k: int) -> None:
    for i in range(n):
        d = distance_rows(i)
        np.argsort(d, kind="stable")[:k]


def bench_search(gallery_size: int = 500, dims: Sequence[int] = (300, 3000, 30000),
                 methods: Sequence[str] = BENCH_METHODS, repeats: int = 5, k: int = 1, seed: int = 0,
                 patches_per_slide: int = 8, yottixel_dims: Sequence[int] = (3000,)) -> dict:
    """Wall-clock of an all-vs-all k-NN workload per (dimension, method), best of ``repeats``.

    Real vectors use per-query Euclidean loops; binary vectors are the sign
    bits of the same data, compared by XOR and popcount. The median-of-minimums
    column is only filled for ``yottixel_dims``.
    """
    unknown = set(methods) - set(BENCH_METHODS)
    if unknown:
        raise ValueError(f"unknown bench methods {sorted(unknown)}; expected {BENCH_METHODS}")
    rng = np.random.default_rng(seed)
    n = gallery_size
    rows = []
    for dim in dims:
        row: dict = {"dimension": int(dim)}
        real = None
        if "sparse-euclidean" in methods or "binary-hamming" in methods:
            real = rng.standard_normal((n, dim)).astype(np.float32)
        if "sparse-euclidean" in methods:
            def euclid_rows(i, g=real):
                diff = g - g[i]
                return np.einsum("ij,ij->i", diff, diff)

            row["sparse-euclidean"] = 1e3 * _time_min(lambda: _all_vs_all(euclid_rows, n, k), repeats)
        if "binary-hamming" in methods:
            packed = pack_bits(real > 0)

            def hamming_rows(i, g=packed):
                return np.bitwise_count(g ^ g[i]).sum(axis=1)

            row["binary-hamming"] = 1e3 * _time_min(lambda: _all_vs_all(hamming_rows, n, k), repeats)
        if "yottixel-median" in methods:
            row["yottixel-median"] = None
            if dim in yottixel_dims:
                sets = rng.standard_normal((n, patches_per_slide, dim)).astype(np.float32)
                flat = sets.reshape(n * patches_per_slide, dim)
                sq = np.einsum("ij,ij->i", flat, flat)

                def set_rows(i, p=patches_per_slide):
                    q = sets[i]
                    d2 = np.einsum("ij,ij->i", q, q)[:, None] + sq[None, :] - 2.0 * (q @ flat.T)
                    mins = np.sqrt(np.maximum(d2, 0.0)).reshape(p, n, p).min(axis=2)
                    return np.median(mins, axis=0)

                row["yottixel-median"] = 1e3 * _time_min(lambda: _all_vs_all(set_rows, n, k), repeats)
        rows.append(row)
    return {"gallery_size": n, "repeats": repeats, "k": k, "methods": list(methods), "rows": rows}


def format_bench_table(table: dict) -> str:
    methods = table["methods"]
    lines = [f"{'Dimensions':>10} | " + " | ".join(f"{m:>18}" for m in methods)]
    for row in sorted(table["rows"], key=lambda r: -r["dimension"]):
        cells = [f"{row[m]:>15.1f} ms" if row.get(m) is not None else " " * 18 for m in methods]
        lines.append(f"{row['dimension']:>10} | " + " | ".join(cells))
    return "\n".join(lines)
