"""Slides as bags of patch embeddings: data model, manifests, synthetic data, folds."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from slideagg.errors import ManifestError, SlideAggError, SmallClassWarning
from slideagg.io import load_patch_matrix, save_patch_matrix

N_FOLDS = 5


@dataclass(frozen=True, eq=False)
class PatchSet:
    """One slide: an ``N x D`` matrix of patch embeddings plus id and label."""

    slide_id: str
    label: int
    patches: np.ndarray

    def __post_init__(self):
        patches = np.asarray(self.patches)
        if patches.ndim != 2:
            raise ValueError(f"slide {self.slide_id!r}: patches must be 2-D, got shape {patches.shape}")
        if patches.shape[0] < 1:
            raise ValueError(f"slide {self.slide_id!r}: a patch set needs at least one patch")
        if not np.all(np.isfinite(patches)):
            raise ValueError(f"slide {self.slide_id!r}: patches contain NaN or Inf")
        if self.label < 0:
            raise ValueError(f"slide {self.slide_id!r}: negative label {self.label}")
        object.__setattr__(self, "patches", patches)

    @property
    def n_patches(self) -> int:
        return self.patches.shape[0]

    @property
    def dim(self) -> int:
        return self.patches.shape[1]


@dataclass(frozen=True)
class SlideEntry:
    id: str
    label: int
    path: str


@dataclass
class DatasetManifest:
    name: str
    class_names: list[str]
    embedding_dim: int
    slides: list[SlideEntry]
    root: Path = field(default=Path("."), compare=False)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def resolve(self, entry: SlideEntry) -> Path:
        path = Path(entry.path)
        return path if path.is_absolute() else self.root / path

    def validate(self, *, check_files: bool = True) -> None:
        seen = set()
        for entry in self.slides:
            if entry.id in seen:
                raise ManifestError(f"duplicate slide_id {entry.id!r}")
            seen.add(entry.id)
            if not 0 <= entry.label < self.n_classes:
                raise ManifestError(
                    f"slide {entry.id!r}: label {entry.label} out of range for {self.n_classes} classes"
                )
            if check_files and not self.resolve(entry).is_file():
                raise ManifestError(f"slide {entry.id!r}: missing matrix file {self.resolve(entry)}")

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "class_names": list(self.class_names),
            "embedding_dim": self.embedding_dim,
            "slides": [{"id": s.id, "label": s.label, "path": s.path} for s in self.slides],
        }


_MANIFEST_KEYS = {"name", "class_names", "embedding_dim", "slides"}
_SLIDE_KEYS = {"id", "label", "path"}


def parse_manifest(doc: dict, root: Path = Path("."), *, check_files: bool = True) -> DatasetManifest:
    if not isinstance(doc, dict) or set(doc) != _MANIFEST_KEYS:
        got = sorted(doc) if isinstance(doc, dict) else type(doc).__name__
        raise ManifestError(f"manifest must have exactly the keys {sorted(_MANIFEST_KEYS)}, got {got}")
    entries = []
    for i, raw in enumerate(doc["slides"]):
        if not isinstance(raw, dict) or set(raw) != _SLIDE_KEYS:
            raise ManifestError(f"slide entry {i} ({raw.get('id') if isinstance(raw, dict) else raw!r}): "
                                f"expected keys {sorted(_SLIDE_KEYS)}")
        if not isinstance(raw["label"], int) or isinstance(raw["label"], bool):
            raise ManifestError(f"slide {raw['id']!r}: label must be an integer")
        entries.append(SlideEntry(str(raw["id"]), raw["label"], str(raw["path"])))
    manifest = DatasetManifest(
        name=str(doc["name"]),
        class_names=[str(c) for c in doc["class_names"]],
        embedding_dim=int(doc["embedding_dim"]),
        slides=entries,
        root=root,
    )
    manifest.validate(check_files=check_files)
    return manifest


def load_manifest(path: str | Path) -> DatasetManifest:
    """Read and validate a JSON manifest; matrix paths resolve against its directory."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot parse manifest {path}: {exc}") from exc
    return parse_manifest(doc, root=path.parent)


def load_dataset(manifest: DatasetManifest) -> list[PatchSet]:
    slides = []
    for entry in manifest.slides:
        try:
            patches = load_patch_matrix(manifest.resolve(entry))
        except SlideAggError as exc:
            raise ManifestError(f"slide {entry.id!r}: {exc}") from exc
        if patches.shape[1] != manifest.embedding_dim:
            raise ManifestError(
                f"slide {entry.id!r}: matrix has {patches.shape[1]} columns, manifest says {manifest.embedding_dim}"
            )
        slides.append(PatchSet(entry.id, entry.label, patches))
    return slides


def write_dataset(out_dir: str | Path, manifest: DatasetManifest, slides: Sequence[PatchSet]) -> Path:
    """Write every slide matrix plus ``manifest.json``; returns the manifest path."""
    out_dir = Path(out_dir)
    by_id = {s.slide_id: s for s in slides}
    for entry in manifest.slides:
        target = out_dir / entry.path
        target.parent.mkdir(parents=True, exist_ok=True)
        save_patch_matrix(target, by_id[entry.id].patches)
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest.to_json(), indent=2) + "\n")
    return manifest_path


# -- synthetic data -------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 4
    slides_per_class: int = 25
    patches_per_slide_range: tuple[int, int] = (8, 24)
    embedding_dim: int = 64
    class_separation: float = 10.0
    noise_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.patches_per_slide_range
        if min(self.num_classes, self.slides_per_class, self.embedding_dim, lo) < 1:
            raise ValueError("synthetic counts must all be >= 1")
        if lo > hi:
            raise ValueError(f"patches_per_slide_range min {lo} exceeds max {hi}")
        if self.class_separation < 0:
            raise ValueError("class_separation must be >= 0")
        if self.noise_scale <= 0:
            raise ValueError("noise_scale must be > 0")


COMPONENTS_PER_CLASS = 2


def generate_synthetic(spec: SyntheticSpec) -> tuple[DatasetManifest, list[PatchSet]]:
    """Draw a labelled dataset from per-class two-component Gaussian mixtures.

    Each component mean sits at distance ``class_separation`` from the origin
    in a random direction; patches are i.i.d. draws from the slide's class
    mixture with isotropic standard deviation ``noise_scale``.
    """
    rng = np.random.default_rng(spec.seed)
    dim = spec.embedding_dim
    directions = rng.standard_normal((spec.num_classes, COMPONENTS_PER_CLASS, dim))
    directions /= np.linalg.norm(directions, axis=-1, keepdims=True)
    means = spec.class_separation * directions

    lo, hi = spec.patches_per_slide_range
    width = len(str(spec.num_classes * spec.slides_per_class - 1))
    slides, entries = [], []
    for c in range(spec.num_classes):
        for _ in range(spec.slides_per_class):
            slide_id = f"slide-{len(slides):0{width}d}"
            n = int(rng.integers(lo, hi + 1))
            comp = rng.integers(0, COMPONENTS_PER_CLASS, size=n)
            patches = means[c, comp] + spec.noise_scale * rng.standard_normal((n, dim))
            slides.append(PatchSet(slide_id, c, patches.astype(np.float32)))
            entries.append(SlideEntry(slide_id, c, f"slides/{slide_id}.sagg"))
    manifest = DatasetManifest(
        name=f"synthetic-c{spec.num_classes}-d{dim}-s{spec.seed}",
        class_names=[f"class_{c}" for c in range(spec.num_classes)],
        embedding_dim=dim,
        slides=entries,
    )
    return manifest, slides


# -- folds ----------------------------------------------------------------


@dataclass(frozen=True)
class FoldPlan:
    seed: int
    fold_of: dict[str, int]

    n_folds = N_FOLDS

    def members(self, fold: int) -> list[str]:
        return [sid for sid, f in self.fold_of.items() if f == fold]

    def split(self, slides: Sequence[PatchSet], fold: int) -> tuple[list[PatchSet], list[PatchSet]]:
        """``(train, test)`` for one fold, preserving input order."""
        missing = [s.slide_id for s in slides if s.slide_id not in self.fold_of]
        if missing:
            raise SlideAggError(f"slides not covered by fold plan: {missing[:5]}")
        train = [s for s in slides if self.fold_of[s.slide_id] != fold]
        test = [s for s in slides if self.fold_of[s.slide_id] == fold]
        return train, test


def stratified_folds(ids: Iterable[str], labels: Iterable[int], seed: int) -> FoldPlan:
    """Shuffle each class under ``seed`` and deal its slides round-robin.

    The dealing position carries over from one class to the next so total
    fold sizes stay balanced. Classes smaller than the fold count leave some
    folds without that class and trigger a :class:`SmallClassWarning`.
    """
    by_class: dict[int, list[str]] = {}
    for sid, label in zip(ids, labels):
        by_class.setdefault(int(label), []).append(sid)
    if not by_class:
        raise SlideAggError("cannot make folds for an empty dataset")
    rng = np.random.default_rng(seed)
    fold_of: dict[str, int] = {}
    offset = 0
    for label in sorted(by_class):
        members = sorted(by_class[label])
        if len(members) < N_FOLDS:
            warnings.warn(
                f"class {label} has {len(members)} slides (< {N_FOLDS}); distributing round-robin",
                SmallClassWarning,
                stacklevel=2,
            )
        for j, idx in enumerate(rng.permutation(len(members))):
            fold_of[members[idx]] = (offset + j) % N_FOLDS
        offset += len(members)
    return FoldPlan(seed=seed, fold_of=fold_of)


def make_folds(manifest: DatasetManifest | Sequence[PatchSet], seed: int) -> FoldPlan:
    if isinstance(manifest, DatasetManifest):
        ids = [s.id for s in manifest.slides]
        labels = [s.label for s in manifest.slides]
    else:
        ids = [s.slide_id for s in manifest]
        labels = [s.label for s in manifest]
    return stratified_folds(ids, labels, seed)
