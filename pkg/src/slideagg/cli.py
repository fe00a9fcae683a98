"""Command-line entry point: ``slideagg <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from slideagg.dataset import SyntheticSpec, generate_synthetic, load_dataset, load_manifest, make_folds, write_dataset
from slideagg.embedding import SlideEmbedding
from slideagg.errors import ConfigError, SlideAggError
from slideagg.io import save_packed_bits, save_patch_matrix
from slideagg.methods import METHOD_NAMES, MethodParams, build_method, threaded
from slideagg.retrieval import BENCH_METHODS, NeighborQuery, bench_search, cross_validate, format_bench_table
from slideagg.vae_fisher import ALPHA_GRID, DIM_GRID, alpha_sweep, format_alpha_table

log = logging.getLogger("slideagg")

SEED_ENV = "SLIDEAGG_SEED"

# config-file key -> (argparse dest, type)
CONFIG_KEYS = {
    "manifest": ("manifest", str),
    "method": ("method", str),
    "seed": ("seed", int),
    "k": ("k", int),
    "out": ("out", str),
    "threads": ("threads", int),
    "K": ("n_components", int),
    "alpha": ("alpha", float),
    "M": ("n_dims", int),
    "hidden": ("hidden", int),
    "units": ("memory_units", int),
    "epochs": ("epochs", int),
    "lr": ("lr", float),
    "batch_size": ("batch_size", int),
    "latent": ("latent", int),
}

DEFAULTS = {"k": 1, "threads": os.cpu_count() or 1, "n_components": 16, "alpha": 0.0, "n_dims": 300, "latent": 16}


class UsageError(SlideAggError):
    pass


def _float_list(text: str) -> list[float]:
    items = [t for t in text.replace(" ", "").split(",") if t]
    try:
        return [float(t) for t in items]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from exc


def _int_list(text: str) -> list[int]:
    return [int(v) for v in _float_list(text)]


def _add_run_flags(p: argparse.ArgumentParser, *, method: bool = True) -> None:
    p.add_argument("--config", type=Path, help="key = value file with a [run] section")
    p.add_argument("--manifest", type=Path)
    if method:
        p.add_argument("--method", help=f"one of: {', '.join(METHOD_NAMES)}")
    p.add_argument("--seed", type=int)
    p.add_argument("--k", type=int, help="neighbors for the k-NN vote (default 1)")
    p.add_argument("--out", type=Path)
    p.add_argument("--threads", type=int)
    g = p.add_argument_group("method hyperparameters")
    g.add_argument("--K", dest="n_components", type=int, help="GMM components (default 16)")
    g.add_argument("--alpha", type=float, help="gradient regularization weight (default 0)")
    g.add_argument("--M", dest="n_dims", type=int, help="deep Fisher dimensions kept (default 300)")
    g.add_argument("--hidden", type=int)
    g.add_argument("--units", dest="memory_units", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--batch-size", dest="batch_size", type=int)
    g.add_argument("--latent", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slideagg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset (manifest + SAGG matrices)")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--slides-per-class", type=int, default=25)
    p.add_argument("--patches-min", type=int, default=8)
    p.add_argument("--patches-max", type=int, default=24)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--separation", type=float, default=10.0)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("encode", help="fit a method on a dataset and write one embedding per slide")
    _add_run_flags(p)

    p = sub.add_parser("evaluate", help="5-fold k-NN retrieval evaluation of one method")
    _add_run_flags(p)

    p = sub.add_parser("sweep-alpha", help="evaluate deep Fisher vectors over a grid of alpha values")
    _add_run_flags(p, method=False)
    p.add_argument("--flavor", choices=("sparse", "binary"), default="sparse")
    p.add_argument("--alphas", type=_float_list, default=list(ALPHA_GRID),
                   help="comma-separated alpha values (default: 0,0.1,0.01,0.001,0.0001,0.00001)")

    p = sub.add_parser("bench", help="time all-vs-all search per embedding dimension")
    p.add_argument("--dims", type=_int_list, default=list(DIM_GRID))
    p.add_argument("--gallery", type=int, default=500)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--methods", type=lambda s: [m for m in s.split(",") if m], default=list(BENCH_METHODS))
    p.add_argument("--patches-per-slide", type=int, default=8)
    p.add_argument("--seed", type=int)
    p.add_argument("--format", choices=("json", "text"), default="json")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("all", help="synth then evaluate, for smoke tests")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--method", default="mean")
    p.add_argument("--seed", type=int)
    return parser


def resolve_seed(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from exc
    return 0


def merge_config(args: argparse.Namespace) -> argparse.Namespace:
    """Fill unset flags from ``--config``, then from built-in defaults."""
    path = getattr(args, "config", None)
    if path is not None:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        try:
            read = cp.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        if not read:
            raise ConfigError(f"config file {path} not found")
        if "run" not in cp:
            raise ConfigError(f"config {path} has no [run] section")
        for key, raw in cp["run"].items():
            if key not in CONFIG_KEYS:
                raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(CONFIG_KEYS)}")
            dest, cast = CONFIG_KEYS[key]
            if getattr(args, dest, None) is None:
                try:
                    value = cast(raw)
                except ValueError as exc:
                    raise ConfigError(f"config key {key}: {exc}") from exc
                setattr(args, dest, Path(value) if dest in ("manifest", "out") else value)
    for dest, value in DEFAULTS.items():
        if hasattr(args, dest) and getattr(args, dest) is None:
            setattr(args, dest, value)
    args.seed = resolve_seed(getattr(args, "seed", None))
    return args


def _params(args) -> MethodParams:
    return MethodParams(n_components=args.n_components, alpha=args.alpha, n_dims=args.n_dims, hidden=args.hidden,
                        memory_units=args.memory_units, epochs=args.epochs, lr=args.lr,
                        batch_size=args.batch_size, latent=args.latent)


def _require(args, *names) -> None:
    missing = [n for n in names if getattr(args, n, None) is None]
    if missing:
        raise UsageError(f"missing required setting(s): {', '.join('--' + n for n in missing)}")


def _load(args):
    manifest = load_manifest(args.manifest)
    return manifest, load_dataset(manifest)


def cmd_synth(args) -> int:
    spec = SyntheticSpec(num_classes=args.classes, slides_per_class=args.slides_per_class,
                         patches_per_slide_range=(args.patches_min, args.patches_max), embedding_dim=args.dim,
                         class_separation=args.separation, noise_scale=args.noise, seed=resolve_seed(args.seed))
    manifest, slides = generate_synthetic(spec)
    path = write_dataset(args.out, manifest, slides)
    print(f"wrote {len(slides)} slides to {path}")
    return 0


def cmd_encode(args) -> int:
    _require(args, "manifest", "method", "out")
    manifest, slides = _load(args)
    method = build_method(args.method, _params(args))
    if method.metric == "set_median_min":
        raise UsageError("yottixel does not produce slide embeddings")
    encoder = method.fit(slides, manifest.n_classes, args.seed)
    items = threaded(encoder, args.threads)(slides)
    args.out.mkdir(parents=True, exist_ok=True)
    target = args.out / "embeddings.sagg"
    if all(isinstance(e, SlideEmbedding) and e.is_binary for e in items):
        save_packed_bits(target, np.vstack([e.data for e in items]), items[0].dim)
    else:
        save_patch_matrix(target, np.vstack([e.dense() for e in items]))
    (args.out / "slides.json").write_text(json.dumps([s.slide_id for s in slides], indent=1) + "\n")
    _save_models(encoder, args.out)
    print(f"wrote {len(items)} embeddings to {target}")
    return 0


def _save_models(encoder, out: Path) -> None:
    model = getattr(encoder, "model", None)
    if model is not None:
        model.save(out / "model.sagm")
    selector = getattr(encoder, "selector", None)
    if selector is not None:
        selector.save(out / "selector.sagm")


def run_evaluation(args):
    _require(args, "manifest", "method")
    manifest, slides = _load(args)
    method = build_method(args.method, _params(args))
    plan = make_folds(manifest, args.seed)
    query = NeighborQuery(args.k, method.metric)
    return cross_validate(slides, manifest.n_classes, method, plan, query, seed=args.seed, threads=args.threads)


def _write_report(report, out: Path | None) -> None:
    """Print the table; with ``out``, also write report.json/.txt and the wall-clock timings.json."""
    print(report.to_text())
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        # timings live in their own file so report.json is reproducible byte for byte
        doc = report.to_json(include_timings=False)
        (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        (out / "report.txt").write_text(report.to_text() + "\n")
        (out / "timings.json").write_text(json.dumps(report.timings, indent=2) + "\n")


def cmd_evaluate(args) -> int:
    _write_report(run_evaluation(args), args.out)
    return 0


def cmd_sweep_alpha(args) -> int:
    _require(args, "manifest")
    if not args.alphas:
        raise UsageError("--alphas needs at least one value")
    if any(a < 0 for a in args.alphas):
        raise UsageError("alpha values must be >= 0")
    manifest, slides = _load(args)
    params = _params(args)
    method = build_method(f"deep_fv_{args.flavor}", params)
    rows = alpha_sweep(slides, manifest.n_classes, args.flavor, args.alphas, train=method.train,
                       config=method.config, plan=make_folds(manifest, args.seed), k=args.k, seed=args.seed)
    table = format_alpha_table(rows, args.flavor)
    print(table)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        doc = [{k: v for k, v in r.items() if k != "report"} for r in rows]
        (args.out / "alpha_sweep.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        (args.out / "alpha_sweep.txt").write_text(table + "\n")
    return 1 if any("error" in r for r in rows) else 0


def cmd_bench(args) -> int:
    if not args.dims:
        raise UsageError("--dims needs at least one value")
    unknown = set(args.methods) - set(BENCH_METHODS)
    if unknown:
        raise UsageError(f"unknown bench methods {sorted(unknown)}; valid: {', '.join(BENCH_METHODS)}")
    table = bench_search(args.gallery, args.dims, args.methods, repeats=args.repeats, seed=resolve_seed(args.seed),
                         patches_per_slide=args.patches_per_slide)
    text = json.dumps(table, indent=2) if args.format == "json" else format_bench_table(table)
    print(text)
    if args.out is not None:
        args.out.write_text(json.dumps(table, indent=2) + "\n")
    return 0


def cmd_all(args) -> int:
    seed = resolve_seed(args.seed)
    data_dir = args.out / "data"
    synth_args = build_parser().parse_args(["synth", "--out", str(data_dir), "--seed", str(seed),
                                            "--slides-per-class", "10", "--dim", "32"])
    cmd_synth(synth_args)
    eval_args = build_parser().parse_args(["evaluate", "--manifest", str(data_dir / "manifest.json"),
                                           "--method", args.method, "--seed", str(seed),
                                           "--out", str(args.out / "report")])
    return cmd_evaluate(merge_config(eval_args))


COMMANDS = {
    "synth": cmd_synth,
    "encode": cmd_encode,
    "evaluate": cmd_evaluate,
    "sweep-alpha": cmd_sweep_alpha,
    "bench": cmd_bench,
    "all": cmd_all,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command not in ("synth", "bench", "all"):
            merge_config(args)
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"slideagg {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (SlideAggError, OSError, ValueError) as exc:
        print(f"slideagg {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
