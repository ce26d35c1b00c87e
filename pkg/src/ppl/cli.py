"""Command-line interface.

Usage:
    python -m ppl gen-corpus experiment.json --out runs/corpus
    python -m ppl train experiment.json --corpus runs/corpus --out runs/ppl
    python -m ppl eval runs/ppl/final.ckpt runs/corpus/test --sweep blur --out sweep.json
    python -m ppl cde runs/ppl/final.ckpt runs/corpus/test --out runs/cde --aggregate
    python -m ppl occlude runs/ppl/final.ckpt runs/corpus/test --sizes 14,28 --out occ.csv
    python -m ppl tile runs/ppl/final.ckpt runs/corpus/test --seed 3
    python -m ppl plot sweep.json runs/cde/cde_aggregate.json --out figs

Exit codes: 0 success, 2 configuration or usage error, 3 I/O error,
4 numerical failure. Results go to stdout as JSON; logs go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .detector import CheckpointFormatError, NonFiniteError, load_checkpoint
from .synthcorpus import CORRUPTION_RANGES, CorpusConfig, CorpusError, build_corpus, load_corpus, load_manifest
from .patchgrid import PatchGrid
from .trainer import (
    DivergenceError,
    TrainConfig,
    as_delta_fn,
    check_train_geometry,
    evaluate,
    evaluate_sweep,
    train,
)

log = logging.getLogger("ppl")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

# default sweep sets, one record per value
SWEEPS = {
    "blur": ("gaussian_blur", [0.0, 1.0, 2.0, 3.0]),
    "resize": ("resize", [0.5, 0.75, 1.0, 1.25, 1.5]),
    "jpeg": ("jpeg", [100, 90, 80, 70, 60]),
}


class ConfigError(ValueError):
    """Invalid experiment configuration or command-line usage."""


class UsageError(ConfigError):
    pass


@dataclass
class AttributionOptions:
    mask_sizes: list[int] = field(default_factory=lambda: [14, 28, 56])
    max_images: int | None = None
    tile_seed: int = 0

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "AttributionOptions":
        unknown = set(d) - {"mask_sizes", "max_images", "tile_seed"}
        if unknown:
            raise ConfigError(f"unknown attribution keys {sorted(unknown)}")
        out = cls()
        if "mask_sizes" in d:
            out.mask_sizes = [int(v) for v in d["mask_sizes"]]
            if not out.mask_sizes or min(out.mask_sizes) <= 0:
                raise ConfigError("mask_sizes must be a non-empty list of positive integers")
        if d.get("max_images") is not None:
            out.max_images = int(d["max_images"])
        if "tile_seed" in d:
            out.tile_seed = int(d["tile_seed"])
        return out


@dataclass
class ExperimentConfig:
    """One JSON document describing a whole experiment."""

    corpus: CorpusConfig
    train: TrainConfig
    attribution: AttributionOptions
    output_dir: Path
    train_split: str = "train"
    eval_split: str = "test"

    KEYS = ("corpus", "train", "attribution", "output_dir", "train_split", "eval_split")

    @classmethod
    def from_dict(cls, d: Any) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("experiment config must be a JSON object")
        unknown = set(d) - set(cls.KEYS)
        if unknown:
            raise ConfigError(f"unknown experiment config keys {sorted(unknown)}")
        try:
            corpus = CorpusConfig.from_dict(d.get("corpus", {}))
            train_cfg = TrainConfig.from_dict(d.get("train", {}), corpus.profiles)
        except (CorpusError, ValueError, TypeError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc
        split_names = {s.name for s in corpus.splits}
        train_split = str(d.get("train_split", "train"))
        eval_split = str(d.get("eval_split", "test"))
        for name in (train_split, eval_split):
            if name not in split_names:
                raise ConfigError(f"split {name!r} is not defined in the corpus config")
        try:
            check_train_geometry(train_cfg.detector, PatchGrid(corpus.height, corpus.width, corpus.patch_size),
                                 corpus.channels, train_cfg.random_crop)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return cls(corpus, train_cfg, AttributionOptions.from_dict(d.get("attribution", {})),
                   Path(d.get("output_dir", "runs")), train_split, eval_split)


def read_experiment(path: str | Path) -> ExperimentConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return ExperimentConfig.from_dict(doc)


def _emit(obj: Any) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    sys.stdout.flush()


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen_corpus(args: argparse.Namespace) -> int:
    exp = read_experiment(args.config)
    if args.seed is not None:
        exp.corpus.master_seed = args.seed
    out = Path(args.out) if args.out else exp.output_dir / "corpus"
    manifests = build_corpus(exp.corpus, out, workers=args.workers)
    summary = {
        "out": str(out),
        "splits": {name: {"n": len(m.records), "n_fake": int(m.labels().sum()),
                          "manifest": str(m.root / "manifest.jsonl")} for name, m in manifests.items()},
    }
    _emit(summary)
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    exp = read_experiment(args.config)
    cfg = exp.train
    if args.seed is not None:
        cfg.seed = args.seed
    if args.epochs is not None:
        cfg.epochs = args.epochs
    cfg.validate()
    corpus_dir = Path(args.corpus) if args.corpus else exp.output_dir / "corpus"
    out = Path(args.out) if args.out else exp.output_dir / f"train_{cfg.mode}_seed{cfg.seed}"
    corpus = load_corpus(corpus_dir)
    for split in (exp.train_split, exp.eval_split):
        if split not in corpus:
            raise FileNotFoundError(f"split {split!r} missing from corpus {corpus_dir}")
    ckpt, train_log = train(cfg, corpus[exp.train_split], corpus[exp.eval_split], out)
    last = train_log.records[-1] if train_log.records else None
    _emit({
        "checkpoint": str(ckpt),
        "best_checkpoint": str(out / "best.ckpt"),
        "epochs": len(train_log.records),
        "final_eval_accuracy": last.eval_accuracy if last else None,
        "final_train_accuracy": last.train_accuracy if last else None,
        "lambda": cfg.effective_lambda,
    })
    return EXIT_OK


def _corruption_flag(args: argparse.Namespace) -> tuple[str, float] | None:
    given = [(k, getattr(args, k)) for k in ("blur", "resize", "jpeg") if getattr(args, k) is not None]
    if len(given) > 1:
        raise UsageError("give at most one of --blur, --resize, --jpeg")
    if not given:
        return None
    flag, value = given[0]
    kind = SWEEPS[flag][0]
    lo, hi = CORRUPTION_RANGES[kind]
    if not args.force and not lo <= value <= hi:
        raise UsageError(f"--{flag} {value} outside the sweep range [{lo}, {hi}] (use --force)")
    return kind, value


def cmd_eval(args: argparse.Namespace) -> int:
    single = _corruption_flag(args)
    if single is not None and args.sweep:
        raise UsageError("--sweep cannot be combined with a single corruption flag")
    if args.sweep:
        kind, params = SWEEPS[args.sweep]
        if args.params:
            params = [float(v) for v in args.params.split(",")]
            lo, hi = CORRUPTION_RANGES[kind]
            bad = [p for p in params if not lo <= p <= hi]
            if bad and not args.force:
                raise UsageError(f"sweep values {bad} outside [{lo}, {hi}] (use --force)")
    model, _ = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    if args.sweep:
        records = evaluate_sweep(model, manifest, kind, params, check_range=not args.force)
        for rec in records:
            _emit(rec)
        if args.out:
            doc = {"label": args.label or Path(args.checkpoint).parent.name, "checkpoint": str(args.checkpoint),
                   "records": records}
            Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return EXIT_OK
    result = evaluate(model, manifest, single, check_range=not args.force)
    if single is not None:
        result = {"kind": single[0], "param": single[1], **result}
    _emit(result)
    if args.out:
        Path(args.out).write_text(json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_cde(args: argparse.Namespace) -> int:
    from .attribution import cde_map, corpus_cde_report, write_cde_csv, write_cde_pgm, write_report

    per_image = args.per_image or not args.aggregate
    aggregate = args.aggregate or not args.per_image
    model, _ = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fn = as_delta_fn(model)
    written = []
    if per_image:
        records = manifest.records[:args.max_images] if args.max_images else manifest.records
        for i, rec in enumerate(records):
            cmap = cde_map(fn, manifest.load_image(rec), manifest.grid)
            stem = out / f"cde_{i:06d}"
            write_cde_csv(cmap, stem.with_suffix(".csv"))
            write_cde_pgm(cmap, stem.with_suffix(".pgm"))
            written += [str(stem.with_suffix(".csv")), str(stem.with_suffix(".pgm"))]
    summary: dict[str, Any] = {"written": len(written)}
    if aggregate:
        report = corpus_cde_report(fn, manifest, max_images=args.max_images)
        report["label"] = args.label or Path(args.checkpoint).parent.name
        write_report(report, out / "cde_aggregate.json")
        summary["aggregate"] = str(out / "cde_aggregate.json")
        summary["entropy_mean"] = report["entropy"]["mean"]
    _emit(summary)
    return EXIT_OK


def cmd_occlude(args: argparse.Namespace) -> int:
    from .attribution import occlusion_recall_curve, write_occlusion_csv

    try:
        sizes = [int(v) for v in args.sizes.split(",")]
    except ValueError as exc:
        raise UsageError(f"--sizes must be comma-separated integers: {exc}") from exc
    model, _ = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    fakes = [r for r in manifest.records if r.image_label == 1]
    if args.max_images:
        fakes = fakes[:args.max_images]
    if not fakes:
        raise UsageError("manifest has no synthetic samples to occlude")
    images = np.stack([manifest.load_image(r) for r in fakes])
    try:
        result = occlusion_recall_curve(model, images, sizes)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    write_occlusion_csv(result, args.out)
    _emit({"baseline_recall": result["baseline_recall"], "rows": len(result["rows"]), **result["summary"]})
    return EXIT_OK


def cmd_tile(args: argparse.Namespace) -> int:
    from .attribution import tile_patch_eval

    model, _ = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    _emit(tile_patch_eval(model, manifest, rng=args.seed))
    return EXIT_OK


def cmd_plot(args: argparse.Namespace) -> int:
    from .plots import PlotInputError, render_inputs

    if not args.inputs:
        raise UsageError("plot needs at least one input file")
    for p in args.inputs:
        if not Path(p).exists():
            raise FileNotFoundError(f"input not found: {p}")
    try:
        written = render_inputs(args.inputs, args.out)
    except (PlotInputError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"plot input does not match any analysis format: {exc}") from exc
    _emit({"written": [str(p) for p in written]})
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ppl", description="Patch-level synthetic image detection toolkit")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sp = ap.add_subparsers(dest="command", required=True)

    p = sp.add_parser("gen-corpus", help="render the procedural corpus")
    p.add_argument("config", help="experiment config JSON")
    p.add_argument("--out", help="corpus directory (default: <output_dir>/corpus)")
    p.add_argument("--seed", type=int, help="override the corpus master seed")
    p.add_argument("--workers", type=int, help="render processes (default: PPL_THREADS or all cores)")
    p.set_defaults(func=cmd_gen_corpus)

    p = sp.add_parser("train", help="train a detector")
    p.add_argument("config", help="experiment config JSON")
    p.add_argument("--corpus", help="corpus directory (default: <output_dir>/corpus)")
    p.add_argument("--out", help="run directory")
    p.add_argument("--seed", type=int, help="override the training seed")
    p.add_argument("--epochs", type=int, help="override the epoch budget")
    p.set_defaults(func=cmd_train)

    p = sp.add_parser("eval", help="evaluate a checkpoint, optionally under corruption")
    p.add_argument("checkpoint")
    p.add_argument("manifest", help="manifest.jsonl or split directory")
    p.add_argument("--blur", type=float, help="gaussian blur sigma")
    p.add_argument("--resize", type=float, help="down/up resize scale")
    p.add_argument("--jpeg", type=float, help="JPEG quality")
    p.add_argument("--sweep", choices=sorted(SWEEPS), help="run the standard parameter sweep")
    p.add_argument("--params", help="comma-separated sweep values overriding the defaults")
    p.add_argument("--force", action="store_true", help="allow values outside the sweep ranges")
    p.add_argument("--out", help="also write the result JSON here")
    p.add_argument("--label", help="series label stored in the sweep file")
    p.add_argument("--seed", type=int, default=0, help="accepted for interface uniformity; eval is deterministic")
    p.set_defaults(func=cmd_eval)

    p = sp.add_parser("cde", help="CDE maps and aggregate statistics")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--per-image", action="store_true", help="write CSV+PGM per image")
    p.add_argument("--aggregate", action="store_true", help="write cde_aggregate.json over fake images")
    p.add_argument("--max-images", type=int)
    p.add_argument("--label")
    p.set_defaults(func=cmd_cde)

    p = sp.add_parser("occlude", help="recall under single-region occlusion")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--sizes", default="14,28,56", help="comma-separated mask sizes in pixels")
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--max-images", type=int)
    p.set_defaults(func=cmd_occlude)

    p = sp.add_parser("tile", help="accuracy on single-patch tiled images")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_tile)

    p = sp.add_parser("plot", help="render analysis outputs as SVG")
    p.add_argument("inputs", nargs="*")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return ap


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, (DivergenceError, NonFiniteError, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, (FileNotFoundError, PermissionError, IsADirectoryError, CheckpointFormatError, OSError,
                        CorpusError)):
        return EXIT_IO
    if isinstance(exc, (ConfigError, ValueError, KeyError, TypeError)):
        return EXIT_CONFIG
    raise exc


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    func: Callable[[argparse.Namespace], int] = args.func
    try:
        return func(args)
    except Exception as exc:  # mapped to the exit-code contract
        code = _exit_code(exc)
        sys.stderr.write(f"ppl {args.command}: error: {exc}\n")
        return code


if __name__ == "__main__":
    sys.exit(main())
