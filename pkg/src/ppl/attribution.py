"""Patch attribution: controlled-direct-effect maps, their normalization and
uniformity statistics, occlusion recall curves and the single-patch tiling probe.

Every function takes a *predictor*: a :class:`~ppl.detector.Detector`, a
checkpoint path, or any callable mapping an image stack (B, H, W, C) to the
logit difference ``delta = logit_synth - logit_real`` per image.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .patchgrid import PatchGrid, PatchIndex, mask_patch, tile_patch
from .synthcorpus import CorpusManifest
from .trainer import Predictor, as_delta_fn

HIST_BINS = 20
DEFAULT_MASK_SIZES = (14, 28, 56)


@dataclass(frozen=True)
class CDEMap:
    grid: PatchGrid
    values: np.ndarray  # (K,), row-major

    def __post_init__(self) -> None:
        if self.values.shape != (self.grid.num_patches,):
            raise ValueError(f"expected {self.grid.num_patches} values, got shape {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise ValueError("CDE values must be finite")

    def as_grid(self) -> np.ndarray:
        return self.values.reshape(self.grid.rows, self.grid.cols)


@dataclass(frozen=True)
class UniformityStats:
    entropy: float
    topk_mass: float
    gini: float


def masked_variants(image: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Stack of K copies of ``image``, copy k with patch k zero-filled."""
    return np.stack([mask_patch(image, grid, grid.index(k)) for k in range(grid.num_patches)])


def cde_map(predictor: Predictor, image: np.ndarray, grid: PatchGrid) -> CDEMap:
    """CDE of every patch: delta(image) - delta(image with that patch zeroed).

    Runs one batched forward over the unmasked image and its K masked variants.
    """
    grid.check_image(image)
    fn = as_delta_fn(predictor)
    stack = np.concatenate([image[None], masked_variants(image, grid)])
    deltas = np.asarray(fn(stack), dtype=np.float64)
    return CDEMap(grid, deltas[0] - deltas[1:])


def normalize_cde(cmap: CDEMap | np.ndarray) -> np.ndarray:
    """exp(cde - max cde): the strongest patch maps to exactly 1."""
    v = np.asarray(cmap.values if isinstance(cmap, CDEMap) else cmap, dtype=np.float64)
    if not np.isfinite(v).all():
        raise ValueError("CDE values must be finite")
    return np.exp(v - v.max())


def uniformity_stats(normalized: Sequence[float] | np.ndarray) -> UniformityStats:
    """Entropy (nats), top-ceil(K/10) mass and Gini coefficient of the weights."""
    x = np.asarray(normalized, dtype=np.float64)
    if x.ndim != 1 or len(x) < 2:
        raise ValueError("need at least 2 values")
    if not (x > 0).all():
        raise ValueError("normalized CDE values must be strictly positive")
    w = x / x.sum()
    entropy = float(-(w * np.log(w)).sum())
    k = len(w)
    top = math.ceil(k / 10)
    topk = float(np.sort(w)[::-1][:top].sum())
    s = np.sort(w)
    ranks = np.arange(1, k + 1)
    gini = float((2 * (ranks * s).sum()) / (k * s.sum()) - (k + 1) / k)
    return UniformityStats(entropy, topk, max(gini, 0.0))


# --------------------------------------------------------------------------
# occlusion
# --------------------------------------------------------------------------

def _mask_region(image: np.ndarray, top: int, left: int, size: int) -> np.ndarray:
    out = np.array(image, copy=True)
    out[top:top + size, left:left + size, :] = 0
    return out


def occlusion_recall_curve(predictor: Predictor, fake_images: np.ndarray,
                           mask_sizes: Iterable[int] = DEFAULT_MASK_SIZES) -> dict[str, Any]:
    """Fake-class recall with one aligned square region zeroed in every image.

    Returns ``{"baseline_recall", "rows": [{mask_size, row, col, recall, drop}], "summary"}``
    where drop = baseline - recall and the summary holds mean/max drop per mask size
    and overall.
    """
    fake_images = np.asarray(fake_images)
    if fake_images.ndim != 4 or len(fake_images) == 0:
        raise ValueError("fake_images must be a non-empty (N, H, W, C) stack")
    fn = as_delta_fn(predictor)
    h, w = fake_images.shape[1:3]
    baseline = float((np.asarray(fn(fake_images)) > 0).mean())
    rows = []
    summary: dict[str, Any] = {}
    for size in mask_sizes:
        size = int(size)
        if size <= 0 or h % size or w % size:
            raise ValueError(f"mask size {size} does not divide {h}x{w}")
        drops = []
        for r in range(h // size):
            for c in range(w // size):
                masked = np.stack([_mask_region(im, r * size, c * size, size) for im in fake_images])
                recall = float((np.asarray(fn(masked)) > 0).mean())
                rows.append({"mask_size": size, "row": r, "col": c, "recall": recall, "drop": baseline - recall})
                drops.append(baseline - recall)
        summary[str(size)] = {"mean_drop": float(np.mean(drops)), "max_drop": float(np.max(drops))}
    all_drops = [row["drop"] for row in rows]
    summary["mean_drop"] = float(np.mean(all_drops)) if all_drops else 0.0
    summary["max_drop"] = float(np.max(all_drops)) if all_drops else 0.0
    return {"baseline_recall": baseline, "rows": rows, "summary": summary}


def write_occlusion_csv(result: dict[str, Any], path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["mask_size", "row", "col", "recall", "drop"])
        for r in result["rows"]:
            wr.writerow([r["mask_size"], r["row"], r["col"], repr(r["recall"]), repr(r["drop"])])


# --------------------------------------------------------------------------
# tiling probe
# --------------------------------------------------------------------------

def tile_patch_eval(predictor: Predictor, manifest: CorpusManifest, grid: PatchGrid | None = None,
                    rng: np.random.Generator | int = 0) -> dict[str, Any]:
    """Accuracy when each test image is replaced by one random patch tiled over the frame."""
    grid = grid or manifest.grid
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    fn = as_delta_fn(predictor)
    labels = manifest.labels()
    tiled = []
    for rec in manifest.records:
        img = manifest.load_image(rec)
        grid.check_image(img)
        k = int(gen.integers(grid.num_patches))
        tiled.append(tile_patch(img, grid, grid.index(k)))
    if not tiled:
        return {"tiled_accuracy": float("nan"), "n": 0}
    preds = (np.asarray(fn(np.stack(tiled))) > 0).astype(np.int64)
    return {"tiled_accuracy": float((preds == labels).mean()), "n": int(len(labels))}


# --------------------------------------------------------------------------
# corpus report and exports
# --------------------------------------------------------------------------

def corpus_cde_report(predictor: Predictor, manifest: CorpusManifest, grid: PatchGrid | None = None,
                      max_images: int | None = None) -> dict[str, Any]:
    """Mean normalized-CDE histogram and mean/std uniformity statistics over fake samples."""
    grid = grid or manifest.grid
    fn = as_delta_fn(predictor)
    fakes = [r for r in manifest.records if r.image_label == 1]
    if max_images is not None:
        fakes = fakes[:max_images]
    if not fakes:
        raise ValueError("manifest has no synthetic samples")
    hists, stats = [], []
    for rec in fakes:
        norm = normalize_cde(cde_map(fn, manifest.load_image(rec), grid))
        hist, _ = np.histogram(norm, bins=HIST_BINS, range=(0.0, 1.0))
        hists.append(hist / hist.sum())
        stats.append(uniformity_stats(norm))
    return aggregate_report(hists, stats)


def aggregate_report(hists: Sequence[np.ndarray], stats: Sequence[UniformityStats]) -> dict[str, Any]:
    edges = np.linspace(0.0, 1.0, HIST_BINS + 1)
    mean_hist = np.mean(np.stack(hists), axis=0)
    report: dict[str, Any] = {
        "histogram": {"edges": edges.tolist(), "mass": mean_hist.tolist()},
        "n_images": len(stats),
    }
    for name in ("entropy", "topk_mass", "gini"):
        vals = np.asarray([getattr(s, name) for s in stats])
        report[name] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return report


def write_cde_csv(cmap: CDEMap, path: str | os.PathLike) -> None:
    norm = normalize_cde(cmap)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["row", "col", "cde", "normalized"])
        for k in range(cmap.grid.num_patches):
            idx: PatchIndex = cmap.grid.index(k)
            wr.writerow([idx.row, idx.col, repr(float(cmap.values[k])), repr(float(norm[k]))])


def write_cde_pgm(cmap: CDEMap, path: str | os.PathLike) -> None:
    """Binary PGM (P5), one pixel per patch, value round(normalized * 255)."""
    norm = normalize_cde(cmap).reshape(cmap.grid.rows, cmap.grid.cols)
    pixels = np.round(norm * 255).astype(np.uint8)
    header = f"P5\n{cmap.grid.cols} {cmap.grid.rows}\n255\n".encode("ascii")
    Path(path).write_bytes(header + pixels.tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


def write_report(report: dict[str, Any], path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
