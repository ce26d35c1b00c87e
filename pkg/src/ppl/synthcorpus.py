"""Procedural corpus: natural-looking "real" images, fingerprinted "synthetic"
images, the deterministic reconstruction backend and corruption transforms.

Images are float32 arrays of shape (H, W, C) with values in [0, 1].
"""

from __future__ import annotations

import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np
from PIL import Image
from scipy import ndimage

from .patchgrid import (
    PatchGrid,
    PatchIndex,
    PatchLabelMap,
    as_generator,
    patch_pixel_bounds,
)

log = logging.getLogger(__name__)

FINGERPRINT_KINDS = ("checkerboard-modulation", "spectral-notch", "level-quantization")
DEFAULT_STRENGTH = 0.25
# per-pixel deviation allowed per unit strength
DEVIATION_PER_STRENGTH = 0.25

MANIFEST_NAME = "manifest.jsonl"
CORPUS_META_NAME = "corpus.json"


class CorpusError(Exception):
    """Invalid corpus configuration or unreadable corpus on disk."""


# --------------------------------------------------------------------------
# real images
# --------------------------------------------------------------------------

def _spectral_field(rng: np.random.Generator, h: int, w: int, exponent: float,
                    cutoff: float) -> np.ndarray:
    """Zero-mean, unit-std noise with amplitude ~ f^-exponent and a Gaussian taper."""
    noise = rng.standard_normal((h, w))
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    f = np.sqrt(fx * fx + fy * fy)
    f[0, 0] = 1.0
    gain = f ** (-exponent) * np.exp(-((f / cutoff) ** 2))
    gain[0, 0] = 0.0
    out = np.fft.ifft2(np.fft.fft2(noise) * gain).real
    std = out.std()
    return out / std if std > 0 else out


def _shape_coverage(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Anti-aliased coverage in [0, 1] of one random circle or rotated box."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    cy, cx = rng.uniform(0.15, 0.85) * h, rng.uniform(0.15, 0.85) * w
    size = rng.uniform(0.08, 0.3) * min(h, w)
    if rng.random() < 0.5:
        sdf = np.hypot(yy - cy, xx - cx) - size
    else:
        theta = rng.uniform(0, np.pi)
        c, s = np.cos(theta), np.sin(theta)
        u = (xx - cx) * c + (yy - cy) * s
        v = -(xx - cx) * s + (yy - cy) * c
        hu, hv = size, size * rng.uniform(0.4, 1.0)
        qu, qv = np.abs(u) - hu, np.abs(v) - hv
        outside = np.hypot(np.maximum(qu, 0), np.maximum(qv, 0))
        sdf = outside + np.minimum(np.maximum(qu, qv), 0)
    return np.clip(0.5 - sdf, 0.0, 1.0)


def gen_real(seed: int, h: int, w: int, channels: int = 3, grain: float = 0.01,
             shadow_prob: float = 0.5) -> np.ndarray:
    """Deterministic procedural "photograph".

    A low-pass random field (power falling with frequency) forms the scene,
    1-3 anti-aliased shapes are composited on top and a faint sensor grain is
    added. ``grain`` is the grain standard deviation. With probability
    ``shadow_prob`` the image also gets 1-2 hard-edged black rectangles
    (under the grain), so near-black square regions occur in natural data.
    """
    if h <= 0 or w <= 0 or channels <= 0:
        raise ValueError(f"bad image size {h}x{w}x{channels}")
    rng = np.random.default_rng(seed)
    base = _spectral_field(rng, h, w, exponent=1.0, cutoff=rng.uniform(0.08, 0.2))
    img = np.empty((h, w, channels))
    mean_color = rng.uniform(0.3, 0.7, size=channels)
    contrast = rng.uniform(0.1, 0.2)
    for c in range(channels):
        tint = _spectral_field(rng, h, w, exponent=1.2, cutoff=0.08)
        img[:, :, c] = mean_color[c] + contrast * base + 0.04 * tint
    for _ in range(int(rng.integers(1, 4))):
        alpha = _shape_coverage(rng, h, w)[:, :, None] * rng.uniform(0.6, 0.95)
        color = rng.uniform(0.05, 0.95, size=channels)
        img = img * (1 - alpha) + color * alpha
    if rng.random() < shadow_prob:
        for _ in range(int(rng.integers(1, 3))):
            sh, sw = (int(v) for v in rng.integers(10, 31, size=2))
            top = int(rng.integers(0, max(1, h - sh + 1)))
            left = int(rng.integers(0, max(1, w - sw + 1)))
            img[top:top + sh, left:left + sw, :] = 0.0
    if grain > 0:
        img = img + rng.normal(0.0, grain, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# --------------------------------------------------------------------------
# reconstruction backend
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ArtifactProfile:
    """A named generator: one global fingerprint plus an optional dominant artifact.

    ``dominant_params``: ``amplitude`` (additive grating amplitude), ``size``
    (1-4 patches), placement via ``position`` (fixed top-left ``[row, col]``)
    or ``positions`` (candidates drawn per image; uniform when both are
    absent), and grating ``period``/``orientation``/``random_phase``.
    """

    name: str
    fingerprint_kind: str
    fingerprint_params: dict[str, Any] = field(default_factory=dict)
    dominant_enabled: bool = False
    dominant_params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.fingerprint_kind not in FINGERPRINT_KINDS:
            raise ValueError(f"unknown fingerprint kind {self.fingerprint_kind!r}")
        if self.dominant_enabled:
            size = int(self.dominant_params.get("size", 1))
            if not 1 <= size <= 4:
                raise ValueError(f"dominant region must span 1-4 patches, got {size}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ArtifactProfile":
        known = {"name", "fingerprint_kind", "fingerprint_params", "dominant_enabled", "dominant_params"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown profile keys {sorted(unknown)}")
        return cls(
            name=d["name"],
            fingerprint_kind=d["fingerprint_kind"],
            fingerprint_params=dict(d.get("fingerprint_params", {})),
            dominant_enabled=bool(d.get("dominant_enabled", False)),
            dominant_params=dict(d.get("dominant_params", {})),
        )


DEFAULT_FINGERPRINT_PARAMS: dict[str, dict[str, Any]] = {
    "checkerboard-modulation": {"depth": 0.5},
    "spectral-notch": {"band": [0.25, 0.75], "depth": 1.0},
    "level-quantization": {"depth": 1.0},
}


def default_profiles() -> dict[str, ArtifactProfile]:
    dom = {"amplitude": 0.5, "size": 1, "positions": [[1, 1], [1, 6], [6, 1], [6, 6]], "period": 4}
    profiles = {
        "checker": ArtifactProfile("checker", "checkerboard-modulation"),
        "notch": ArtifactProfile("notch", "spectral-notch"),
        "quant": ArtifactProfile("quant", "level-quantization"),
    }
    for base in list(profiles.values()):
        name = f"{base.name}+dominant"
        profiles[name] = ArtifactProfile(name, base.fingerprint_kind, {}, True, dict(dom))
    return profiles


BAYER_2X2 = np.array([[0.0, 2.0], [3.0, 1.0]])


def checkerboard(h: int, w: int) -> np.ndarray:
    """+-1 pattern, -1 at (0, 0): same polarity as the period-2 component of the Bayer dither."""
    yy, xx = np.mgrid[0:h, 0:w]
    return np.where((yy + xx) % 2 == 0, -1.0, 1.0)


def _band_component(image: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Part of the image whose radial frequency (cycles/pixel, max ~0.707) is in [lo, hi)."""
    h, w = image.shape[:2]
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    f = np.sqrt(fx * fx + fy * fy)
    mask = ((f >= lo) & (f < hi)).astype(np.float64)
    spec = np.fft.fft2(image.astype(np.float64), axes=(0, 1))
    return np.fft.ifft2(spec * mask[:, :, None], axes=(0, 1)).real


def reconstruct(image: np.ndarray, profile: ArtifactProfile,
                strength: float = DEFAULT_STRENGTH) -> np.ndarray:
    """Re-render ``image`` with the profile's global fingerprint.

    The per-pixel change never exceeds ``0.25 * strength``. The dominant
    artifact is not part of reconstruction; see ``inject_dominant_artifact``.
    """
    if not 0.0 < strength <= 1.0:
        raise ValueError(f"strength must be in (0, 1], got {strength}")
    if image.ndim != 3:
        raise ValueError(f"expected an HxWxC image, got shape {image.shape}")
    params = {**DEFAULT_FINGERPRINT_PARAMS[profile.fingerprint_kind], **profile.fingerprint_params}
    bound = DEVIATION_PER_STRENGTH * strength
    depth = float(params["depth"])
    if not 0.0 < depth <= 1.0:
        raise ValueError(f"fingerprint depth must be in (0, 1], got {depth}")
    x = image.astype(np.float64)
    h, w = x.shape[:2]

    if profile.fingerprint_kind == "checkerboard-modulation":
        delta = bound * depth * checkerboard(h, w)[:, :, None]
    elif profile.fingerprint_kind == "spectral-notch":
        lo, hi = params["band"]
        gain = min(1.0, 4.0 * strength * depth)
        delta = np.clip(-gain * _band_component(x, lo, hi), -bound, bound)
    else:
        # ordered (2x2 Bayer) dithered quantization; |change| < step
        step = bound * depth
        offsets = (BAYER_2X2 + 0.5) / 4.0
        thr = np.tile(offsets, (h // 2 + 1, w // 2 + 1))[:h, :w, None]
        delta = np.floor(x / step + thr) * step - x
    out = np.clip(x + delta, 0.0, 1.0)
    return out.astype(image.dtype if image.dtype.kind == "f" else np.float32)


def dominant_region(grid: PatchGrid, profile: ArtifactProfile,
                    rng: np.random.Generator | int | None) -> frozenset[PatchIndex]:
    """Patch set covered by the profile's dominant artifact.

    Placement: ``position`` (fixed top-left), else one of the fitting
    ``positions`` drawn from ``rng``, else uniform over the grid.
    """
    params = profile.dominant_params
    size = int(params.get("size", 1))
    extent = {1: (1, 1), 2: (1, 2), 3: (1, 3), 4: (2, 2)}[size]
    if extent[0] > grid.rows or extent[1] > grid.cols:
        raise ValueError(f"dominant region {extent} does not fit a {grid.rows}x{grid.cols} grid")
    pos = params.get("position")
    if pos is None:
        gen = as_generator(rng)
        # candidates that would not fit this grid are ignored
        candidates = [c for c in params.get("positions") or ()
                      if 0 <= c[0] <= grid.rows - extent[0] and 0 <= c[1] <= grid.cols - extent[1]]
        if candidates:
            pos = candidates[int(gen.integers(len(candidates)))]
        else:
            pos = (int(gen.integers(0, grid.rows - extent[0] + 1)),
                   int(gen.integers(0, grid.cols - extent[1] + 1)))
    r0, c0 = int(pos[0]), int(pos[1])
    cells = [(r0 + dr, c0 + dc) for dr in range(extent[0]) for dc in range(extent[1])]
    return frozenset(grid.check(c) for c in cells)


def grating(size: int, period: int, orientation: float = 0.0, phase: float = 0.25) -> np.ndarray:
    """Square +-1 grating in patch-local coordinates; ``phase`` is in periods."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    theta = np.deg2rad(orientation)
    wave = np.sin(2 * np.pi * ((xx * np.cos(theta) + yy * np.sin(theta)) / period + phase))
    return np.where(wave >= 0, 1.0, -1.0)


def inject_dominant_artifact(image: np.ndarray, grid: PatchGrid, region: Iterable[PatchIndex],
                             amplitude: float, rng: np.random.Generator | int | None = None,
                             period: int = 4, orientation: float = 0.0,
                             random_phase: bool = False) -> np.ndarray:
    """Add a saturated grating inside ``region`` only; pixels elsewhere are untouched.

    The grating is laid out in patch-local coordinates so every region patch
    carries the same pattern. With ``random_phase`` the phase comes from ``rng``.
    """
    region = list(region)
    if not region:
        raise ValueError("dominant artifact region is empty")
    grid.check_image(image)
    phase = float(as_generator(rng).uniform()) if random_phase else 0.25
    out = np.array(image, copy=True)
    if amplitude == 0:
        return out
    pattern = amplitude * grating(grid.patch_size, period, orientation, phase)
    for idx in region:
        top, left, ph, pw = patch_pixel_bounds(grid, idx)
        rs, cs = slice(top, top + ph), slice(left, left + pw)
        patch = out[rs, cs, :].astype(np.float64) + pattern[:, :, None]
        out[rs, cs, :] = np.clip(patch, 0.0, 1.0)
    return out


def apply_dominant(image: np.ndarray, grid: PatchGrid, profile: ArtifactProfile,
                   rng: np.random.Generator | int | None) -> np.ndarray:
    """Place and inject the profile's dominant artifact (no-op when disabled)."""
    if not profile.dominant_enabled:
        return image
    gen = as_generator(rng)
    params = profile.dominant_params
    region = dominant_region(grid, profile, gen)
    return inject_dominant_artifact(
        image, grid, region, float(params.get("amplitude", 0.5)), gen,
        period=int(params.get("period", 4)), orientation=float(params.get("orientation", 0.0)),
        random_phase=bool(params.get("random_phase", False)))


# --------------------------------------------------------------------------
# corruptions
# --------------------------------------------------------------------------

CORRUPTION_RANGES = {
    "gaussian_blur": (0.0, 3.0),
    "resize": (0.5, 1.5),
    "jpeg": (60, 100),
}


class UnsupportedCorruption(Exception):
    """Requested corruption is not available in this environment."""


def jpeg_available() -> bool:
    try:
        from PIL import features
        return bool(features.check("jpg"))
    except Exception:  # pragma: no cover - depends on the Pillow build
        return False


def _resize_bilinear(image: np.ndarray, h: int, w: int) -> np.ndarray:
    import torch
    import torch.nn.functional as F

    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float64)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).numpy()


def corrupt(image: np.ndarray, kind: str, param: float, check_range: bool = True) -> np.ndarray:
    """Apply one robustness corruption; the output keeps the input shape and dtype.

    Parameters outside the standard sweep range are rejected unless
    ``check_range`` is off; physically meaningless values are always rejected.
    """
    if kind not in CORRUPTION_RANGES:
        raise ValueError(f"unsupported corruption kind {kind!r}")
    lo, hi = CORRUPTION_RANGES[kind]
    if check_range and not lo <= param <= hi:
        raise ValueError(f"{kind} parameter {param} outside [{lo}, {hi}]")
    valid = {"gaussian_blur": param >= 0, "resize": param > 0, "jpeg": 1 <= param <= 100}[kind]
    if not valid:
        raise ValueError(f"{kind} parameter {param} is not meaningful")
    x = image.astype(np.float64)
    if kind == "gaussian_blur":
        if param == 0:
            return np.array(image, copy=True)
        out = np.empty_like(x)
        for c in range(x.shape[2]):
            out[:, :, c] = ndimage.gaussian_filter(x[:, :, c], sigma=param, mode="reflect")
    elif kind == "resize":
        h, w = x.shape[:2]
        sh, sw = max(1, int(np.floor(param * h))), max(1, int(np.floor(param * w)))
        out = _resize_bilinear(_resize_bilinear(x, sh, sw), h, w)
    else:
        if not jpeg_available():
            raise UnsupportedCorruption("jpeg codec not available")
        q = int(round(param))
        buf = io.BytesIO()
        Image.fromarray(to_uint8(image)).save(buf, format="JPEG", quality=q)
        buf.seek(0)
        out = np.asarray(Image.open(buf).convert("RGB" if image.shape[2] == 3 else "L"),
                         dtype=np.float64) / 255.0
        out = out.reshape(image.shape)
    return np.clip(out, 0.0, 1.0).astype(image.dtype)


# --------------------------------------------------------------------------
# image files
# --------------------------------------------------------------------------

def to_uint8(image: np.ndarray) -> np.ndarray:
    arr = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    return arr[:, :, 0] if arr.shape[2] == 1 else arr


def quantize_8bit(image: np.ndarray) -> np.ndarray:
    """Snap to the values a PNG round trip would produce."""
    arr = to_uint8(image)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return (arr.astype(np.float32) / 255.0)


def save_png(image: np.ndarray, path: str | os.PathLike) -> None:
    Image.fromarray(to_uint8(image)).save(path, format="PNG")


def load_png_uint8(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def load_png(path: str | os.PathLike) -> np.ndarray:
    return load_png_uint8(path).astype(np.float32) / 255.0


# --------------------------------------------------------------------------
# manifests
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SampleRecord:
    image_path: str
    image_label: int
    patch_labels: tuple[int, ...] | None
    generator_tag: str
    seed: int

    def to_json(self) -> str:
        d = {
            "image_path": self.image_path,
            "image_label": self.image_label,
            "patch_labels": list(self.patch_labels) if self.patch_labels is not None else None,
            "generator_tag": self.generator_tag,
            "seed": self.seed,
        }
        return json.dumps(d, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SampleRecord":
        missing = {"image_path", "image_label", "generator_tag", "seed"} - set(d)
        if missing:
            raise CorpusError(f"manifest record missing fields {sorted(missing)}")
        label = int(d["image_label"])
        if label not in (0, 1):
            raise CorpusError(f"image_label must be 0 or 1, got {label}")
        pl = d.get("patch_labels")
        return cls(str(d["image_path"]), label, tuple(int(v) for v in pl) if pl is not None else None,
                   str(d["generator_tag"]), int(d["seed"]))


@dataclass
class CorpusManifest:
    """Records of one split; ``root`` is the directory image paths are relative to."""

    grid: PatchGrid
    records: list[SampleRecord]
    split: str
    root: Path
    profiles: dict[str, ArtifactProfile] = field(default_factory=dict)
    channels: int = 3

    def image_file(self, record: SampleRecord) -> Path:
        return self.root / record.image_path

    def load_image(self, record: SampleRecord) -> np.ndarray:
        img = load_png(self.image_file(record))
        if img.shape != (self.grid.image_h, self.grid.image_w, self.channels):
            raise CorpusError(f"{record.image_path}: shape {img.shape} does not match corpus geometry")
        return img

    def load_images_uint8(self) -> np.ndarray:
        return np.stack([load_png_uint8(self.image_file(r)) for r in self.records])

    def labels(self) -> np.ndarray:
        return np.asarray([r.image_label for r in self.records], dtype=np.int64)

    def patch_label_map(self, record: SampleRecord) -> PatchLabelMap | None:
        if record.patch_labels is None:
            return None
        return PatchLabelMap(self.grid, record.patch_labels)

    def write(self, path: str | os.PathLike | None = None) -> Path:
        path = Path(path) if path is not None else self.root / MANIFEST_NAME
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(r.to_json() + "\n")
        return path


def load_manifest(path: str | os.PathLike) -> CorpusManifest:
    """Load ``<split>/manifest.jsonl``; geometry comes from the sibling or parent ``corpus.json``."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(SampleRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, TypeError, ValueError) as exc:
                raise CorpusError(f"{path}:{lineno}: {exc}") from exc
    meta = None
    for cand in (path.parent / CORPUS_META_NAME, path.parent.parent / CORPUS_META_NAME):
        if cand.exists():
            meta = json.loads(cand.read_text(encoding="utf-8"))
            break
    if meta is not None:
        grid = PatchGrid(meta["height"], meta["width"], meta["patch_size"])
        channels = int(meta.get("channels", 3))
        profiles = {k: ArtifactProfile.from_dict(v) for k, v in meta.get("profiles", {}).items()}
    else:
        if not records:
            raise CorpusError(f"{path}: empty manifest without corpus.json")
        first = load_png(path.parent / records[0].image_path)
        grid = PatchGrid(first.shape[0], first.shape[1], 14)
        channels = first.shape[2]
        profiles = {}
    return CorpusManifest(grid, records, split=path.parent.name, root=path.parent,
                          profiles=profiles, channels=channels)


# --------------------------------------------------------------------------
# corpus building
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitConfig:
    name: str
    n_real: int
    n_fake: int
    profile: str
    strength: float = DEFAULT_STRENGTH


@dataclass
class CorpusConfig:
    height: int = 112
    width: int = 112
    channels: int = 3
    patch_size: int = 14
    master_seed: int = 0
    grain: float = 0.01
    shadow_prob: float = 0.5
    profiles: dict[str, ArtifactProfile] = field(default_factory=default_profiles)
    # train and in-distribution test share one fingerprint; the other two kinds
    # are held out for cross-fingerprint evaluation
    splits: list[SplitConfig] = field(default_factory=lambda: [
        SplitConfig("train", 1000, 1000, "quant+dominant"),
        SplitConfig("test", 250, 250, "quant+dominant"),
        SplitConfig("test_checker", 250, 250, "checker"),
        SplitConfig("test_notch", 250, 250, "notch"),
    ])

    def validate(self) -> None:
        PatchGrid(self.height, self.width, self.patch_size)
        if not 0.0 <= self.shadow_prob <= 1.0:
            raise CorpusError(f"shadow_prob must be in [0, 1], got {self.shadow_prob}")
        if self.channels not in (1, 3):
            raise CorpusError(f"channels must be 1 or 3, got {self.channels}")
        names = [s.name for s in self.splits]
        if len(set(names)) != len(names):
            raise CorpusError(f"duplicate split names in {names}")
        for s in self.splits:
            if s.n_real < 0 or s.n_fake < 0:
                raise CorpusError(f"split {s.name}: negative counts")
            if s.profile not in self.profiles:
                raise CorpusError(f"split {s.name}: unknown profile {s.profile!r}")
            if not 0 < s.strength <= 1:
                raise CorpusError(f"split {s.name}: strength must be in (0, 1]")
            if not s.name or "/" in s.name or s.name.startswith("."):
                raise CorpusError(f"invalid split name {s.name!r}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "height": self.height,
            "width": self.width,
            "channels": self.channels,
            "patch_size": self.patch_size,
            "master_seed": self.master_seed,
            "grain": self.grain,
            "shadow_prob": self.shadow_prob,
            "profiles": {k: v.to_dict() for k, v in self.profiles.items()},
            "splits": [asdict(s) for s in self.splits],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "CorpusConfig":
        known = {"height", "width", "channels", "patch_size", "master_seed", "grain", "shadow_prob", "profiles",
                 "splits", "split_sizes"}
        unknown = set(d) - known
        if unknown:
            raise CorpusError(f"unknown corpus config keys {sorted(unknown)}")
        cfg = cls()
        for key in ("height", "width", "channels", "patch_size", "master_seed"):
            if key in d:
                setattr(cfg, key, int(d[key]))
        for key in ("grain", "shadow_prob"):
            if key in d:
                setattr(cfg, key, float(d[key]))
        if "profiles" in d:
            profiles = default_profiles()
            for name, p in d["profiles"].items():
                profiles[name] = ArtifactProfile.from_dict({"name": name, **p})
            cfg.profiles = profiles
        if "splits" in d:
            splits = []
            for s in d["splits"]:
                unknown = set(s) - {"name", "n_real", "n_fake", "profile", "strength"}
                if unknown:
                    raise CorpusError(f"unknown split keys {sorted(unknown)}")
                splits.append(SplitConfig(str(s["name"]), int(s["n_real"]), int(s["n_fake"]),
                                          str(s["profile"]), float(s.get("strength", DEFAULT_STRENGTH))))
            cfg.splits = splits
        cfg.validate()
        return cfg


def sample_seed(master_seed: int, split_index: int, record_index: int) -> int:
    ss = np.random.SeedSequence([master_seed, split_index, record_index])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def make_fake(seed: int, cfg: CorpusConfig, profile: ArtifactProfile, strength: float) -> np.ndarray:
    grid = PatchGrid(cfg.height, cfg.width, cfg.patch_size)
    img = gen_real(seed, cfg.height, cfg.width, cfg.channels, cfg.grain, cfg.shadow_prob)
    img = reconstruct(img, profile, strength)
    return apply_dominant(img, grid, profile, np.random.default_rng([seed, 1]))


def _render_job(job: tuple[Path, int, int, CorpusConfig, str, float]) -> None:
    path, seed, label, cfg, profile_name, strength = job
    if label == 0:
        img = gen_real(seed, cfg.height, cfg.width, cfg.channels, cfg.grain, cfg.shadow_prob)
    else:
        img = make_fake(seed, cfg, cfg.profiles[profile_name], strength)
    save_png(img, path)


def worker_count() -> int:
    env = os.environ.get("PPL_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            log.warning("ignoring non-integer PPL_THREADS=%r", env)
    return os.cpu_count() or 1


def build_corpus(cfg: CorpusConfig, out_dir: str | os.PathLike,
                 workers: int | None = None) -> dict[str, CorpusManifest]:
    """Render every split and write ``corpus.json`` plus one ``manifest.jsonl`` per split.

    Each record draws its own seed from (master seed, split index, record
    index), so parallel and serial builds are byte-identical.
    """
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = PatchGrid(cfg.height, cfg.width, cfg.patch_size)
    manifests: dict[str, CorpusManifest] = {}
    jobs = []
    for si, split in enumerate(cfg.splits):
        split_dir = out / split.name
        (split_dir / "images").mkdir(parents=True, exist_ok=True)
        records = []
        for i in range(split.n_real + split.n_fake):
            label = 0 if i < split.n_real else 1
            seed = sample_seed(cfg.master_seed, si, i)
            rel = f"images/{i:06d}.png"
            if label == 0:
                records.append(SampleRecord(rel, 0, None, "real", seed))
            else:
                records.append(SampleRecord(rel, 1, (1,) * grid.num_patches, split.profile, seed))
            jobs.append((split_dir / rel, seed, label, cfg, split.profile, split.strength))
        manifests[split.name] = CorpusManifest(grid, records, split.name, split_dir,
                                               dict(cfg.profiles), cfg.channels)

    n_workers = workers if workers is not None else worker_count()
    if n_workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            list(pool.map(_render_job, jobs, chunksize=16))
    else:
        for job in jobs:
            _render_job(job)

    for m in manifests.values():
        m.write()
    meta = cfg.to_dict()
    meta["split_sizes"] = {s.name: s.n_real + s.n_fake for s in cfg.splits}
    (out / CORPUS_META_NAME).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    log.info("wrote corpus with %d images to %s", len(jobs), out)
    return manifests


def load_corpus(root: str | os.PathLike) -> dict[str, CorpusManifest]:
    root = Path(root)
    meta_path = root / CORPUS_META_NAME
    if not meta_path.exists():
        raise FileNotFoundError(f"no {CORPUS_META_NAME} in {root}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    return {s["name"]: load_manifest(root / s["name"] / MANIFEST_NAME) for s in meta["splits"]}


def radial_power(image: np.ndarray, bins: int = 8) -> np.ndarray:
    """Mean spectral power in ``bins`` radial frequency bands (DC excluded), low to high."""
    gray = image.astype(np.float64).mean(axis=2)
    gray = gray - gray.mean()
    p = np.abs(np.fft.fft2(gray)) ** 2
    h, w = gray.shape
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    f = np.sqrt(fx * fx + fy * fy)
    edges = np.linspace(0, 0.5, bins + 1)
    out = np.empty(bins)
    for b in range(bins):
        sel = (f > edges[b]) & (f <= edges[b + 1])
        out[b] = p[sel].mean()
    return out

