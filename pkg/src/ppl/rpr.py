"""Randomized Patch Reconstruction and its ablation variants.

An RPR sample is a real image in which a random subset of patches has been
swapped for the corresponding patches of its reconstruction, so that only
those patches carry the synthetic fingerprint. The patch label map records
exactly which patches were swapped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from .patchgrid import (
    PatchGrid,
    PatchIndex,
    PatchLabelMap,
    mask_patch,
    replace_patches,
    select_random_patches,
)
from .synthcorpus import DEFAULT_STRENGTH, ArtifactProfile, default_profiles, quantize_8bit, reconstruct

VARIANTS = ("random", "fixed_half_upper", "fixed_half_lower", "fixed_half_left", "fixed_half_right", "dropout")


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class RPRConfig:
    apply_prob: float = 0.9
    ratio: float = 0.5
    patch_size: int = 14
    variant: str = "random"
    dropout_rate: float = 0.15
    strength: float = DEFAULT_STRENGTH
    profile: ArtifactProfile = field(default_factory=lambda: default_profiles()["quant"])
    # snap reconstructed pixels to the 8-bit grid so augmented images match stored PNGs
    quantize: bool = True

    def __post_init__(self) -> None:
        for name in ("apply_prob", "ratio", "dropout_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown RPR variant {self.variant!r}")
        if not 0.0 < self.strength <= 1.0:
            raise ValueError(f"strength must be in (0, 1], got {self.strength}")
        if self.patch_size <= 0:
            raise ValueError("patch_size must be positive")

    def to_dict(self) -> dict[str, Any]:
        return {
            "apply_prob": self.apply_prob,
            "ratio": self.ratio,
            "patch_size": self.patch_size,
            "variant": self.variant,
            "dropout_rate": self.dropout_rate,
            "strength": self.strength,
            "profile": self.profile.to_dict(),
            "quantize": self.quantize,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any], profiles: dict[str, ArtifactProfile] | None = None) -> "RPRConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown rpr config keys {sorted(unknown)}")
        prof = d.get("profile")
        if isinstance(prof, str):
            registry = profiles if profiles is not None else default_profiles()
            if prof not in registry:
                raise ValueError(f"unknown profile {prof!r}")
            d["profile"] = registry[prof]
        elif isinstance(prof, dict):
            d["profile"] = ArtifactProfile.from_dict(prof)
        return cls(**d)

    def tag(self) -> str:
        return f"rpr:{self.variant}:{self.ratio:g}"


def _grid_for(image: np.ndarray, patch_size: int) -> PatchGrid:
    if image.ndim != 3:
        raise ValueError(f"expected an HxWxC image, got shape {image.shape}")
    return PatchGrid(image.shape[0], image.shape[1], patch_size)


def _hybrid(real_image: np.ndarray, recon: np.ndarray, grid: PatchGrid, selected: Iterable[PatchIndex],
            quantize: bool) -> np.ndarray:
    if quantize:
        recon = quantize_8bit(recon).astype(real_image.dtype, copy=False)
    return replace_patches(real_image, recon, grid, selected)


def rpr_transform(real_image: np.ndarray, cfg: RPRConfig, rng: np.random.Generator | int,
                  recon: np.ndarray | None = None,
                  select: Callable[[PatchGrid, int], Iterable[PatchIndex]] | None = None,
                  ) -> tuple[np.ndarray, PatchLabelMap]:
    """Swap ``round(ratio * K)`` random patches of a real image for their reconstruction.

    ``recon`` may carry a precomputed ``reconstruct(real_image, ...)``; ``select``
    overrides the random patch choice (a test hook).
    """
    grid = _grid_for(real_image, cfg.patch_size)
    if recon is None:
        recon = reconstruct(real_image, cfg.profile, cfg.strength)
    elif recon.shape != real_image.shape:
        raise ValueError(f"reconstruction shape {recon.shape} does not match image {real_image.shape}")
    count = round_half_up(cfg.ratio * grid.num_patches)
    selected = frozenset(select(grid, count)) if select else select_random_patches(grid, count, rng)
    out = _hybrid(real_image, recon, grid, selected, cfg.quantize)
    return out, PatchLabelMap.from_selection(grid, selected)


def half_selection(grid: PatchGrid, variant: str) -> frozenset[PatchIndex]:
    """The contiguous half of the grid named by a fixed_half_* variant."""
    if variant in ("fixed_half_upper", "fixed_half_lower"):
        if grid.rows % 2:
            raise ValueError(f"{variant} needs an even number of grid rows, got {grid.rows}")
        half = grid.rows // 2
        rows = range(half) if variant == "fixed_half_upper" else range(half, grid.rows)
        return frozenset(PatchIndex(r, c) for r in rows for c in range(grid.cols))
    if variant in ("fixed_half_left", "fixed_half_right"):
        if grid.cols % 2:
            raise ValueError(f"{variant} needs an even number of grid columns, got {grid.cols}")
        half = grid.cols // 2
        cols = range(half) if variant == "fixed_half_left" else range(half, grid.cols)
        return frozenset(PatchIndex(r, c) for r in range(grid.rows) for c in cols)
    raise ValueError(f"{variant!r} is not a fixed-half variant")


def fixed_position_transform(real_image: np.ndarray, cfg: RPRConfig,
                             recon: np.ndarray | None = None) -> tuple[np.ndarray, PatchLabelMap]:
    grid = _grid_for(real_image, cfg.patch_size)
    selected = half_selection(grid, cfg.variant)
    if recon is None:
        recon = reconstruct(real_image, cfg.profile, cfg.strength)
    out = _hybrid(real_image, recon, grid, selected, cfg.quantize)
    return out, PatchLabelMap.from_selection(grid, selected)


def patch_dropout_transform(fake_image: np.ndarray, cfg: RPRConfig,
                            rng: np.random.Generator | int) -> tuple[np.ndarray, PatchLabelMap]:
    """Zero-fill ``round(dropout_rate * K)`` random patches of a synthetic image.

    Dropped patches are labelled ``EXCLUDED``; survivors keep label 1.
    """
    grid = _grid_for(fake_image, cfg.patch_size)
    count = round_half_up(cfg.dropout_rate * grid.num_patches)
    dropped = select_random_patches(grid, count, rng)
    out = np.array(fake_image, copy=True)
    for idx in dropped:
        out = mask_patch(out, grid, idx)
    labels = PatchLabelMap.from_selection(grid, dropped, value=PatchLabelMap.EXCLUDED, background=1)
    return out, labels


def transform(image: np.ndarray, cfg: RPRConfig, rng: np.random.Generator | int,
              recon: np.ndarray | None = None) -> tuple[np.ndarray, PatchLabelMap]:
    """Dispatch on ``cfg.variant``. For ``dropout`` the input is a synthetic image."""
    if cfg.variant == "random":
        return rpr_transform(image, cfg, rng, recon=recon)
    if cfg.variant == "dropout":
        return patch_dropout_transform(image, cfg, rng)
    return fixed_position_transform(image, cfg, recon=recon)


def sample_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for one (seed, *keys) tuple, e.g. (seed, epoch, sample)."""
    return np.random.default_rng([int(seed), *(int(k) for k in keys)])


@dataclass
class AugmentedSample:
    image: np.ndarray
    image_label: int
    patch_labels: PatchLabelMap
    replaced: bool
    tag: str


def apply_batch(images: Sequence[np.ndarray], labels: Sequence[int], tags: Sequence[str], cfg: RPRConfig,
                real_pool: Sequence[np.ndarray] | Callable[[int], np.ndarray], seed: int,
                sample_ids: Sequence[int] | None = None, pairing: Sequence[int] | None = None,
                recon_pool: Callable[[int], np.ndarray] | None = None,
                ) -> list[AugmentedSample]:
    """Annotate a batch with patch labels and swap fake samples for RPR images.

    Each fake sample is, with probability ``apply_prob``, replaced by an RPR
    image built from its paired real image (``pairing[sample_id]`` indexes
    ``real_pool``; default pairing is a seeded permutation). All randomness for
    a sample comes from ``(seed, sample_id)``, so results do not depend on
    batch composition or worker scheduling.
    """
    if not (len(images) == len(labels) == len(tags)):
        raise ValueError("images, labels and tags must have equal length")
    ids = list(sample_ids) if sample_ids is not None else list(range(len(images)))
    get_real = real_pool if callable(real_pool) else real_pool.__getitem__
    pool_size = None if callable(real_pool) else len(real_pool)
    out = []
    for image, label, tag, sid in zip(images, labels, tags, ids):
        grid = _grid_for(image, cfg.patch_size)
        if label == 0:
            out.append(AugmentedSample(image, 0, PatchLabelMap.full(grid, 0), False, tag))
            continue
        rng = sample_rng(seed, sid)
        if rng.random() >= cfg.apply_prob:
            out.append(AugmentedSample(image, 1, PatchLabelMap.full(grid, 1), False, tag))
            continue
        if cfg.variant == "dropout":
            img, pl = patch_dropout_transform(image, cfg, rng)
        else:
            if pairing is not None:
                j = int(pairing[sid])
            else:
                if not pool_size:
                    raise ValueError("real pool is empty")
                j = int(rng.integers(pool_size))
            real = get_real(j)
            recon = recon_pool(j) if recon_pool is not None else None
            img, pl = transform(real, cfg, rng, recon=recon)
        out.append(AugmentedSample(img, 1, pl, True, cfg.tag()))
    return out


def pairing_permutation(n_samples: int, pool_size: int, seed: int) -> np.ndarray:
    """Seeded assignment of a real-pool index to every sample id."""
    if pool_size <= 0:
        raise ValueError("real pool is empty")
    rng = np.random.default_rng([int(seed), 0x5EED])
    reps = -(-n_samples // pool_size)
    return np.concatenate([rng.permutation(pool_size) for _ in range(reps)])[:n_samples]

