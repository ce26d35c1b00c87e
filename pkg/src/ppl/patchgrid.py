"""Non-overlapping square patch grids over H x W x C images.

Patches are indexed row-major, so flat index ``k = row * cols + col`` matches
the token order of the detector.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator, NamedTuple

import numpy as np

DEFAULT_PATCH_SIZE = 14


class PatchIndex(NamedTuple):
    row: int
    col: int


@dataclass(frozen=True)
class PatchGrid:
    image_h: int
    image_w: int
    patch_size: int = DEFAULT_PATCH_SIZE

    def __post_init__(self) -> None:
        if self.patch_size <= 0 or self.image_h <= 0 or self.image_w <= 0:
            raise ValueError(f"grid dimensions must be positive: {self}")
        if self.image_h % self.patch_size or self.image_w % self.patch_size:
            raise ValueError(
                f"patch size {self.patch_size} does not divide image {self.image_h}x{self.image_w}"
            )

    @property
    def rows(self) -> int:
        return self.image_h // self.patch_size

    @property
    def cols(self) -> int:
        return self.image_w // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.rows * self.cols

    K = num_patches

    def index(self, k: int) -> PatchIndex:
        if not 0 <= k < self.num_patches:
            raise IndexError(f"flat patch index {k} out of range for K={self.num_patches}")
        return PatchIndex(k // self.cols, k % self.cols)

    def flat(self, idx: PatchIndex | tuple[int, int]) -> int:
        row, col = self.check(idx)
        return row * self.cols + col

    def check(self, idx: PatchIndex | tuple[int, int]) -> PatchIndex:
        row, col = int(idx[0]), int(idx[1])
        if not (0 <= row < self.rows and 0 <= col < self.cols):
            raise IndexError(f"patch ({row}, {col}) outside {self.rows}x{self.cols} grid")
        return PatchIndex(row, col)

    def indices(self) -> Iterator[PatchIndex]:
        for k in range(self.num_patches):
            yield self.index(k)

    def check_image(self, image: np.ndarray) -> None:
        if image.ndim != 3 or image.shape[0] != self.image_h or image.shape[1] != self.image_w:
            raise ValueError(
                f"image shape {image.shape} does not match grid {self.image_h}x{self.image_w}xC"
            )


@dataclass(frozen=True)
class PatchLabelMap:
    """Per-patch labels in row-major order: 0 real, 1 synthetic.

    ``EXCLUDED`` (-1) marks patches that take no part in the contrastive
    objective (used by the dropout augmentation).
    """

    grid: PatchGrid
    labels: tuple[int, ...]

    EXCLUDED = -1

    def __post_init__(self) -> None:
        if len(self.labels) != self.grid.num_patches:
            raise ValueError(f"expected {self.grid.num_patches} labels, got {len(self.labels)}")
        bad = set(self.labels) - {0, 1, self.EXCLUDED}
        if bad:
            raise ValueError(f"invalid patch labels {sorted(bad)}")

    @classmethod
    def full(cls, grid: PatchGrid, value: int) -> "PatchLabelMap":
        return cls(grid, (int(value),) * grid.num_patches)

    @classmethod
    def from_selection(cls, grid: PatchGrid, selected: Iterable[PatchIndex], value: int = 1,
                       background: int = 0) -> "PatchLabelMap":
        labels = [background] * grid.num_patches
        for idx in selected:
            labels[grid.flat(idx)] = value
        return cls(grid, tuple(labels))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.labels, dtype=np.int64)

    def count(self, value: int) -> int:
        return sum(1 for v in self.labels if v == value)


def patch_pixel_bounds(grid: PatchGrid, idx: PatchIndex | tuple[int, int]) -> tuple[int, int, int, int]:
    """Return ``(top, left, height, width)`` of a patch."""
    row, col = grid.check(idx)
    p = grid.patch_size
    return row * p, col * p, p, p


def _slices(grid: PatchGrid, idx: PatchIndex | tuple[int, int]) -> tuple[slice, slice]:
    top, left, h, w = patch_pixel_bounds(grid, idx)
    return slice(top, top + h), slice(left, left + w)


def mask_patch(image: np.ndarray, grid: PatchGrid, idx: PatchIndex | tuple[int, int]) -> np.ndarray:
    """Zero-fill one patch (all channels) in raw pixel space; returns a copy."""
    grid.check_image(image)
    out = np.array(image, copy=True)
    rs, cs = _slices(grid, idx)
    out[rs, cs, :] = 0
    return out


def replace_patches(dst: np.ndarray, src: np.ndarray, grid: PatchGrid,
                    selected: Iterable[PatchIndex | tuple[int, int]]) -> np.ndarray:
    """Copy the selected patches of ``src`` into a copy of ``dst``."""
    if dst.shape != src.shape:
        raise ValueError(f"shape mismatch: dst {dst.shape} vs src {src.shape}")
    grid.check_image(dst)
    out = np.array(dst, copy=True)
    for idx in selected:
        rs, cs = _slices(grid, idx)
        out[rs, cs, :] = src[rs, cs, :]
    return out


def as_generator(rng: np.random.Generator | int | None) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def select_random_patches(grid: PatchGrid, count: int,
                          rng: np.random.Generator | int) -> frozenset[PatchIndex]:
    """Draw ``count`` distinct patches uniformly without replacement.

    Uses a partial Fisher-Yates shuffle so the result depends only on the
    generator state.
    """
    k = grid.num_patches
    if not 0 <= count <= k:
        raise ValueError(f"count must be in [0, {k}], got {count}")
    gen = as_generator(rng)
    order = list(range(k))
    for i in range(count):
        j = int(gen.integers(i, k))
        order[i], order[j] = order[j], order[i]
    return frozenset(grid.index(f) for f in order[:count])


def tile_patch(image: np.ndarray, grid: PatchGrid, idx: PatchIndex | tuple[int, int]) -> np.ndarray:
    """Fill the whole image with copies of one patch."""
    grid.check_image(image)
    rs, cs = _slices(grid, idx)
    return np.tile(image[rs, cs, :], (grid.rows, grid.cols, 1))
