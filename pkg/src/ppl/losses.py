"""Training objectives: patch-wise margin contrastive loss, InfoNCE, 2-class
cross-entropy and their weighted total."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Any

import numpy as np
import torch
import torch.nn.functional as F

from .patchgrid import PatchLabelMap

EXCLUDED = PatchLabelMap.EXCLUDED


@dataclass(frozen=True)
class ContrastiveConfig:
    margin: float = 1.0
    distance: str = "euclidean"
    pair_normalization: str = "mean"
    max_pairs: int | None = 4096

    def __post_init__(self) -> None:
        if self.margin < 0:
            raise ValueError(f"margin must be >= 0, got {self.margin}")
        if self.distance not in ("euclidean", "cosine"):
            raise ValueError(f"distance must be 'euclidean' or 'cosine', got {self.distance!r}")
        if self.pair_normalization not in ("mean", "sum"):
            raise ValueError(f"pair_normalization must be 'mean' or 'sum', got {self.pair_normalization!r}")
        if self.max_pairs is not None and self.max_pairs < 1:
            raise ValueError("max_pairs must be >= 1 when set")

    kind = "margin"

    def to_dict(self) -> dict[str, Any]:
        return {"kind": "margin", **asdict(self)}


@dataclass(frozen=True)
class InfoNCEConfig:
    temperature: float = 0.5

    def __post_init__(self) -> None:
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")

    kind = "infonce"

    def to_dict(self) -> dict[str, Any]:
        return {"kind": "infonce", **asdict(self)}


def contrastive_from_dict(d: dict[str, Any] | None) -> ContrastiveConfig | InfoNCEConfig | None:
    if d is None:
        return None
    d = dict(d)
    kind = d.pop("kind", "margin")
    if kind == "margin":
        return ContrastiveConfig(**d)
    if kind == "infonce":
        return InfoNCEConfig(**d)
    raise ValueError(f"unknown contrastive kind {kind!r}")


def _pool(embeddings: torch.Tensor, labels: torch.Tensor | np.ndarray) -> tuple[torch.Tensor, torch.Tensor]:
    """Flatten (B, K, D) tokens into one pool, dropping excluded tokens."""
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long) if isinstance(labels, np.ndarray) else labels
    if embeddings.shape[:-1] != labels.shape:
        raise ValueError(f"embeddings {tuple(embeddings.shape)} and labels {tuple(labels.shape)} disagree")
    emb = embeddings.reshape(-1, embeddings.shape[-1])
    lab = labels.reshape(-1).to(embeddings.device)
    keep = lab != EXCLUDED
    return emb[keep], lab[keep]


def _unordered_pair(flat: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Map linear indices in [0, n(n-1)/2) to pairs (i, j), i < j, row by row."""
    # row i starts at offset i*n - i*(i+1)/2
    i = np.floor((2 * n - 1 - np.sqrt((2 * n - 1) ** 2 - 8 * flat.astype(np.float64))) / 2).astype(np.int64)
    start = i * n - i * (i + 1) // 2
    # guard against float rounding at row boundaries
    too_far = flat < start
    i[too_far] -= 1
    start = i * n - i * (i + 1) // 2
    nxt = (i + 1) * n - (i + 1) * (i + 2) // 2
    back = flat >= nxt
    i[back] += 1
    start = i * n - i * (i + 1) // 2
    j = flat - start + i + 1
    return i, j


def pair_indices(n: int, max_pairs: int | None, seed: int | np.random.Generator | None) -> tuple[np.ndarray, np.ndarray]:
    """All unordered pairs i < j, or ``max_pairs`` of them sampled without replacement."""
    total = n * (n - 1) // 2
    if max_pairs is None or max_pairs >= total:
        i, j = np.triu_indices(n, k=1)
        return i.astype(np.int64), j.astype(np.int64)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    flat = np.sort(rng.choice(total, size=max_pairs, replace=False))
    return _unordered_pair(flat, n)


def _pair_distance_sq(a: torch.Tensor, b: torch.Tensor, distance: str) -> torch.Tensor:
    if distance == "euclidean":
        return (a - b).pow(2).sum(dim=-1)
    d = 1.0 - F.cosine_similarity(a, b, dim=-1, eps=1e-12)
    return d * d


def margin_contrastive(patch_embeddings: torch.Tensor, patch_labels: torch.Tensor | np.ndarray,
                       cfg: ContrastiveConfig = ContrastiveConfig(), seed: int | np.random.Generator | None = 0,
                       ) -> torch.Tensor:
    """Margin contrastive loss over all non-excluded patch tokens of a batch.

    Same-label pairs cost ``d^2``; cross-label pairs cost ``max(0, margin - d^2)``.
    Pairs are unordered; ``seed`` drives the pair sampling when ``max_pairs``
    caps the pair set.
    """
    emb, lab = _pool(patch_embeddings, patch_labels)
    n = emb.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 usable tokens, got {n}")
    if not torch.isfinite(emb).all():
        raise ValueError("NaN or Inf in patch embeddings")
    i, j = pair_indices(n, cfg.max_pairs, seed)
    ii, jj = torch.from_numpy(i), torch.from_numpy(j)
    d2 = _pair_distance_sq(emb[ii], emb[jj], cfg.distance)
    same = (lab[ii] == lab[jj]).to(d2.dtype)
    per_pair = same * d2 + (1 - same) * torch.clamp(cfg.margin - d2, min=0)
    total = per_pair.sum()
    return total / len(i) if cfg.pair_normalization == "mean" else total


def infonce(embeddings: torch.Tensor, labels: torch.Tensor | np.ndarray, cfg: InfoNCEConfig = InfoNCEConfig(),
            seed: int | np.random.Generator | None = 0) -> torch.Tensor:
    """InfoNCE with one sampled same-label positive per anchor.

    ``embeddings`` may be (N, D) or (B, K, D); excluded tokens are dropped.
    Anchors without a positive partner are skipped.
    """
    if embeddings.dim() == 2:
        lab = torch.as_tensor(np.asarray(labels), dtype=torch.long) if isinstance(labels, np.ndarray) else labels
        keep = lab != EXCLUDED
        emb, lab = embeddings[keep], lab[keep]
    else:
        emb, lab = _pool(embeddings, labels)
    n = emb.shape[0]
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    lab_np = lab.cpu().numpy()
    anchors, positives = [], []
    for a in range(n):
        partners = np.flatnonzero((lab_np == lab_np[a]) & (np.arange(n) != a))
        if len(partners) == 0:
            continue
        anchors.append(a)
        positives.append(int(partners[rng.integers(len(partners))]))
    if not anchors:
        raise ValueError("no anchor has a positive partner")
    z = F.normalize(emb, dim=-1, eps=1e-12)
    sim = (z @ z.t()) / cfg.temperature
    a = torch.as_tensor(anchors)
    p = torch.as_tensor(positives)
    eye = torch.eye(n, dtype=torch.bool)
    logits = sim[a].masked_fill(eye[a], float("-inf"))
    return (torch.logsumexp(logits, dim=-1) - sim[a, p]).mean()


def bce(logits: torch.Tensor, labels: torch.Tensor | int) -> torch.Tensor:
    """2-class softmax cross-entropy; ``logits`` (2,) or (B, 2). Batched input returns the mean."""
    if not torch.isfinite(logits).all():
        raise ValueError("non-finite logits")
    single = logits.dim() == 1
    logits2 = logits.unsqueeze(0) if single else logits
    target = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    if logits2.shape[-1] != 2 or target.shape[0] != logits2.shape[0]:
        raise ValueError(f"logits {tuple(logits.shape)} do not match labels {tuple(target.shape)}")
    return F.cross_entropy(logits2, target)


def total_loss(l_con: torch.Tensor | float, l_ce: torch.Tensor | float, lam: float) -> torch.Tensor | float:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    return lam * l_con + (1 - lam) * l_ce
