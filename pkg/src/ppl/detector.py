"""Small pre-norm vision transformer for real/synthetic classification.

The model returns the class-token embedding, one embedding per patch token
(row-major patch order) and two logits, index ``REAL`` and ``SYNTH``.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

REAL = 0
SYNTH = 1

CHECKPOINT_FORMAT_VERSION = 1
_MAGIC = b"PPLCKPT\x00"


class NonFiniteError(FloatingPointError):
    """A forward pass produced NaN or Inf."""


class CheckpointFormatError(ValueError):
    """The checkpoint file is malformed; ``field`` names the offending part."""

    def __init__(self, field: str, msg: str):
        super().__init__(f"{field}: {msg}")
        self.field = field


@dataclass(frozen=True)
class DetectorConfig:
    image_h: int = 112
    image_w: int = 112
    patch_size: int = 14
    channels: int = 3
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0
    num_classes: int = 2
    pool: str = "cls"

    def __post_init__(self) -> None:
        if self.num_classes != 2:
            raise ValueError("num_classes is fixed at 2")
        if self.patch_size <= 0 or self.image_h % self.patch_size or self.image_w % self.patch_size:
            raise ValueError(f"patch size {self.patch_size} must divide {self.image_h}x{self.image_w}")
        if self.embed_dim <= 0 or self.heads <= 0 or self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} must be divisible by heads {self.heads}")
        if self.depth < 0:
            raise ValueError("depth must be >= 0")
        if self.pool not in ("cls", "mean"):
            raise ValueError(f"pool must be 'cls' or 'mean', got {self.pool!r}")

    @property
    def grid_rows(self) -> int:
        return self.image_h // self.patch_size

    @property
    def grid_cols(self) -> int:
        return self.image_w // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_rows * self.grid_cols

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DetectorConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown detector config keys {sorted(unknown)}")
        return cls(**d)


class DetectorOutput(NamedTuple):
    img_embedding: torch.Tensor  # (B, D)
    patch_embeddings: torch.Tensor  # (B, K, D)
    logits: torch.Tensor  # (B, 2)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, return_attn: bool = False):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        out = self.proj(out)
        return (out, attn) if return_attn else out


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor, return_attn: bool = False):
        a = self.attn(self.norm1(x), return_attn=return_attn)
        if return_attn:
            a, weights = a
        x = x + a
        x = x + self.fc2(F.gelu(self.fc1(self.norm2(x))))
        return (x, weights) if return_attn else x


def patchify(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(B, H, W, C) -> (B, K, P*P*C), patches row-major, pixels row-major within a patch."""
    b, h, w, c = images.shape
    p = patch_size
    x = images.reshape(b, h // p, p, w // p, p, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // p) * (w // p), p * p * c)


class Detector(nn.Module):
    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch_embed = nn.Linear(cfg.patch_dim, d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_patches + 1, d))
        self.blocks = nn.ModuleList(Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, 2)

    def _prepare(self, images: torch.Tensor | np.ndarray) -> torch.Tensor:
        dtype = self.head.weight.dtype
        if isinstance(images, np.ndarray):
            images = torch.from_numpy(np.ascontiguousarray(images))
        images = images.to(dtype)
        if images.dim() == 3:
            images = images.unsqueeze(0)
        cfg = self.cfg
        if images.dim() != 4 or tuple(images.shape[1:]) != (cfg.image_h, cfg.image_w, cfg.channels):
            raise ValueError(
                f"expected images (B, {cfg.image_h}, {cfg.image_w}, {cfg.channels}), got {tuple(images.shape)}"
            )
        return images

    def tokens(self, images: torch.Tensor) -> torch.Tensor:
        x = self.patch_embed(patchify(images, self.cfg.patch_size))
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        return torch.cat([cls, x], dim=1) + self.pos_embed

    def forward(self, images: torch.Tensor | np.ndarray) -> DetectorOutput:
        """Accepts (B, H, W, C) or a single (H, W, C) image with values in [0, 1]."""
        x = self.tokens(self._prepare(images))
        for blk in self.blocks:
            x = blk(x)
        x = self.norm(x)
        patch = x[:, 1:]
        img = x[:, 0] if self.cfg.pool == "cls" else patch.mean(dim=1)
        # row-wise reduction keeps logits bit-identical regardless of batch size
        logits = (img.unsqueeze(1) * self.head.weight).sum(dim=-1) + self.head.bias
        if not torch.isfinite(logits).all() or not torch.isfinite(x).all():
            raise NonFiniteError("non-finite values in detector forward pass")
        return DetectorOutput(img, patch, logits)

    @torch.no_grad()
    def attention_map(self, image: torch.Tensor | np.ndarray) -> np.ndarray:
        """Last block's class-token attention over the K patch tokens, head-averaged, sums to 1."""
        if self.cfg.depth == 0:
            raise ValueError("attention_map needs depth >= 1")
        x = self.tokens(self._prepare(image))
        for blk in self.blocks[:-1]:
            x = blk(x)
        _, attn = self.blocks[-1](x, return_attn=True)
        w = attn[:, :, 0, 1:].mean(dim=1)
        w = w / w.sum(dim=-1, keepdim=True)
        out = w.double().numpy()
        return out[0] if out.shape[0] == 1 else out


def init_params(cfg: DetectorConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> Detector:
    """Build a detector with deterministic initial weights."""
    gen = torch.Generator().manual_seed(int(seed))
    model = Detector(cfg)

    def trunc_normal(t: torch.Tensor, std: float) -> None:
        with torch.no_grad():
            t.copy_(torch.randn(t.shape, generator=gen).clamp_(-2, 2) * std)

    for name, p in model.named_parameters():
        if name.endswith("bias"):
            nn.init.zeros_(p)
        elif "norm" in name:
            nn.init.ones_(p)
        elif name in ("cls_token", "pos_embed"):
            trunc_normal(p, 0.02)
        else:
            fan_in, fan_out = p.shape[1], p.shape[0]
            trunc_normal(p, math.sqrt(2.0 / (fan_in + fan_out)))
    return model.to(dtype)


class Prediction(NamedTuple):
    label: int
    logits: tuple[float, float]
    delta: float


def delta_from_logits(logits: torch.Tensor) -> torch.Tensor:
    return logits[..., SYNTH] - logits[..., REAL]


def label_from_delta(delta: float) -> int:
    return SYNTH if delta > 0 else REAL


@torch.no_grad()
def predict(model: Detector, image: torch.Tensor | np.ndarray) -> Prediction:
    logits = model(image).logits[0]
    delta = float(delta_from_logits(logits))
    return Prediction(label_from_delta(delta), (float(logits[REAL]), float(logits[SYNTH])), delta)


@torch.no_grad()
def batch_delta(model: Detector, images: np.ndarray | torch.Tensor) -> np.ndarray:
    """delta = logit_synth - logit_real for every image in a stack.

    Images go through the model one at a time: matrix-multiply kernels block
    differently for different batch sizes, and inference results must not depend
    on how a caller happens to group its images.
    """
    out = [float(delta_from_logits(model(images[i:i + 1]).logits)[0]) for i in range(len(images))]
    return np.asarray(out, dtype=np.float64)


def parameter_count(cfg: DetectorConfig) -> int:
    d, k, hidden = cfg.embed_dim, cfg.num_patches, int(cfg.embed_dim * cfg.mlp_ratio)
    block = (2 * 2 * d) + (3 * d * d + 3 * d) + (d * d + d) + (d * hidden + hidden) + (hidden * d + d)
    return (cfg.patch_dim * d + d) + d + (k + 1) * d + cfg.depth * block + 2 * d + (2 * d + 2)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------
#
# layout: MAGIC | u64 header_len | header JSON | u64 data_len | float32 LE data | u64 checksum
# checksum: first 8 bytes (little endian) of blake2b over the data section.

def _checksum(data: bytes) -> int:
    return struct.unpack("<Q", hashlib.blake2b(data, digest_size=8).digest())[0]


def save_checkpoint(model: Detector, path: str | os.PathLike, extra: dict[str, Any] | None = None) -> Path:
    path = Path(path)
    tensors = []
    chunks = []
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy().astype("<f4", copy=False)
        tensors.append({"name": name, "shape": list(arr.shape)})
        chunks.append(np.ascontiguousarray(arr).tobytes())
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": model.cfg.to_dict(),
        "tensors": tensors,
    }
    if extra:
        header["extra"] = extra
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    data = b"".join(chunks)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        fh.write(struct.pack("<Q", len(data)))
        fh.write(data)
        fh.write(struct.pack("<Q", _checksum(data)))
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | os.PathLike) -> tuple[Detector, DetectorConfig]:
    raw = Path(path).read_bytes()
    pos = 0

    def take(n: int, field: str) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointFormatError(field, f"file truncated (need {n} bytes at offset {pos}, size {len(raw)})")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if take(len(_MAGIC), "magic") != _MAGIC:
        raise CheckpointFormatError("magic", "not a detector checkpoint")
    (hlen,) = struct.unpack("<Q", take(8, "header_length"))
    try:
        header = json.loads(take(hlen, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError("header", f"invalid JSON ({exc})") from exc
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointFormatError("format_version", f"unsupported value {header.get('format_version')!r}")
    try:
        cfg = DetectorConfig.from_dict(header["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointFormatError("config", str(exc)) from exc
    (dlen,) = struct.unpack("<Q", take(8, "data_length"))
    data = take(dlen, "data")
    (checksum,) = struct.unpack("<Q", take(8, "checksum"))
    if pos != len(raw):
        raise CheckpointFormatError("trailer", f"{len(raw) - pos} unexpected trailing bytes")
    if checksum != _checksum(data):
        raise CheckpointFormatError("checksum", "data section checksum mismatch")

    model = Detector(cfg)
    expected = model.state_dict()
    listed = header.get("tensors")
    if not isinstance(listed, list) or [t.get("name") for t in listed] != list(expected):
        raise CheckpointFormatError("tensors", "tensor list does not match the detector config")
    state = {}
    offset = 0
    for entry in listed:
        shape = tuple(entry["shape"])
        if shape != tuple(expected[entry["name"]].shape):
            raise CheckpointFormatError(f"tensors.{entry['name']}", f"shape {shape} does not match config")
        n = int(np.prod(shape)) * 4
        if offset + n > len(data):
            raise CheckpointFormatError(f"tensors.{entry['name']}", "data section too short")
        arr = np.frombuffer(data, dtype="<f4", count=n // 4, offset=offset).reshape(shape)
        state[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
        offset += n
    if offset != len(data):
        raise CheckpointFormatError("data", f"{len(data) - offset} bytes not claimed by any tensor")
    model.load_state_dict(state)
    model.eval()
    return model, cfg


def read_checkpoint_extra(path: str | os.PathLike) -> dict[str, Any]:
    raw = Path(path).read_bytes()
    (hlen,) = struct.unpack("<Q", raw[len(_MAGIC):len(_MAGIC) + 8])
    header = json.loads(raw[len(_MAGIC) + 8:len(_MAGIC) + 8 + hlen])
    return header.get("extra", {})
