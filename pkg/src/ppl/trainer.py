"""Training loop (naive BCE baseline and the patch-learning modes) and evaluation."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Union

import numpy as np
import torch

from .detector import (
    Detector,
    DetectorConfig,
    batch_delta,
    delta_from_logits,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .losses import (
    ContrastiveConfig,
    InfoNCEConfig,
    bce,
    contrastive_from_dict,
    infonce,
    margin_contrastive,
    total_loss,
)
from .patchgrid import PatchGrid
from .rpr import RPRConfig, apply_batch, pairing_permutation
from .synthcorpus import (
    ArtifactProfile,
    CorpusManifest,
    UnsupportedCorruption,
    corrupt,
    reconstruct,
)

log = logging.getLogger(__name__)

MODES = ("naive", "ppl", "rpr_only", "pcl_only")

DeltaFn = Callable[[np.ndarray], np.ndarray]


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    mode: str = "ppl"
    lam: float = 0.3
    batch_size: int = 32
    epochs: int = 12
    learning_rate: float = 3e-4
    weight_decay: float = 1e-4
    optimizer: str = "adam"
    lr_schedule: str = "cosine"
    seed: int = 0
    rpr: RPRConfig | None = field(default_factory=RPRConfig)
    contrastive: ContrastiveConfig | InfoNCEConfig | None = field(default_factory=ContrastiveConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    deterministic: bool = True
    eval_every: int = 1
    random_crop: bool = False

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        want_rpr = self.mode in ("ppl", "rpr_only")
        want_con = self.mode in ("ppl", "pcl_only")
        if want_rpr != (self.rpr is not None):
            raise ValueError(f"mode={self.mode} requires rpr {'enabled' if want_rpr else 'disabled'}")
        if want_con != (self.contrastive is not None):
            raise ValueError(f"mode={self.mode} requires contrastive {'enabled' if want_con else 'disabled'}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must be in [0, 1], got {self.lam}")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError("batch_size must be an even number >= 2 (batches are label-balanced)")
        if self.epochs < 0 or self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("epochs, learning_rate and weight_decay must be non-negative")
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd_momentum', got {self.optimizer!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if self.rpr is not None and self.rpr.patch_size != self.detector.patch_size:
            raise ValueError("rpr.patch_size must equal detector.patch_size")

    @property
    def effective_lambda(self) -> float:
        return self.lam if self.contrastive is not None else 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "mode": self.mode,
            "lam": self.lam,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "optimizer": self.optimizer,
            "lr_schedule": self.lr_schedule,
            "seed": self.seed,
            "rpr": self.rpr.to_dict() if self.rpr else None,
            "contrastive": self.contrastive.to_dict() if self.contrastive else None,
            "detector": self.detector.to_dict(),
            "deterministic": self.deterministic,
            "eval_every": self.eval_every,
            "random_crop": self.random_crop,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any], profiles: dict[str, ArtifactProfile] | None = None) -> "TrainConfig":
        """Parse a config document. Omitted ``rpr``/``contrastive`` sections follow the mode."""
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys {sorted(unknown)}")
        mode = d.get("mode", "ppl")
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        detector = DetectorConfig.from_dict(d.pop("detector", {}))
        if "rpr" in d:
            rpr = None if d["rpr"] is None else RPRConfig.from_dict(
                {"patch_size": detector.patch_size, **d["rpr"]}, profiles)
        else:
            rpr = RPRConfig(patch_size=detector.patch_size) if mode in ("ppl", "rpr_only") else None
        if "contrastive" in d:
            con = contrastive_from_dict(d["contrastive"])
        else:
            con = ContrastiveConfig() if mode in ("ppl", "pcl_only") else None
        d.update(rpr=rpr, contrastive=con, detector=detector)
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    L_ce: float
    L_con: float
    L_total: float
    train_accuracy: float
    eval_accuracy: float | None
    wall_time: float
    # fields below make the log self-describing
    lam: float = 0.0
    optimizer: str = ""
    learning_rate: float = 0.0
    weight_decay: float = 0.0

    def to_json(self) -> str:
        d = dict(self.__dict__)
        d["lambda"] = d.pop("lam")
        return json.dumps(d, sort_keys=True)


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch != self.records[-1].epoch + 1:
            raise ValueError("epoch numbering must be consecutive")
        self.records.append(rec)


@dataclass
class StepStats:
    l_ce: float
    l_con: float
    l_total: float
    correct: int
    n: int


def configure_threads(deterministic: bool) -> None:
    if deterministic:
        torch.set_num_threads(1)
        return
    env = os.environ.get("PPL_THREADS")
    if env and env.isdigit() and int(env) > 0:
        torch.set_num_threads(int(env))


def make_optimizer(model: Detector, cfg: TrainConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "adam":
        return torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(model.parameters(), lr=cfg.learning_rate, momentum=0.9, weight_decay=cfg.weight_decay)


def make_scheduler(opt: torch.optim.Optimizer, cfg: TrainConfig, total_steps: int):
    """Per-step schedule: constant, or cosine decay from the base rate to zero over the run."""
    if cfg.lr_schedule == "constant" or total_steps == 0:
        return torch.optim.lr_scheduler.LambdaLR(opt, lambda step: 1.0)
    return torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=total_steps)


def _u8_to_float(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float32) / np.float32(255.0)


def crop(image: np.ndarray, top: int, left: int, h: int, w: int) -> np.ndarray:
    return image[..., top:top + h, left:left + w, :]


def center_crop(image: np.ndarray, h: int, w: int) -> np.ndarray:
    """Central ``h x w`` window of one image or a stack (identity when sizes match)."""
    ih, iw = image.shape[-3:-1]
    return crop(image, (ih - h) // 2, (iw - w) // 2, h, w)


def _crop_offset(shape: tuple[int, ...], h: int, w: int, key: list[int]) -> tuple[int, int]:
    rng = np.random.default_rng(key)
    return int(rng.integers(0, shape[0] - h + 1)), int(rng.integers(0, shape[1] - w + 1))


def check_train_geometry(det: DetectorConfig, grid: PatchGrid, channels: int, random_crop: bool) -> None:
    """Corpus images must match the detector, or be at least as large when random cropping."""
    if channels != det.channels:
        raise ValueError(f"corpus has {channels} channels, detector expects {det.channels}")
    if random_crop:
        if grid.image_h < det.image_h or grid.image_w < det.image_w:
            raise ValueError(f"corpus images {grid.image_h}x{grid.image_w} are smaller than the "
                             f"detector input {det.image_h}x{det.image_w}")
    elif (det.image_h, det.image_w, det.patch_size) != (grid.image_h, grid.image_w, grid.patch_size):
        raise ValueError("detector geometry does not match the corpus (set random_crop to train on larger images)")


class _ReconCache:
    def __init__(self, pool_u8: np.ndarray, cfg: RPRConfig):
        self.pool = pool_u8
        self.cfg = cfg
        self._cache: dict[int, np.ndarray] = {}

    def real(self, i: int) -> np.ndarray:
        return _u8_to_float(self.pool[i])

    def recon(self, i: int) -> np.ndarray:
        if i not in self._cache:
            self._cache[i] = reconstruct(self.real(i), self.cfg.profile, self.cfg.strength)
        return self._cache[i]


def compute_losses(model: Detector, images: torch.Tensor, labels: torch.Tensor, patch_labels: torch.Tensor,
                   cfg: TrainConfig, pair_seed: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """One forward pass and the loss composition; returns (total, ce, con, logits)."""
    out = model(images)
    l_ce = bce(out.logits, labels)
    if cfg.contrastive is None:
        l_con = torch.zeros((), dtype=l_ce.dtype)
    elif isinstance(cfg.contrastive, InfoNCEConfig):
        l_con = infonce(out.patch_embeddings, patch_labels, cfg.contrastive, seed=pair_seed)
    else:
        l_con = margin_contrastive(out.patch_embeddings, patch_labels, cfg.contrastive, seed=pair_seed)
    l_total = total_loss(l_con, l_ce, cfg.effective_lambda)
    return l_total, l_ce, l_con, out.logits


def train(cfg: TrainConfig, train_manifest: CorpusManifest, eval_manifest: CorpusManifest | None,
          out_dir: str | os.PathLike, on_epoch: Callable[[EpochRecord], None] | None = None,
          ) -> tuple[Path, TrainLog]:
    """Train a detector and write ``final.ckpt``, ``best.ckpt``, ``train_log.jsonl``, ``train_config.json``."""
    cfg.validate()
    det = cfg.detector
    check_train_geometry(det, train_manifest.grid, train_manifest.channels, cfg.random_crop)
    if eval_manifest is not None:
        check_train_geometry(det, eval_manifest.grid, eval_manifest.channels, cfg.random_crop)
    num_patches = det.num_patches
    configure_threads(cfg.deterministic)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "train_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    log_path = out / "train_log.jsonl"
    log_path.write_text("")

    torch.manual_seed(cfg.seed)
    model = init_params(det, cfg.seed)
    opt = make_optimizer(model, cfg)

    images_u8 = train_manifest.load_images_uint8()
    labels = train_manifest.labels()
    tags = [r.generator_tag for r in train_manifest.records]
    real_idx = np.flatnonzero(labels == 0)
    fake_idx = np.flatnonzero(labels == 1)
    half = cfg.batch_size // 2
    steps = min(len(real_idx), len(fake_idx)) // half
    if steps == 0:
        raise ValueError("not enough samples of each class for one balanced batch")
    cache = _ReconCache(images_u8[real_idx], cfg.rpr) if cfg.rpr is not None else None
    sched = make_scheduler(opt, cfg, cfg.epochs * steps)

    eval_images = None
    if eval_manifest is not None:
        eval_images = center_crop(eval_manifest.load_images_uint8(), det.image_h, det.image_w)
    full_shape = images_u8.shape[1:3]
    train_log = TrainLog()
    best_acc = -1.0
    final_path = out / "final.ckpt"
    best_path = out / "best.ckpt"
    if eval_manifest is None:
        best_path = final_path

    for epoch in range(cfg.epochs):
        t0 = time.time()
        model.train()
        order = np.random.default_rng([cfg.seed, epoch, 1])
        reals = order.permutation(real_idx)
        fakes = order.permutation(fake_idx)
        pairing = pairing_permutation(len(labels), len(real_idx), cfg.seed * 1_000_003 + epoch) \
            if cache is not None else None
        epoch_lr = opt.param_groups[0]["lr"]
        sums = np.zeros(3)
        correct = 0
        seen = 0
        for step in range(steps):
            idx = np.concatenate([reals[step * half:(step + 1) * half], fakes[step * half:(step + 1) * half]])
            batch_imgs = [_u8_to_float(images_u8[i]) for i in idx]
            if cfg.random_crop:
                offsets = [_crop_offset(full_shape, det.image_h, det.image_w, [cfg.seed, epoch, 2, int(i)])
                           for i in idx]
                batch_imgs = [crop(im, top, left, det.image_h, det.image_w)
                              for im, (top, left) in zip(batch_imgs, offsets)]
            batch_labels = [int(labels[i]) for i in idx]
            if cfg.rpr is not None:
                real_fn, recon_fn = cache.real, cache.recon
                if cfg.random_crop:
                    # a real image and its reconstruction share one window per epoch
                    def window(j, _e=epoch):
                        return _crop_offset(full_shape, det.image_h, det.image_w, [cfg.seed, _e, 3, int(j)])

                    real_fn = lambda j: crop(cache.real(j), *window(j), det.image_h, det.image_w)
                    recon_fn = lambda j: crop(cache.recon(j), *window(j), det.image_h, det.image_w)
                aug = apply_batch(batch_imgs, batch_labels, [tags[i] for i in idx], cfg.rpr,
                                  real_pool=real_fn, seed=cfg.seed * 7919 + epoch,
                                  sample_ids=idx.tolist(), pairing=pairing, recon_pool=recon_fn)
                batch_imgs = [a.image for a in aug]
                plabels = np.stack([a.patch_labels.as_array() for a in aug])
            else:
                plabels = np.stack([np.full(num_patches, lab, dtype=np.int64) for lab in batch_labels])
            x = torch.from_numpy(np.stack(batch_imgs))
            y = torch.as_tensor(batch_labels, dtype=torch.long)
            pl = torch.from_numpy(plabels)
            pair_seed = int(np.random.SeedSequence([cfg.seed, epoch, step]).generate_state(1)[0])
            l_total, l_ce, l_con, logits = compute_losses(model, x, y, pl, cfg, pair_seed)
            if not torch.isfinite(l_total):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch} batch {step} (seed {cfg.seed}): "
                    f"L_ce={l_ce.item()} L_con={l_con.item()}")
            with torch.no_grad():
                expected = cfg.effective_lambda * l_con + (1 - cfg.effective_lambda) * l_ce
                if l_total.item() != expected.item():
                    raise AssertionError(f"loss decomposition violated at epoch {epoch} batch {step}")
            opt.zero_grad(set_to_none=True)
            l_total.backward()
            opt.step()
            sched.step()
            sums += (l_ce.item(), l_con.item(), l_total.item())
            with torch.no_grad():
                correct += int(((delta_from_logits(logits) > 0).long() == y).sum())
            seen += len(idx)
        model.eval()
        eval_acc = None
        if eval_images is not None and ((epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1):
            eval_acc = float(_accuracy_u8(model, eval_images, eval_manifest.labels()))
        rec = EpochRecord(epoch, sums[0] / steps, sums[1] / steps, sums[2] / steps, correct / seen, eval_acc,
                          time.time() - t0, cfg.effective_lambda, cfg.optimizer, epoch_lr,
                          cfg.weight_decay)
        train_log.append(rec)
        with open(log_path, "a", encoding="utf-8") as fh:
            fh.write(rec.to_json() + "\n")
        log.info("epoch %d: L_ce=%.4f L_con=%.4f train_acc=%.3f eval_acc=%s (%.1fs)", epoch, rec.L_ce,
                 rec.L_con, rec.train_accuracy, eval_acc, rec.wall_time)
        if on_epoch:
            on_epoch(rec)
        if eval_acc is not None and eval_acc > best_acc:
            best_acc = eval_acc
            save_checkpoint(model, best_path, extra={"epoch": epoch, "eval_accuracy": eval_acc})
    model.eval()
    save_checkpoint(model, final_path, extra={"epoch": cfg.epochs - 1, "mode": cfg.mode, "seed": cfg.seed})
    if eval_images is not None and best_acc < 0:
        save_checkpoint(model, best_path, extra={"epoch": cfg.epochs - 1})
    return final_path, train_log


def _accuracy_u8(model: Detector, images_u8: np.ndarray, labels: np.ndarray) -> float:
    deltas = batch_delta(model, _u8_to_float(images_u8))
    return float(((deltas > 0).astype(np.int64) == labels).mean())


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

Predictor = Union[Detector, str, os.PathLike, DeltaFn]


def as_delta_fn(predictor: Predictor) -> DeltaFn:
    """Normalize a detector, checkpoint path or callable into ``images (B,H,W,C) -> delta (B,)``."""
    if isinstance(predictor, (str, os.PathLike)):
        predictor, _ = load_checkpoint(predictor)
    if isinstance(predictor, Detector):
        model = predictor.eval()
        return lambda images: batch_delta(model, images)
    if callable(predictor):
        return predictor
    raise TypeError(f"cannot predict with {type(predictor).__name__}")


def evaluate(predictor: Predictor, manifest: CorpusManifest, corruption: tuple[str, float] | None = None,
             batch_size: int = 128, check_range: bool = True) -> dict[str, Any]:
    """Accuracy, per-class recall and per-generator-tag accuracy on a manifest.

    ``corruption`` is an optional ``(kind, param)`` applied to every image first.
    Images larger than the detector input are center-cropped after corruption.
    """
    if isinstance(predictor, (str, os.PathLike)):
        predictor, _ = load_checkpoint(predictor)
    fn = as_delta_fn(predictor)
    size = None
    if isinstance(predictor, Detector):
        _check_geometry(predictor.cfg, manifest)
        size = (predictor.cfg.image_h, predictor.cfg.image_w)
    labels = manifest.labels()
    preds = np.empty(len(labels), dtype=np.int64)
    for start in range(0, len(labels), batch_size):
        recs = manifest.records[start:start + batch_size]
        imgs = [manifest.load_image(r) for r in recs]
        if corruption is not None:
            imgs = [corrupt(im, corruption[0], corruption[1], check_range) for im in imgs]
        if size is not None:
            imgs = [center_crop(im, *size) for im in imgs]
        preds[start:start + len(recs)] = (np.asarray(fn(np.stack(imgs))) > 0).astype(np.int64)
    return metrics(preds, labels, [r.generator_tag for r in manifest.records])


def metrics(preds: np.ndarray, labels: np.ndarray, tags: list[str]) -> dict[str, Any]:
    correct = preds == labels
    fake = labels == 1
    real = labels == 0
    per_tag = {}
    for tag in sorted(set(tags)):
        sel = np.asarray([t == tag for t in tags])
        if sel.any():
            per_tag[tag] = float(correct[sel].mean())
    return {
        "accuracy": float(correct.mean()) if len(labels) else float("nan"),
        "recall_fake": float(correct[fake].mean()) if fake.any() else float("nan"),
        "recall_real": float(correct[real].mean()) if real.any() else float("nan"),
        "per_tag": per_tag,
        "n": int(len(labels)),
    }


def _check_geometry(cfg: DetectorConfig, manifest: CorpusManifest) -> None:
    """Manifests may hold larger images than the detector; evaluation then center-crops."""
    g = manifest.grid
    if g.image_h < cfg.image_h or g.image_w < cfg.image_w or manifest.channels != cfg.channels:
        raise ValueError(f"manifest images {g.image_h}x{g.image_w}x{manifest.channels} cannot feed a "
                         f"{cfg.image_h}x{cfg.image_w}x{cfg.channels} detector")


def evaluate_sweep(predictor: Predictor, manifest: CorpusManifest, kind: str, params: list[float],
                   check_range: bool = True) -> list[dict[str, Any]]:
    """One evaluate() record per corruption parameter; unsupported codecs yield a marker record."""
    records = []
    fn = as_delta_fn(predictor)
    for p in params:
        try:
            m = evaluate(fn, manifest, (kind, p), check_range=check_range)
            records.append({"kind": kind, "param": p, **m})
        except UnsupportedCorruption as exc:
            records.append({"kind": kind, "param": p, "unsupported": True, "reason": str(exc)})
    return records


__all__ = [
    "TrainConfig",
    "TrainLog",
    "EpochRecord",
    "DivergenceError",
    "train",
    "evaluate",
    "evaluate_sweep",
    "as_delta_fn",
    "center_crop",
    "check_train_geometry",
    "metrics",
]
