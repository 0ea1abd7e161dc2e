"""Stage 1: context-slab U-Net that proposes per-pixel candidate masks.

The model consumes a 9-channel slab (the center slice plus 4 neighbors on
each side) and emits a probability map for the center slice. Training
minimizes continuous dice loss against sparse contour masks.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from . import preprocess as pp
from . import tensor as T
from .nn import Adam, BatchNorm2d, Conv2d, Module, PlateauScheduler
from .tensor import Tensor
from .volume import DataError, dataset_manifest

log = logging.getLogger(__name__)

DICE_EPS = 1e-6


@dataclass
class UNetConfig:
    depth: int = 4
    base_channels: int = 16
    in_channels: int = 9
    out_channels: int = 1

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"unet depth must be >= 1, got {self.depth}")


class DoubleConv(Module):
    """conv3x3 + batchnorm + relu, twice."""

    def __init__(self, in_ch, out_ch, rng, dtype):
        super().__init__()
        self.conv1 = Conv2d(in_ch, out_ch, 3, rng, padding=1, dtype=dtype)
        self.bn1 = BatchNorm2d(out_ch, dtype=dtype)
        self.conv2 = Conv2d(out_ch, out_ch, 3, rng, padding=1, dtype=dtype)
        self.bn2 = BatchNorm2d(out_ch, dtype=dtype)

    def forward(self, x):
        x = T.relu(self.bn1(self.conv1(x)))
        return T.relu(self.bn2(self.conv2(x)))


class UNetModel(Module):
    """Encoder/decoder with channel doubling and skip concatenation.

    Encoder level i produces base_channels * 2**i channels at 1/2**i
    resolution; the decoder mirrors the encoder schedule.
    """

    def __init__(self, config: UNetConfig, rng, dtype=np.float64):
        super().__init__()
        self.config = config
        b = config.base_channels
        enc_channels = [b * 2**i for i in range(config.depth)]
        self.encoder = []
        in_ch = config.in_channels
        for ch in enc_channels:
            self.encoder.append(DoubleConv(in_ch, ch, rng, dtype))
            in_ch = ch
        self.bottleneck = DoubleConv(enc_channels[-1], enc_channels[-1] * 2, rng, dtype)
        self.decoder = []
        up_ch = enc_channels[-1] * 2
        for ch in reversed(enc_channels):
            self.decoder.append(DoubleConv(up_ch + ch, ch, rng, dtype))
            up_ch = ch
        self.head = Conv2d(enc_channels[0], config.out_channels, 1, rng, dtype=dtype)

    def forward(self, x: Tensor, return_features: bool = False):
        h, w = x.shape[2], x.shape[3]
        factor = 2**self.config.depth
        if h % factor or w % factor:
            raise ValueError(
                f"unet input spatial dims must be divisible by {factor}, got {h}x{w}"
            )
        skips = []
        for block in self.encoder:
            x = block(x)
            skips.append(x)
            x = T.pool2d(x, "max", 2)
        x = self.bottleneck(x)
        for block, skip in zip(self.decoder, reversed(skips)):
            x = T.upsample2x(x)
            x = block(T.concat([skip, x], axis=1))
        out = T.sigmoid(self.head(x))
        if return_features:
            return out, skips
        return out


def unet_forward(model: UNetModel, slab: Tensor) -> Tensor:
    return model(slab)


def dice_coefficient(pred, target, eps: float = DICE_EPS):
    """Continuous dice 2*sum(p*t) / (sum(p^2) + sum(t^2)), smoothed by eps.

    The smoothing makes two empty masks score 1. Returns a scalar Tensor so
    the value is differentiable w.r.t. the prediction.
    """
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != target.shape:
        raise ValueError(f"dice shape mismatch: pred {pred.shape} vs target {target.shape}")
    num = T.reduce_sum(T.mul(pred, target)) * 2.0 + eps
    den = T.reduce_sum(T.mul(pred, pred)) + T.reduce_sum(T.mul(target, target)) + eps
    return T.div(num, den)


def dice_loss(pred, target, eps: float = DICE_EPS):
    return 1.0 - dice_coefficient(pred, target, eps)


def predict_volume_mask(model: UNetModel, volume, batch_size: int = 8) -> np.ndarray:
    """Per-slice candidate probability maps for a resampled, normalized volume."""
    vox = volume.voxels
    d = vox.shape[0]
    model.eval()
    dtype = model.head.weight.dtype
    out = np.empty(vox.shape, dtype=np.float32)
    with T.no_grad():
        for start in range(0, d, batch_size):
            centers = range(start, min(start + batch_size, d))
            slabs = np.stack(
                [vox[pp.slab_channel_indices(c, d)] for c in centers]
            ).astype(dtype)
            probs = model(Tensor(slabs))
            out[start : start + len(slabs)] = probs.data[:, 0].astype(np.float32)
    return out


# -- training ------------------------------------------------------------------


def _study_slabs(entry, pre_cfg, negatives_per_positive, rng):
    volume, annotation, _ = entry.load()
    resampled = pp.resample_z(volume, pre_cfg.target_spacing_mm)
    remapped = pp.remap_annotation_indices(
        annotation, volume.slice_spacing_mm, pre_cfg.target_spacing_mm, resampled.voxels.shape[0]
    )
    normalized = pp.normalize_intensity(resampled, *pre_cfg.window)
    return pp.extract_slabs(normalized, remapped, negatives_per_positive, rng)


def _batch_dice(model, slabs, indices, dtype):
    channels = np.stack([slabs[i].channels for i in indices]).astype(dtype)
    targets = np.stack([slabs[i].target_mask for i in indices]).astype(dtype)
    pred = model(Tensor(channels))
    return pred, Tensor(targets)


def train_stage1(cfg, run_dir: Path, dtype=np.float32) -> dict:
    """Train the mask generator; writes metrics.csv, best.ckpt, final.ckpt.

    Returns a summary dict with the metric history and best validation dice.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    entries = dataset_manifest(cfg.data.root)
    train_entries = [e for e in entries if e.split == "train"]
    val_entries = [e for e in entries if e.split == "val"]
    if not train_entries:
        raise DataError("training split is empty")
    if not any(e.label.y == 1 for e in train_entries):
        raise DataError("training split has no positive studies")

    s1 = cfg.stage1
    train_slabs = []
    for i, entry in enumerate(train_entries):
        rng = np.random.default_rng([cfg.seed, 301, i])
        train_slabs.extend(_study_slabs(entry, cfg.preprocess, s1.negatives_per_positive, rng))
    val_slabs = []
    for i, entry in enumerate(val_entries):
        rng = np.random.default_rng([cfg.seed, 302, i])
        val_slabs.extend(_study_slabs(entry, cfg.preprocess, 0.0, rng))
    log.info("stage1: %d training slabs, %d validation slabs", len(train_slabs), len(val_slabs))

    unet_cfg = UNetConfig(depth=s1.depth, base_channels=s1.base_channels)
    model = UNetModel(unet_cfg, np.random.default_rng([cfg.seed, 303]), dtype=dtype)
    log.info("stage1 model parameters: %d", model.param_count())

    optimizer = Adam(list(model.named_parameters()), lr=s1.lr, weight_decay=s1.weight_decay)
    scheduler = PlateauScheduler(optimizer, s1.patience, s1.decay_factor, s1.min_lr)
    shuffle_rng = np.random.default_rng([cfg.seed, 304])

    def validation_dice() -> float:
        if not val_slabs:
            return float("nan")
        model.eval()
        dices = []
        with T.no_grad():
            for start in range(0, len(val_slabs), s1.batch_size):
                idx = range(start, min(start + s1.batch_size, len(val_slabs)))
                pred, target = _batch_dice(model, val_slabs, idx, dtype)
                for j in range(pred.shape[0]):
                    p = pred.data[j : j + 1]
                    t = target.data[j : j + 1]
                    dices.append(dice_coefficient(Tensor(p), Tensor(t)).item())
        return float(np.mean(dices))

    history = []
    best_val = -np.inf
    order = np.arange(len(train_slabs))
    for epoch in range(1, s1.epochs + 1):
        t0 = time.monotonic()
        model.train()
        shuffle_rng.shuffle(order)
        losses = []
        for start in range(0, len(order), s1.batch_size):
            idx = order[start : start + s1.batch_size]
            optimizer.zero_grad()
            pred, target = _batch_dice(model, train_slabs, idx, dtype)
            loss = dice_loss(pred, target)
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
        train_loss = float(np.mean(losses))
        val_dice = validation_dice()
        lr = scheduler.step(1.0 - val_dice if not np.isnan(val_dice) else train_loss)
        history.append({"epoch": epoch, "train_dice_loss": train_loss, "val_dice": val_dice, "lr": lr})
        log.info(
            "stage1 epoch %d: train_dice_loss=%.4f val_dice=%.4f lr=%.2e (%.1fs)",
            epoch, train_loss, val_dice, lr, time.monotonic() - t0,
        )
        if val_dice > best_val or np.isnan(val_dice):
            if not np.isnan(val_dice):
                best_val = val_dice
            save_stage1(run_dir / "best.ckpt", model, unet_cfg, epoch)

    save_stage1(run_dir / "final.ckpt", model, unet_cfg, s1.epochs)
    _write_metrics_csv(run_dir / "metrics.csv", ["epoch", "train_dice_loss", "val_dice", "lr"], history)
    return {"history": history, "best_val_dice": best_val, "param_count": model.param_count()}


def save_stage1(path, model: UNetModel, config: UNetConfig, step: int) -> None:
    meta = {
        "kind": "stage1",
        "unet": {
            "depth": config.depth,
            "base_channels": config.base_channels,
            "in_channels": config.in_channels,
            "out_channels": config.out_channels,
        },
    }
    nn.save_checkpoint(path, model.state_dict(), step=step, meta=meta, dtype="f32")


def load_stage1(path, dtype=np.float32) -> UNetModel:
    state, _, meta = nn.load_checkpoint(path)
    if meta.get("kind") != "stage1":
        raise nn.CheckpointError(f"{path} is not a stage1 checkpoint (kind={meta.get('kind')!r})")
    config = UNetConfig(**meta["unet"])
    model = UNetModel(config, np.random.default_rng(0), dtype=dtype)
    model.load_state_dict(state)
    return model


def _write_metrics_csv(path, columns, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_format_cell(row[c]) for c in columns])


def _format_cell(value):
    if isinstance(value, float):
        return repr(float(value))
    return value
