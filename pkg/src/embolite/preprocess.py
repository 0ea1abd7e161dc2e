"""Volume-to-model-input transforms.

All functions here are pure: they take arrays/volumes in and return new
objects, so per-study work can run in parallel without shared state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import SparseAnnotation, Volume

DEFAULT_WINDOW = (-1000.0, 400.0)
SLAB_CONTEXT = 4  # neighbors taken from each side of the center slice


@dataclass
class Slab:
    channels: np.ndarray  # [9,H,W] float32
    center_index: int
    target_mask: np.ndarray  # [1,H,W] float32, zeros for sampled negatives


@dataclass
class Bag:
    instances: np.ndarray  # [T,1,h,w] float32, masked + normalized
    label: int
    study_id: str = ""


@dataclass
class WindowPlan:
    windows: list  # [(start, end)] over the lung span, end exclusive
    length: int  # T
    padded: bool = False


@dataclass
class LungSpan:
    start: int
    end: int  # exclusive
    fallback: bool = False

    def __len__(self):
        return self.end - self.start


def resample_z(volume: Volume, target_spacing_mm: float) -> Volume:
    """Linear interpolation along the slice axis; in-plane untouched."""
    if target_spacing_mm <= 0:
        raise ValueError(f"target spacing must be positive, got {target_spacing_mm}")
    old = volume.slice_spacing_mm
    if abs(old - target_spacing_mm) < 1e-9:
        return Volume(volume.voxels.copy(), target_spacing_mm, volume.study_id)
    d = volume.voxels.shape[0]
    new_d = max(1, int(round(d * old / target_spacing_mm)))
    src = np.arange(new_d) * (target_spacing_mm / old)
    lo = np.clip(np.floor(src).astype(int), 0, d - 1)
    hi = np.minimum(lo + 1, d - 1)
    frac = (src - lo).astype(volume.voxels.dtype).reshape(-1, 1, 1)
    vox = (1.0 - frac) * volume.voxels[lo] + frac * volume.voxels[hi]
    return Volume(vox.astype(volume.voxels.dtype), target_spacing_mm, volume.study_id)


def remap_annotation_indices(annotation: SparseAnnotation, old_spacing: float,
                             target_spacing: float, new_depth: int) -> SparseAnnotation:
    """Carry annotated slice indices through a z-resample (nearest index)."""
    if abs(old_spacing - target_spacing) < 1e-9:
        return annotation
    remapped = {}
    for idx, mask in annotation.annotated_slices.items():
        new_idx = int(round(idx * old_spacing / target_spacing))
        if 0 <= new_idx < new_depth:
            remapped[new_idx] = mask
    return SparseAnnotation(remapped, spacing_mm=annotation.spacing_mm)


def normalize_intensity(volume: Volume, window_low: float, window_high: float) -> Volume:
    """Clip to [low, high] and map affinely onto [0, 1]."""
    if window_low >= window_high:
        raise ValueError(f"window_low must be < window_high, got ({window_low}, {window_high})")
    vox = np.clip(volume.voxels, window_low, window_high)
    vox = (vox - window_low) / (window_high - window_low)
    return Volume(vox.astype(np.float32), volume.slice_spacing_mm, volume.study_id)


def slab_channel_indices(center: int, depth: int) -> np.ndarray:
    """The 9 slice indices for a slab, clamped to the volume at the edges."""
    return np.clip(np.arange(center - SLAB_CONTEXT, center + SLAB_CONTEXT + 1), 0, depth - 1)


def _slab_at(vox: np.ndarray, center: int, target: np.ndarray) -> Slab:
    channels = vox[slab_channel_indices(center, vox.shape[0])].astype(np.float32)
    return Slab(channels, center, target.reshape(1, *target.shape[-2:]).astype(np.float32))


def extract_slabs(volume: Volume, annotation: SparseAnnotation,
                  negatives_per_positive: float, rng: np.random.Generator) -> list:
    """One positive slab per annotated slice plus sampled empty-target slabs.

    Negative centers are drawn from non-annotated slices, preferring ones at
    least 3 slices away from any annotation so near-defect slices do not get
    empty targets.
    """
    vox = volume.voxels
    d, h, w = vox.shape
    slabs = []
    annotated = annotation.indices()
    for idx in annotated:
        slabs.append(_slab_at(vox, idx, annotation.annotated_slices[idx]))

    n_pos = len(annotated)
    n_neg = int(round(negatives_per_positive * (n_pos if n_pos > 0 else 2)))
    if n_neg > 0:
        taken = set(annotated)
        far = [i for i in range(d) if all(abs(i - a) >= 3 for a in annotated) and i not in taken]
        pool = far if far else [i for i in range(d) if i not in taken]
        if pool:
            chosen = rng.choice(len(pool), size=min(n_neg, len(pool)), replace=False)
            empty = np.zeros((h, w), dtype=np.float32)
            for j in sorted(int(c) for c in chosen):
                slabs.append(_slab_at(vox, pool[j], empty))
    return slabs


def lung_span(volume: Volume, air_threshold: float = 0.25, min_fraction: float = 0.3) -> LungSpan:
    """Smallest/largest slice whose air-like voxel fraction exceeds the cutoff.

    Valid for phantom volumes (normalized intensities); falls back to the full
    depth with ``fallback=True`` when no slice qualifies.
    """
    vox = volume.voxels
    d = vox.shape[0]
    fractions = (vox < air_threshold).mean(axis=(1, 2))
    qualifying = np.flatnonzero(fractions > min_fraction)
    if qualifying.size == 0:
        return LungSpan(0, d, fallback=True)
    return LungSpan(int(qualifying[0]), int(qualifying[-1]) + 1, fallback=False)


def _area_resize_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row-stochastic matrix averaging input cells over each output cell's extent."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for o in range(n_out):
        lo, hi = o * scale, (o + 1) * scale
        i0, i1 = int(np.floor(lo)), int(np.ceil(hi))
        for i in range(i0, min(i1, n_in)):
            overlap = min(hi, i + 1) - max(lo, i)
            if overlap > 0:
                m[o, i] = overlap / scale
    return m


def area_resize(stack: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Area-average resize of [..., H, W]; exact for integer downscale factors."""
    h, w = stack.shape[-2:]
    rh = _area_resize_matrix(h, out_h, dtype=stack.dtype)
    rw = _area_resize_matrix(w, out_w, dtype=stack.dtype)
    return np.einsum("oh,...hw,pw->...op", rh, stack, rw, optimize=True)


def center_crop(stack: np.ndarray, crop: int) -> np.ndarray:
    h, w = stack.shape[-2:]
    if crop > h or crop > w:
        raise ValueError(f"crop {crop} larger than image {h}x{w}")
    top, left = (h - crop) // 2, (w - crop) // 2
    return stack[..., top : top + crop, left : left + crop]


def masked_instance_stack(volume: Volume, pred_mask: np.ndarray, span: LungSpan,
                          crop: int, resize: int, mask_threshold: float | None = None) -> np.ndarray:
    """Masked, cropped, resized slices for the whole span: [span_len, 1, resize, resize].

    The mask multiplies the volume softly; ``mask_threshold`` binarizes it
    first when set (ablation mode).
    """
    mask = pred_mask
    if mask_threshold is not None:
        mask = (mask >= mask_threshold).astype(volume.voxels.dtype)
    masked = volume.voxels[span.start : span.end] * mask[span.start : span.end]
    masked = center_crop(masked, crop)
    resized = area_resize(masked.astype(np.float32), resize, resize)
    return resized[:, None, :, :].astype(np.float32)


def middle_window(span_len: int, length: int):
    """(offset, pad_front, pad_back) selecting the centered ``length`` slices."""
    if span_len >= length:
        return (span_len - length) // 2, 0, 0
    pad = length - span_len
    return 0, pad // 2, pad - pad // 2


def _pad_stack(stack: np.ndarray, pad_front: int, pad_back: int) -> np.ndarray:
    if pad_front == 0 and pad_back == 0:
        return stack
    return np.pad(stack, ((pad_front, pad_back), (0, 0), (0, 0), (0, 0)))


def build_masked_bag(volume: Volume, pred_mask: np.ndarray, span: LungSpan, length: int,
                     crop: int, resize: int, label: int = 0, study_id: str = "",
                     mask_threshold: float | None = None) -> Bag:
    """Bag over the middle ``length`` slices of the span (zero-padded if short)."""
    stack = masked_instance_stack(volume, pred_mask, span, crop, resize, mask_threshold)
    offset, pad_front, pad_back = middle_window(len(stack), length)
    instances = _pad_stack(stack[offset : offset + length], pad_front, pad_back)
    return Bag(instances, label, study_id)


def plan_windows(span_length: int, length: int, overlap: int) -> WindowPlan:
    """Moving windows of ``length`` with ``overlap``; final window end-aligned."""
    if not 0 <= overlap < length:
        raise ValueError(f"overlap must satisfy 0 <= overlap < T, got overlap={overlap} T={length}")
    if span_length < length:
        return WindowPlan([(0, span_length)], length, padded=True)
    stride = length - overlap
    windows = []
    start = 0
    while True:
        end = start + length
        if end >= span_length:
            windows.append((span_length - length, span_length))
            break
        windows.append((start, end))
        start += stride
    return WindowPlan(windows, length, padded=False)
