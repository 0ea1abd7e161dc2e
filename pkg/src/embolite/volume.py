"""3-d scan data model, .embv/.emba file formats, and the phantom generator.

Phantoms are procedural chest-scan stand-ins: an air-valued background,
bright vessel tubes meandering along the slice axis, and (for positive
studies) hypodense ellipsoidal defects embedded in the tubes. Contours are
stored only on a sparse slice grid, mimicking a 10 mm annotation protocol.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

AIR_VALUE = -900.0
VESSEL_VALUE = 200.0

SEVERITIES = ("subsegmental", "segmental", "lobar", "saddle")
LOW_SEVERITIES = frozenset({"subsegmental", "segmental"})
HIGH_SEVERITIES = frozenset({"lobar", "saddle"})
NOISE_PROFILES = {"soft": 0.6, "standard": 1.0, "sharp": 1.5}

# in-plane embolus radius range (voxels) per severity tier
SEVERITY_RADII = {
    "subsegmental": (1.6, 2.2),
    "segmental": (2.2, 3.0),
    "lobar": (3.0, 4.2),
    "saddle": (4.5, 6.0),
}


class DataError(Exception):
    """Raised for malformed data files, manifests, or generator specs."""


@dataclass
class Volume:
    voxels: np.ndarray  # [D,H,W] float32, unnormalized intensities
    slice_spacing_mm: float
    study_id: str = ""

    def __post_init__(self):
        if self.voxels.ndim != 3 or self.voxels.shape[0] < 1:
            raise DataError(f"volume must be [D,H,W] with D >= 1, got shape {self.voxels.shape}")
        if self.slice_spacing_mm <= 0:
            raise DataError(f"slice spacing must be positive, got {self.slice_spacing_mm}")


@dataclass
class SparseAnnotation:
    annotated_slices: dict  # slice index -> binary mask [H,W] (uint8)
    spacing_mm: float = 10.0

    def indices(self) -> list:
        return sorted(self.annotated_slices)

    def is_empty(self) -> bool:
        return not self.annotated_slices


@dataclass
class StudyLabel:
    label: str  # "positive" | "negative"
    severity: str = "none"
    noise_profile: str = "standard"

    def __post_init__(self):
        if self.label not in ("positive", "negative"):
            raise DataError(f"label must be positive/negative, got {self.label!r}")
        if self.label == "negative" and self.severity != "none":
            raise DataError("negative studies must have severity 'none'")

    @property
    def y(self) -> int:
        return 1 if self.label == "positive" else 0


@dataclass
class PhantomSpec:
    dims: tuple = (64, 64, 64)  # (D, H, W)
    slice_spacing_mm: float = 2.0
    vessel_count: int = 7
    embolus_count: int = 0
    embolus_radius_range_voxels: tuple = (2.2, 3.0)
    contrast_delta: float = 160.0
    noise_sigma: float = 20.0
    seed: int = 0
    severity: str = "none"
    noise_profile: str = "standard"
    annotation_spacing_mm: float = 10.0


def _disk_mask(h, w, cx, cy, radius):
    yy, xx = np.ogrid[:h, :w]
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= radius * radius


def generate_phantom(spec: PhantomSpec, study_id: str = "phantom"):
    """Deterministically build (Volume, SparseAnnotation, StudyLabel) from a spec."""
    d, h, w = spec.dims
    if d < 16 or h < 32 or w < 32:
        raise DataError(f"phantom dims must be at least (16,32,32), got {spec.dims}")
    if spec.embolus_count > 0 and spec.vessel_count <= 0:
        raise DataError("cannot place emboli in a phantom with no vessels")
    if spec.noise_profile not in NOISE_PROFILES:
        raise DataError(f"unknown noise profile {spec.noise_profile!r}")
    if spec.embolus_count > 0 and spec.severity not in SEVERITIES:
        raise DataError(f"positive phantom needs a severity from {SEVERITIES}, got {spec.severity!r}")

    rng = np.random.default_rng(spec.seed)
    vox = np.full((d, h, w), AIR_VALUE, dtype=np.float32)

    # vessels: tubes drifting slice to slice
    margin = 8
    centers = np.empty((spec.vessel_count, d, 2))
    radii = rng.uniform(2.0, 3.2, spec.vessel_count)
    for v in range(spec.vessel_count):
        x = rng.uniform(margin, w - margin)
        y = rng.uniform(margin, h - margin)
        drift = rng.normal(0.0, 0.35, (d, 2))
        for z in range(d):
            x = float(np.clip(x + drift[z, 0], 3, w - 4))
            y = float(np.clip(y + drift[z, 1], 3, h - 4))
            centers[v, z] = (x, y)
    for z in range(d):
        for v in range(spec.vessel_count):
            cx, cy = centers[v, z]
            vox[z][_disk_mask(h, w, cx, cy, radii[v])] = VESSEL_VALUE

    # annotation grid: every k-th slice, 10 mm protocol
    k = max(1, int(round(spec.annotation_spacing_mm / spec.slice_spacing_mm)))
    grid = np.arange(0, d, k)
    grid_set = {int(g) for g in grid}

    cross_sections = {}  # grid slice index -> boolean mask
    for _ in range(spec.embolus_count):
        vessel = rng.integers(0, spec.vessel_count)
        # snap the defect center onto an annotation-grid slice near mid-volume
        lo, hi = int(0.3 * d), int(0.7 * d)
        candidates = grid[(grid >= lo) & (grid <= hi)]
        if candidates.size == 0:
            candidates = grid
        cz = int(rng.choice(candidates))
        rxy = rng.uniform(*spec.embolus_radius_range_voxels)
        rz = max(1.3, rxy * 1.5)
        cx, cy = centers[vessel, cz]
        value = VESSEL_VALUE - spec.contrast_delta
        z0, z1 = max(0, int(np.floor(cz - rz))), min(d - 1, int(np.ceil(cz + rz)))
        for z in range(z0, z1 + 1):
            frac = 1.0 - ((z - cz) / rz) ** 2
            if frac <= 0:
                continue
            r_here = rxy * np.sqrt(frac)
            section = _disk_mask(h, w, cx, cy, r_here)
            if not section.any():
                continue
            vox[z][section] = value
            if z in grid_set:
                cross_sections[z] = cross_sections.get(z, np.zeros((h, w), bool)) | section

    sigma = spec.noise_sigma * NOISE_PROFILES[spec.noise_profile]
    if sigma > 0:
        vox += rng.normal(0.0, sigma, vox.shape).astype(np.float32)

    annotated = {int(z): m.astype(np.uint8) for z, m in sorted(cross_sections.items())}
    if spec.embolus_count > 0 and not annotated:
        raise DataError("positive phantom produced no annotated slices (internal geometry bug)")

    annotation = SparseAnnotation(annotated, spacing_mm=spec.annotation_spacing_mm)
    if spec.embolus_count > 0:
        label = StudyLabel("positive", spec.severity, spec.noise_profile)
    else:
        label = StudyLabel("negative", "none", spec.noise_profile)
    return Volume(vox, spec.slice_spacing_mm, study_id), annotation, label


# -- .embv volume format -------------------------------------------------------
#
# "EMBV" | u32 little-endian header length | JSON header | little-endian f32
# voxels in row-major [D,H,W] order.

_VOL_MAGIC = b"EMBV"
_ANN_MAGIC = b"EMBA"


def save_volume(volume: Volume, path) -> None:
    header = {
        "dims": list(volume.voxels.shape),
        "spacing_mm": volume.slice_spacing_mm,
        "dtype": "f32",
        "study_id": volume.study_id,
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_VOL_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(volume.voxels, dtype="<f4").tobytes())


def load_volume(path) -> Volume:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _VOL_MAGIC:
        raise DataError(f"{path}: bad magic at offset 0: expected {_VOL_MAGIC!r}, got {raw[:4]!r}")
    if len(raw) < 8:
        raise DataError(f"{path}: truncated before header length")
    (hlen,) = struct.unpack("<I", raw[4:8])
    try:
        header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: unreadable header: {exc}") from exc
    dims = tuple(int(x) for x in header["dims"])
    if len(dims) != 3 or any(x <= 0 for x in dims):
        raise DataError(f"{path}: invalid dims {dims}")
    count = dims[0] * dims[1] * dims[2]
    payload = raw[8 + hlen :]
    if len(payload) != count * 4:
        raise DataError(
            f"{path}: payload length {len(payload)} does not match dims {dims} (expected {count * 4} bytes)"
        )
    vox = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return Volume(vox, float(header["spacing_mm"]), header.get("study_id", ""))


def save_annotation(annotation: SparseAnnotation, path) -> None:
    indices = annotation.indices()
    shapes = [list(annotation.annotated_slices[i].shape) for i in indices]
    header = {"spacing_mm": annotation.spacing_mm, "slices": indices, "shapes": shapes}
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_ANN_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for i in indices:
            fh.write(np.ascontiguousarray(annotation.annotated_slices[i], dtype=np.uint8).tobytes())


def load_annotation(path) -> SparseAnnotation:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _ANN_MAGIC:
        raise DataError(f"{path}: bad magic at offset 0: expected {_ANN_MAGIC!r}, got {raw[:4]!r}")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    offset = 8 + hlen
    slices = {}
    for idx, shape in zip(header["slices"], header["shapes"]):
        count = int(shape[0]) * int(shape[1])
        if offset + count > len(raw):
            raise DataError(f"{path}: truncated mask payload at slice {idx}")
        mask = np.frombuffer(raw, dtype=np.uint8, count=count, offset=offset).reshape(shape).copy()
        slices[int(idx)] = mask
        offset += count
    return SparseAnnotation(slices, spacing_mm=float(header["spacing_mm"]))


# -- dataset manifest ----------------------------------------------------------


@dataclass
class ManifestEntry:
    study_id: str
    volume_path: Path
    annotation_path: Path
    label: StudyLabel
    split: str

    def load(self):
        volume = load_volume(self.volume_path)
        annotation = load_annotation(self.annotation_path)
        return volume, annotation, self.label


def dataset_manifest(directory) -> list:
    """Read manifest.json; entries come back sorted by study_id."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no manifest.json in {directory}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        try:
            rows = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{manifest_path}: invalid JSON: {exc}") from exc
    entries = []
    seen = set()
    for row in rows:
        sid = row["study_id"]
        if sid in seen:
            raise DataError(f"duplicate study_id in manifest: {sid!r}")
        seen.add(sid)
        vol_path = directory / row["volume_path"]
        ann_path = directory / row["annotation_path"]
        for p in (vol_path, ann_path):
            if not p.exists():
                raise DataError(f"manifest entry {sid!r} references missing file {p}")
        label = StudyLabel(row["label"], row.get("severity", "none"), row.get("noise_profile", "standard"))
        entries.append(ManifestEntry(sid, vol_path, ann_path, label, row["split"]))
    entries.sort(key=lambda e: e.study_id)
    return entries


def write_manifest(directory, rows) -> None:
    directory = Path(directory)
    with open(directory / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(rows, fh, indent=2, sort_keys=True)
        fh.write("\n")
