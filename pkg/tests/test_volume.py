"""Phantom generation, .embv/.emba round-trips, and manifest handling."""

import hashlib
import json

import numpy as np
import pytest

from embolite.volume import (
    DataError, ManifestEntry, PhantomSpec, SparseAnnotation, StudyLabel, Volume,
    dataset_manifest, generate_phantom, load_annotation, load_volume,
    save_annotation, save_volume, write_manifest,
)


def _positive_spec(**overrides):
    base = dict(
        dims=(32, 48, 48), vessel_count=5, embolus_count=2, severity="lobar",
        embolus_radius_range_voxels=(3.0, 4.0), seed=7,
    )
    base.update(overrides)
    return PhantomSpec(**base)


def _checksum(arr):
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


class TestGeneratePhantom:
    def test_negative_study(self):
        volume, annotation, label = generate_phantom(PhantomSpec(dims=(16, 32, 32), embolus_count=0))
        assert label.label == "negative"
        assert label.severity == "none"
        assert annotation.is_empty()
        assert volume.voxels.shape == (16, 32, 32)

    def test_determinism_same_seed(self):
        spec = _positive_spec(seed=7)
        v1, a1, _ = generate_phantom(spec)
        v2, a2, _ = generate_phantom(spec)
        assert _checksum(v1.voxels) == _checksum(v2.voxels)
        assert a1.indices() == a2.indices()
        for idx in a1.indices():
            assert np.array_equal(a1.annotated_slices[idx], a2.annotated_slices[idx])

    def test_different_seed_changes_output(self):
        v1, _, _ = generate_phantom(_positive_spec(seed=1))
        v2, _, _ = generate_phantom(_positive_spec(seed=2))
        assert _checksum(v1.voxels) != _checksum(v2.voxels)

    def test_annotation_grid_spacing_2mm(self):
        # 10 mm protocol at 2 mm slices puts contours on every 5th slice
        _, annotation, _ = generate_phantom(
            _positive_spec(slice_spacing_mm=2.0, severity="saddle",
                           embolus_radius_range_voxels=(4.5, 6.0), dims=(40, 48, 48))
        )
        indices = annotation.indices()
        assert indices, "positive phantom must have annotated slices"
        assert all(idx % 5 == 0 for idx in indices)
        diffs = {b - a for a, b in zip(indices[:-1], indices[1:])}
        assert diffs and all(d % 5 == 0 for d in diffs)

    def test_positive_has_annotation_negative_has_none(self):
        for seed in range(5):
            _, ann_pos, _ = generate_phantom(_positive_spec(seed=seed))
            assert len(ann_pos.annotated_slices) >= 1
            _, ann_neg, _ = generate_phantom(PhantomSpec(dims=(16, 32, 32), seed=seed))
            assert len(ann_neg.annotated_slices) == 0

    def test_masks_are_binary_and_nonempty(self):
        _, annotation, _ = generate_phantom(_positive_spec())
        for mask in annotation.annotated_slices.values():
            assert set(np.unique(mask)) <= {0, 1}
            assert mask.sum() > 0

    def test_masks_mark_embolus_voxels(self):
        # annotated pixels sit on hypodense defect values, well below vessel value
        spec = _positive_spec(noise_sigma=0.0)
        volume, annotation, _ = generate_phantom(spec)
        for idx, mask in annotation.annotated_slices.items():
            values = volume.voxels[idx][mask.astype(bool)]
            assert np.allclose(values, 200.0 - spec.contrast_delta)

    def test_emboli_without_vessels_rejected(self):
        with pytest.raises(DataError, match="no vessels"):
            generate_phantom(_positive_spec(vessel_count=0))

    def test_too_small_dims_rejected(self):
        with pytest.raises(DataError, match="at least"):
            generate_phantom(PhantomSpec(dims=(8, 16, 16)))

    def test_positive_without_severity_rejected(self):
        with pytest.raises(DataError, match="severity"):
            generate_phantom(_positive_spec(severity="none"))

    def test_noise_profile_scales_sigma(self):
        soft, _, _ = generate_phantom(_positive_spec(noise_profile="soft", embolus_count=0,
                                                     severity="none"))
        sharp, _, _ = generate_phantom(_positive_spec(noise_profile="sharp", embolus_count=0,
                                                      severity="none"))
        assert soft.voxels.std() < sharp.voxels.std()


class TestStudyLabel:
    def test_negative_with_severity_rejected(self):
        with pytest.raises(DataError):
            StudyLabel("negative", "saddle")

    def test_y_property(self):
        assert StudyLabel("positive", "lobar").y == 1
        assert StudyLabel("negative").y == 0


class TestVolumeIO:
    def test_round_trip_bit_exact(self, tmp_path):
        volume, _, _ = generate_phantom(_positive_spec())
        path = tmp_path / "v.embv"
        save_volume(volume, path)
        loaded = load_volume(path)
        assert np.array_equal(loaded.voxels, volume.voxels)
        assert loaded.slice_spacing_mm == volume.slice_spacing_mm
        assert loaded.study_id == volume.study_id

    def test_bad_magic_names_offset_zero(self, tmp_path):
        path = tmp_path / "bad.embv"
        path.write_bytes(b"XXXX" + b"\x00" * 64)
        with pytest.raises(DataError, match="offset 0"):
            load_volume(path)

    def test_dims_payload_mismatch(self, tmp_path):
        volume = Volume(np.zeros((4, 32, 32), dtype=np.float32), 2.0, "s")
        path = tmp_path / "trunc.embv"
        save_volume(volume, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-16])  # drop part of the payload
        with pytest.raises(DataError, match="does not match dims"):
            load_volume(path)

    def test_annotation_round_trip(self, tmp_path):
        masks = {5: (np.arange(48 * 48).reshape(48, 48) % 7 == 0).astype(np.uint8),
                 10: np.ones((48, 48), dtype=np.uint8)}
        annotation = SparseAnnotation(masks, spacing_mm=10.0)
        path = tmp_path / "a.emba"
        save_annotation(annotation, path)
        loaded = load_annotation(path)
        assert loaded.indices() == [5, 10]
        for idx in (5, 10):
            assert np.array_equal(loaded.annotated_slices[idx], masks[idx])

    def test_empty_annotation_round_trip(self, tmp_path):
        path = tmp_path / "empty.emba"
        save_annotation(SparseAnnotation({}), path)
        assert load_annotation(path).is_empty()


class TestManifest:
    def _write_dataset(self, tmp_path, n=3):
        rows = []
        for i in range(n):
            sid = f"study_{i:03d}"
            volume, annotation, label = generate_phantom(_positive_spec(seed=i), sid)
            save_volume(volume, tmp_path / f"{sid}.embv")
            save_annotation(annotation, tmp_path / f"{sid}.emba")
            rows.append({
                "study_id": sid, "volume_path": f"{sid}.embv", "annotation_path": f"{sid}.emba",
                "label": label.label, "severity": label.severity,
                "noise_profile": label.noise_profile, "split": "train",
            })
        return rows

    def test_empty_manifest(self, tmp_path):
        write_manifest(tmp_path, [])
        assert dataset_manifest(tmp_path) == []

    def test_sorted_by_study_id(self, tmp_path):
        rows = self._write_dataset(tmp_path)
        write_manifest(tmp_path, list(reversed(rows)))
        entries = dataset_manifest(tmp_path)
        assert [e.study_id for e in entries] == sorted(r["study_id"] for r in rows)

    def test_duplicate_study_id_rejected(self, tmp_path):
        rows = self._write_dataset(tmp_path, n=1)
        write_manifest(tmp_path, rows + rows)
        with pytest.raises(DataError, match="duplicate"):
            dataset_manifest(tmp_path)

    def test_missing_file_names_study(self, tmp_path):
        rows = self._write_dataset(tmp_path, n=1)
        rows[0]["volume_path"] = "nonexistent.embv"
        write_manifest(tmp_path, rows)
        with pytest.raises(DataError, match="study_000"):
            dataset_manifest(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError, match="manifest"):
            dataset_manifest(tmp_path)

    def test_entry_load_round_trip(self, tmp_path):
        rows = self._write_dataset(tmp_path, n=1)
        write_manifest(tmp_path, rows)
        entry = dataset_manifest(tmp_path)[0]
        volume, annotation, label = entry.load()
        assert volume.study_id == "study_000"
        assert label.label == "positive"
        assert not annotation.is_empty()
