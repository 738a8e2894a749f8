"""Patch datasets on disk: building patch indexes, packed crops, loading patch stacks."""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from pathlib import Path

import numpy as np

from .core import (
    DatasetManifest,
    PatchRecord,
    ValidationError,
    load_gray_image,
    load_mask,
    save_gray_image,
)
from .patcher import TilingSpec, crop_stack, extract_labeled_patches

logger = logging.getLogger(__name__)

CROPS_BIN = "crops.bin"
CROPS_INDEX = "crops.index.json"


def index_patches(manifest: DatasetManifest, spec: TilingSpec) -> tuple[DatasetManifest, list[PatchRecord]]:
    """Tile every patient (masks required) and return a manifest carrying the patch index."""
    records: list[PatchRecord] = []
    for p in manifest.patients:
        if p.mask is None:
            raise ValidationError(f"patient {p.patient_id} has no mask; labelled patching needs one")
        image = load_gray_image(manifest.resolve(p.image))
        mask = load_mask(manifest.resolve(p.mask))
        records.extend(extract_labeled_patches(image, mask, p.patient_label, spec, p.patient_id))
    out = DatasetManifest(manifest.split, manifest.patients, tuple(records), manifest.seed, manifest.provenance,
                          manifest.root)
    return out, records


def _absolute_patients(manifest: DatasetManifest):
    from .core import PatientEntry

    return tuple(
        PatientEntry(p.patient_id, p.patient_label, str(manifest.resolve(p.image).resolve()),
                     None if p.mask is None else str(manifest.resolve(p.mask).resolve()))
        for p in manifest.patients
    )


def write_patch_dataset(manifest: DatasetManifest, spec: TilingSpec, out_dir: str | Path, packed: bool = False) -> Path:
    """Write a patch-indexed manifest plus crops (one PNG per patch, or packed uint8)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    indexed, records = index_patches(manifest, spec)
    crops = None
    if packed:
        entries = []
        with open(out_dir / CROPS_BIN, "wb") as fh:
            offset = 0
            for r in records:
                raw = np.round(r.pixels * 255).astype(np.uint8).tobytes()
                fh.write(raw)
                entries.append({"patient_id": r.patient_id, "grid_x": r.grid_x, "grid_y": r.grid_y,
                                "size": r.size, "label": r.label.name, "offset": offset})
                offset += len(raw)
        (out_dir / CROPS_INDEX).write_text(json.dumps(entries), encoding="utf-8")
        crops = CROPS_BIN
    else:
        crop_dir = out_dir / "crops"
        crop_dir.mkdir(exist_ok=True)
        for r in records:
            save_gray_image(r.pixels, crop_dir / f"{r.patient_id}_{r.grid_x}_{r.grid_y}.png")
    result = DatasetManifest(indexed.split, _absolute_patients(manifest), indexed.patch_index, indexed.seed,
                             indexed.provenance, out_dir, crops)
    logger.info("wrote %d patches for %d patients to %s", len(records), len(manifest.patients), out_dir)
    return result.save(out_dir / "manifest.json")


def read_packed_crops(directory: Path) -> tuple[list[dict], np.ndarray]:
    entries = json.loads((directory / CROPS_INDEX).read_text(encoding="utf-8"))
    blob = np.fromfile(directory / CROPS_BIN, dtype=np.uint8)
    stack = np.empty((len(entries), *(2 * [entries[0]["size"]] if entries else [0, 0])), dtype=np.float32)
    for i, e in enumerate(entries):
        n = e["size"] * e["size"]
        stack[i] = blob[e["offset"]:e["offset"] + n].reshape(e["size"], e["size"]) / np.float32(255)
    return entries, stack


def load_patch_bank(manifest: DatasetManifest, patient_ids=None) -> tuple[list[PatchRecord], np.ndarray]:
    """Locator records and their (N, S, S) float32 pixel stack, in patch-index order."""
    if manifest.patch_index is None:
        raise ValidationError("manifest has no patch_index; run the patch step first")
    keep = None if patient_ids is None else set(patient_ids)
    records = [r for r in manifest.patch_index if keep is None or r.patient_id in keep]
    if not records:
        return [], np.zeros((0, 0, 0), dtype=np.float32)

    if manifest.crops is not None:
        entries, stack = read_packed_crops(manifest.resolve(manifest.crops).parent)
        pos = {(e["patient_id"], e["grid_x"], e["grid_y"]): i for i, e in enumerate(entries)}
        return records, stack[[pos[(r.patient_id, r.grid_x, r.grid_y)] for r in records]]

    by_patient: dict[str, list[int]] = defaultdict(list)
    for i, r in enumerate(records):
        by_patient[r.patient_id].append(i)
    images = {p.patient_id: p.image for p in manifest.patients}
    size = records[0].size
    out = np.empty((len(records), size, size), dtype=np.float32)
    for pid, idx in by_patient.items():
        image = load_gray_image(manifest.resolve(images[pid]))
        out[idx] = crop_stack(image, [records[i] for i in idx])
    return records, out
