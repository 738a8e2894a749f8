"""Shared domain types, dataset manifests, image I/O and the checkpoint archive."""

from __future__ import annotations

import enum
import json
import logging
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

PARAMS_BIN = "params.bin"
PARAMS_INDEX = "params.index.json"
CKPT_MANIFEST = "manifest.json"


class GxsslError(Exception):
    """Base class for package errors."""


class ValidationError(GxsslError, ValueError):
    pass


class FormatError(GxsslError, ValueError):
    pass


class CorruptionError(GxsslError):
    pass


class NumericError(GxsslError, FloatingPointError):
    pass


class PatchLabel(enum.IntEnum):
    """Patch classes; the integer value is the classifier's output index."""

    O = 0  # noqa: E741
    N = 1
    P = 2


class PatientLabel(enum.IntEnum):
    NEGATIVE = 0
    POSITIVE = 1

    @classmethod
    def parse(cls, value: Any) -> "PatientLabel":
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            try:
                return cls[value.upper()]
            except KeyError:
                raise ValidationError(f"unknown patient label {value!r}") from None
        return cls(int(value))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class GrayImage:
    """Single-channel image with intensities in [0, 1], stored row-major (H, W)."""

    pixels: np.ndarray
    bit_depth_source: int = 8

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValidationError(f"GrayImage needs a non-empty 2-D grid, got shape {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ValidationError("GrayImage intensities must lie in [0, 1]")
        object.__setattr__(self, "pixels", _frozen(px))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class StomachMask:
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 2:
            raise ValidationError(f"StomachMask needs a 2-D grid, got shape {bits.shape}")
        object.__setattr__(self, "bits", _frozen(bits))

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    def true_fraction(self) -> float:
        return float(self.bits.mean())


@dataclass(frozen=True)
class PatchRecord:
    """A tiled sub-image. ``label`` is None for unlabeled test patches and
    ``pixels`` is None for bare locators read back from a manifest."""

    patient_id: str
    patient_label: PatientLabel
    grid_x: int
    grid_y: int
    size: int
    label: PatchLabel | None = None
    pixels: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.label is PatchLabel.P and self.patient_label is not PatientLabel.POSITIVE:
            raise ValidationError("P patch from a negative patient")
        if self.label is PatchLabel.N and self.patient_label is not PatientLabel.NEGATIVE:
            raise ValidationError("N patch from a positive patient")
        if self.pixels is not None:
            if self.pixels.shape != (self.size, self.size):
                raise ValidationError(f"patch pixels shape {self.pixels.shape} != size {self.size}")
            object.__setattr__(self, "pixels", _frozen(self.pixels))

    def locator(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "grid_x": self.grid_x,
            "grid_y": self.grid_y,
            "size": self.size,
            "label": None if self.label is None else self.label.name,
        }


# --------------------------------------------------------------------------
# Image I/O
# --------------------------------------------------------------------------

def load_gray_image(path: str | os.PathLike) -> GrayImage:
    """Load an 8- or 16-bit single-channel PNG and scale it to [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    with Image.open(path) as im:
        if im.format != "PNG":
            raise FormatError(f"{path}: format {im.format} is not PNG")
        mode = im.mode
        if mode == "L":
            depth = 8
        elif mode in ("I;16", "I;16B", "I;16L"):
            depth = 16
        elif mode == "I":
            # Some Pillow builds decode 16-bit grayscale PNG as 32-bit "I".
            depth = 16
        elif mode in ("RGB", "RGBA", "LA", "P", "CMYK", "YCbCr"):
            raise FormatError(f"{path}: multi-channel mode {mode!r}; channels must be 1")
        else:
            raise FormatError(f"{path}: unsupported bit depth for mode {mode!r}")
        arr = np.array(im)
    if depth == 16 and arr.max(initial=0) > 65535:
        raise FormatError(f"{path}: pixel values exceed 16-bit depth")
    scale = float(2**depth - 1)
    return GrayImage((arr.astype(np.float64) / scale).astype(np.float32), bit_depth_source=depth)


def save_gray_image(image: GrayImage | np.ndarray, path: str | os.PathLike, bit_depth: int = 8) -> None:
    px = image.pixels if isinstance(image, GrayImage) else np.asarray(image)
    if bit_depth == 8:
        Image.fromarray(np.round(np.clip(px, 0, 1) * 255).astype(np.uint8), mode="L").save(path)
    elif bit_depth == 16:
        arr = np.round(np.clip(px, 0, 1) * 65535).astype(np.uint16)
        Image.fromarray(arr).save(path)
    else:
        raise ValidationError(f"bit_depth must be 8 or 16, got {bit_depth}")


def save_mask(mask: StomachMask, path: str | os.PathLike) -> None:
    Image.fromarray(mask.bits.astype(np.uint8) * 255, mode="L").save(path)


def load_mask(path: str | os.PathLike) -> StomachMask:
    return StomachMask(load_gray_image(path).pixels >= 0.5)


# --------------------------------------------------------------------------
# Dataset manifests
# --------------------------------------------------------------------------

SPLITS = ("ssl_train", "finetune_train", "finetune_val", "test")


@dataclass(frozen=True)
class PatientEntry:
    patient_id: str
    patient_label: PatientLabel
    image: str
    mask: str | None = None

    def to_dict(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "patient_label": self.patient_label.name.lower(),
            "image": self.image,
            "mask": self.mask,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PatientEntry":
        return cls(str(d["patient_id"]), PatientLabel.parse(d["patient_label"]), d["image"], d.get("mask"))


@dataclass(frozen=True)
class DatasetManifest:
    split: str
    patients: tuple[PatientEntry, ...]
    patch_index: tuple[PatchRecord, ...] | None = None
    seed: int = 0
    provenance: str = ""
    # Directory relative paths resolve against; not serialized.
    root: Path | None = field(default=None, compare=False, repr=False)
    # Optional packed crops sidecar, relative to root.
    crops: str | None = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValidationError(f"split must be one of {SPLITS}, got {self.split!r}")
        object.__setattr__(self, "patients", tuple(self.patients))
        ids = [p.patient_id for p in self.patients]
        if len(set(ids)) != len(ids):
            raise ValidationError("patient_ids must be unique within a manifest")
        if self.patch_index is not None:
            object.__setattr__(self, "patch_index", tuple(self.patch_index))
            known = {p.patient_id: p.patient_label for p in self.patients}
            for rec in self.patch_index:
                if known.get(rec.patient_id) is not rec.patient_label:
                    raise ValidationError(f"patch record for unknown patient {rec.patient_id!r}")

    @property
    def patient_ids(self) -> list[str]:
        return [p.patient_id for p in self.patients]

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        if p.is_absolute():
            return p
        if self.root is not None:
            return self.root / p
        data_dir = os.environ.get("GXSSL_DATA_DIR")
        if data_dir and not p.exists():
            return Path(data_dir) / p
        return p

    def subset(self, patient_ids: Iterable[str], split: str) -> "DatasetManifest":
        keep = set(patient_ids)
        patients = [p for p in self.patients if p.patient_id in keep]
        index = None
        if self.patch_index is not None:
            index = [r for r in self.patch_index if r.patient_id in keep]
        return DatasetManifest(split, tuple(patients), index, self.seed, self.provenance, self.root, self.crops)

    def to_dict(self) -> dict:
        d = {
            "split": self.split,
            "patients": [p.to_dict() for p in self.patients],
            "patch_index": None if self.patch_index is None else [r.locator() for r in self.patch_index],
            "seed": self.seed,
            "provenance": self.provenance,
        }
        if self.crops is not None:
            d["crops"] = self.crops
        return d

    @classmethod
    def from_dict(cls, d: Mapping, root: Path | None = None) -> "DatasetManifest":
        patients = tuple(PatientEntry.from_dict(p) for p in d["patients"])
        labels = {p.patient_id: p.patient_label for p in patients}
        index = None
        if d.get("patch_index") is not None:
            index = []
            for r in d["patch_index"]:
                pid = str(r["patient_id"])
                if pid not in labels:
                    raise ValidationError(f"patch record for unknown patient {pid!r}")
                label = None if r.get("label") is None else PatchLabel[r["label"]]
                index.append(PatchRecord(pid, labels[pid], int(r["grid_x"]), int(r["grid_y"]), int(r["size"]), label))
        return cls(d["split"], patients, index, int(d.get("seed", 0)), d.get("provenance", ""), root, d.get("crops"))

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=1), encoding="utf-8")
        os.replace(tmp, path)
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            data_dir = os.environ.get("GXSSL_DATA_DIR")
            if data_dir and (Path(data_dir) / path).exists():
                path = Path(data_dir) / path
            else:
                raise FileNotFoundError(f"manifest not found: {path}")
        d = json.loads(path.read_text(encoding="utf-8"))
        return cls.from_dict(d, root=path.parent.resolve())


TRAINING_SPLITS = ("ssl_train", "finetune_train", "finetune_val")


def check_disjoint(manifests: Sequence[DatasetManifest]) -> None:
    """Enforce split hygiene for manifests of one experiment.

    ssl_train may overlap the fine-tune splits (the fine-tune pool is drawn
    from the SSL pool), but finetune_train/finetune_val must be disjoint and
    test must be disjoint from every training split.
    """
    by_split: dict[str, set[str]] = {}
    for m in manifests:
        by_split.setdefault(m.split, set()).update(m.patient_ids)
    train = by_split.get("finetune_train", set())
    val = by_split.get("finetune_val", set())
    if train & val:
        raise ValidationError(f"finetune_train and finetune_val share patients: {sorted(train & val)[:5]}")
    test = by_split.get("test", set())
    for split in TRAINING_SPLITS:
        overlap = test & by_split.get(split, set())
        if overlap:
            raise ValidationError(f"test shares patients with {split}: {sorted(overlap)[:5]}")


# --------------------------------------------------------------------------
# Checkpoint archive
# --------------------------------------------------------------------------

def save_checkpoint(
    params: Mapping[str, Any] | Sequence[tuple[str, Any]],
    meta: Mapping[str, Any],
    directory: str | os.PathLike,
) -> Path:
    """Write params.bin / params.index.json / manifest.json atomically.

    ``params`` may be a mapping or a sequence of (name, array) pairs; the
    latter is how name collisions are detected. Arrays are stored as
    little-endian float32 in insertion order.
    """
    items = list(params.items()) if isinstance(params, Mapping) else list(params)
    seen: set[str] = set()
    for name, _ in items:
        if name in seen:
            raise ValidationError(f"duplicate parameter name {name!r}")
        seen.add(name)

    directory = Path(directory)
    directory.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{directory.name}.", dir=directory.parent))
    try:
        index = []
        offset = 0
        with open(tmp / PARAMS_BIN, "wb") as fh:
            for name, value in items:
                if hasattr(value, "detach"):
                    value = value.detach().cpu().numpy()
                arr = np.array(value, dtype="<f4", order="C")  # keeps 0-d shapes
                raw = arr.tobytes(order="C")
                fh.write(raw)
                index.append({"name": name, "shape": list(arr.shape), "byte_offset": offset, "byte_length": len(raw)})
                offset += len(raw)
        (tmp / PARAMS_INDEX).write_text(json.dumps(index, indent=1), encoding="utf-8")
        (tmp / CKPT_MANIFEST).write_text(json.dumps(dict(meta), indent=1, sort_keys=True), encoding="utf-8")
        if directory.exists():
            trash = Path(tempfile.mkdtemp(prefix=f".{directory.name}.old.", dir=directory.parent))
            os.replace(directory, trash / "old")
            os.replace(tmp, directory)
            shutil.rmtree(trash, ignore_errors=True)
        else:
            os.replace(tmp, directory)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return directory


def load_checkpoint(directory: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    for name in (PARAMS_BIN, PARAMS_INDEX, CKPT_MANIFEST):
        if not (directory / name).exists():
            raise FileNotFoundError(f"checkpoint file missing: {directory / name}")
    index = json.loads((directory / PARAMS_INDEX).read_text(encoding="utf-8"))
    meta = json.loads((directory / CKPT_MANIFEST).read_text(encoding="utf-8"))
    blob = (directory / PARAMS_BIN).read_bytes()

    params: dict[str, np.ndarray] = {}
    expected_offset = 0
    for entry in index:
        shape = tuple(int(s) for s in entry["shape"])
        off, length = int(entry["byte_offset"]), int(entry["byte_length"])
        if off != expected_offset:
            raise CorruptionError(f"{entry['name']}: offset {off} breaks ascending contiguous layout")
        if length != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CorruptionError(f"{entry['name']}: byte_length {length} does not match shape {shape}")
        if off + length > len(blob):
            raise CorruptionError(f"{entry['name']}: byte range exceeds params.bin ({len(blob)} bytes)")
        if entry["name"] in params:
            raise CorruptionError(f"duplicate entry {entry['name']!r}")
        params[entry["name"]] = np.frombuffer(blob, dtype="<f4", count=length // 4, offset=off).reshape(shape).copy()
        expected_offset = off + length
    if expected_offset != len(blob):
        raise CorruptionError(f"params.bin has {len(blob) - expected_offset} trailing bytes not covered by the index")
    return params, meta
