"""Regular-grid tiling of patient images and O/N/P labelling by stomach area."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .core import GrayImage, PatchLabel, PatchRecord, PatientLabel, StomachMask, ValidationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TilingSpec:
    patch_size: int = 64
    stride: int = 32
    outside_max_fraction: float = 0.01
    inside_min_fraction: float = 0.85

    def __post_init__(self):
        if not 1 <= self.stride <= self.patch_size:
            raise ValidationError(f"need 1 <= stride <= patch_size, got {self.stride}, {self.patch_size}")
        if not 0 <= self.outside_max_fraction < self.inside_min_fraction <= 1:
            raise ValidationError("need 0 <= outside_max_fraction < inside_min_fraction <= 1")

    @classmethod
    def paper(cls) -> "TilingSpec":
        return cls(patch_size=299, stride=50)

    # Thresholds as exact rationals: Fraction("0.01") == 1/100.
    @property
    def _outside_max(self) -> Fraction:
        return Fraction(str(self.outside_max_fraction))

    @property
    def _inside_min(self) -> Fraction:
        return Fraction(str(self.inside_min_fraction))


def tile_positions(width: int, height: int, spec: TilingSpec) -> list[tuple[int, int]]:
    """Top-left (grid_x, grid_y) offsets in row-major order; no partial tiles."""
    if width < spec.patch_size or height < spec.patch_size:
        raise ValidationError(f"image {width}x{height} is smaller than patch_size {spec.patch_size}")
    xs = range(0, width - spec.patch_size + 1, spec.stride)
    ys = range(0, height - spec.patch_size + 1, spec.stride)
    return [(x, y) for y in ys for x in xs]


def _window_count(integral: np.ndarray, x: int, y: int, size: int) -> int:
    return int(integral[y + size, x + size] - integral[y, x + size] - integral[y + size, x] + integral[y, x])


def _integral(mask: StomachMask) -> np.ndarray:
    ii = np.zeros((mask.height + 1, mask.width + 1), dtype=np.int64)
    ii[1:, 1:] = mask.bits.astype(np.int64).cumsum(0).cumsum(1)
    return ii


def _check_window(mask: StomachMask, x: int, y: int, size: int) -> None:
    if size < 1 or x < 0 or y < 0 or x + size > mask.width or y + size > mask.height:
        raise ValidationError(f"window ({x}, {y}, {size}) outside {mask.width}x{mask.height} mask")


def area_fraction(mask: StomachMask, grid_x: int, grid_y: int, size: int) -> float:
    _check_window(mask, grid_x, grid_y, size)
    count = int(mask.bits[grid_y:grid_y + size, grid_x:grid_x + size].sum())
    return float(Fraction(count, size * size))


def classify_window(count: int, size: int, spec: TilingSpec) -> str:
    """Bucket for a window with ``count`` inside-stomach pixels: 'O', 'inside' or 'discard'.

    Outside is strict (< outside_max), inside is inclusive (>= inside_min).
    """
    frac = Fraction(count, size * size)
    if frac < spec._outside_max:
        return "O"
    if frac >= spec._inside_min:
        return "inside"
    return "discard"


def bucket_positions(mask: StomachMask, spec: TilingSpec) -> dict[str, list[tuple[int, int]]]:
    buckets: dict[str, list[tuple[int, int]]] = {"O": [], "inside": [], "discard": []}
    ii = _integral(mask)
    for x, y in tile_positions(mask.width, mask.height, spec):
        buckets[classify_window(_window_count(ii, x, y, spec.patch_size), spec.patch_size, spec)].append((x, y))
    return buckets


def extract_labeled_patches(
    image: GrayImage,
    mask: StomachMask,
    patient_label: PatientLabel,
    spec: TilingSpec,
    patient_id: str = "",
) -> list[PatchRecord]:
    if (image.width, image.height) != (mask.width, mask.height):
        raise ValidationError(
            f"image {image.width}x{image.height} and mask {mask.width}x{mask.height} differ in size"
        )
    patient_label = PatientLabel.parse(patient_label)
    inside_label = PatchLabel.P if patient_label is PatientLabel.POSITIVE else PatchLabel.N
    ii = _integral(mask)
    size = spec.patch_size
    out = []
    discarded = 0
    for x, y in tile_positions(image.width, image.height, spec):
        bucket = classify_window(_window_count(ii, x, y, size), size, spec)
        if bucket == "discard":
            discarded += 1
            continue
        label = PatchLabel.O if bucket == "O" else inside_label
        out.append(PatchRecord(patient_id, patient_label, x, y, size, label, image.pixels[y:y + size, x:x + size]))
    logger.debug("patient %s: %d patches kept, %d discarded", patient_id, len(out), discarded)
    return out


def extract_test_patches(
    image: GrayImage,
    spec: TilingSpec,
    patient_id: str = "",
    patient_label: PatientLabel = PatientLabel.NEGATIVE,
) -> list[PatchRecord]:
    """Every grid tile, unlabeled. ``patient_label`` is carried only as provenance."""
    size = spec.patch_size
    return [
        PatchRecord(patient_id, PatientLabel.parse(patient_label), x, y, size, None, image.pixels[y:y + size, x:x + size])
        for x, y in tile_positions(image.width, image.height, spec)
    ]


def crop_stack(image: GrayImage, records) -> np.ndarray:
    """(N, S, S) float32 stack of crops for locator records from one image."""
    if not records:
        return np.zeros((0, 0, 0), dtype=np.float32)
    size = records[0].size
    out = np.empty((len(records), size, size), dtype=np.float32)
    for i, r in enumerate(records):
        out[i] = image.pixels[r.grid_y:r.grid_y + size, r.grid_x:r.grid_x + size]
    return out
