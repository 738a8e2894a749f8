"""Procedural stand-in for the clinical cohort.

Each patient is a grayscale image with a superellipse "stomach" region
filled with sinusoidal fold bands. Negative patients get straight,
near-parallel folds on a smooth surface; positive patients get folds whose
phase is warped by a smooth displacement field plus multiplicative
high-frequency speckle. Mask shape, orientation and brightness are drawn
from label-independent streams so the class signal lives in texture only.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import (
    DatasetManifest,
    GrayImage,
    GxsslError,
    PatientEntry,
    PatientLabel,
    StomachMask,
    ValidationError,
    save_gray_image,
    save_mask,
)

MASK_FRACTION_RANGE = (0.15, 0.60)
MAX_REDRAWS = 100


class GenerationError(GxsslError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 512
    positive_fraction: float = 0.5
    fold_frequency_neg: float = 6.0
    fold_wobble_pos: float = 18.0
    speckle_gain_pos: float = 0.35
    blob_radius_range: tuple[float, float] = (0.28, 0.40)
    noise_sigma: float = 0.02
    seed: int = 0
    patch_size: int = 64

    def __post_init__(self):
        object.__setattr__(self, "blob_radius_range", tuple(self.blob_radius_range))
        if self.image_size < 4 * self.patch_size:
            raise ValidationError(f"image_size {self.image_size} < 4 x patch_size {self.patch_size}")
        if not 0.0 <= self.positive_fraction <= 1.0:
            raise ValidationError("positive_fraction must lie in [0, 1]")
        lo, hi = self.blob_radius_range
        if not 0 < lo <= hi:
            raise ValidationError("blob_radius_range must satisfy 0 < low <= high")
        if self.noise_sigma < 0 or self.speckle_gain_pos < 0 or self.fold_wobble_pos < 0:
            raise ValidationError("noise_sigma, speckle_gain_pos and fold_wobble_pos must be >= 0")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SynthConfig":
        return cls(**json.loads(text))


@dataclass(frozen=True)
class SynthPatient:
    patient_id: str
    patient_label: PatientLabel
    image: GrayImage
    mask: StomachMask

    def __post_init__(self):
        lo, hi = MASK_FRACTION_RANGE
        if not lo <= self.mask.true_fraction() <= hi:
            raise ValidationError(f"mask fraction {self.mask.true_fraction():.3f} outside {MASK_FRACTION_RANGE}")


def _draw_mask(rng: np.random.Generator, cfg: SynthConfig, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    s = cfg.image_size
    lo, hi = cfg.blob_radius_range
    cx = s * (0.5 + rng.uniform(-0.08, 0.08))
    cy = s * (0.5 + rng.uniform(-0.08, 0.08))
    rx = s * rng.uniform(lo, hi)
    ry = s * rng.uniform(lo, hi)
    exponent = rng.uniform(2.0, 3.5)
    lobes = int(rng.integers(2, 6))
    wobble = rng.uniform(0.03, 0.12)
    phase = rng.uniform(0, 2 * math.pi)
    rot = rng.uniform(0, math.pi)
    dx, dy = xx - cx, yy - cy
    u = dx * math.cos(rot) + dy * math.sin(rot)
    v = -dx * math.sin(rot) + dy * math.cos(rot)
    radius = (np.abs(u / rx) ** exponent + np.abs(v / ry) ** exponent) ** (1.0 / exponent)
    theta = np.arctan2(v, u)
    return radius <= 1.0 + wobble * np.sin(lobes * theta + phase)


def _smooth_field(rng: np.random.Generator, yy: np.ndarray, xx: np.ndarray, size: int, n_waves: int = 4) -> np.ndarray:
    """Sum of low-frequency random plane waves, scaled to unit peak amplitude."""
    out = np.zeros_like(xx)
    for _ in range(n_waves):
        k = rng.uniform(2.0, 6.0) * 2 * math.pi / size
        ang = rng.uniform(0, 2 * math.pi)
        out += np.sin(k * (xx * math.cos(ang) + yy * math.sin(ang)) + rng.uniform(0, 2 * math.pi))
    return out / n_waves


def generate_patient(cfg: SynthConfig, patient_seed: int, label: PatientLabel, patient_id: str | None = None) -> SynthPatient:
    """Deterministic in (cfg, patient_seed, label)."""
    label = PatientLabel.parse(label)
    s = cfg.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    # Independent streams: geometry, fold layout, pathology texture, pixel noise.
    geo, folds, patho, noise = (np.random.default_rng(ss) for ss in np.random.SeedSequence(patient_seed).spawn(4))

    for _ in range(MAX_REDRAWS):
        mask = _draw_mask(geo, cfg, yy, xx)
        if MASK_FRACTION_RANGE[0] <= mask.mean() <= MASK_FRACTION_RANGE[1]:
            break
    else:
        raise GenerationError(f"mask fraction invariant unreachable after {MAX_REDRAWS} draws; cfg={cfg.to_json()}")

    angle = folds.uniform(0, math.pi)
    freq = cfg.fold_frequency_neg * folds.uniform(0.85, 1.15)
    fold_phase = folds.uniform(0, 2 * math.pi)
    # Slow drift keeps negative folds near-parallel rather than perfectly parallel.
    drift = 0.15 * _smooth_field(folds, yy, xx, s, n_waves=2)
    base_level = folds.uniform(0.5, 0.6)
    fold_contrast = folds.uniform(0.12, 0.18)
    bg_level = folds.uniform(0.06, 0.12)
    bg_slope = folds.uniform(-0.05, 0.05)

    k = 2 * math.pi * freq / s
    coord = xx * math.cos(angle) + yy * math.sin(angle)
    warp = np.zeros_like(xx)
    speckle = np.ones_like(xx)
    warp_field = _smooth_field(patho, yy, xx, s, n_waves=4)
    speckle_noise = ndimage.gaussian_filter(patho.standard_normal((s, s)), 0.8)
    speckle_noise /= speckle_noise.std() + 1e-12
    if label is PatientLabel.POSITIVE:
        warp = cfg.fold_wobble_pos * warp_field
        speckle = np.clip(1.0 + cfg.speckle_gain_pos * speckle_noise, 0.0, None)

    fold = np.sin(k * (coord + warp) + fold_phase + drift)
    inside = (base_level + fold_contrast * fold) * speckle
    outside = bg_level + bg_slope * (yy / s) + 0.02 * np.sin(2 * math.pi * xx / s)
    img = np.where(mask, inside, outside)
    if cfg.noise_sigma > 0:
        img = img + noise.normal(0.0, cfg.noise_sigma, size=img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)

    pid = patient_id if patient_id is not None else f"p{patient_seed}"
    return SynthPatient(pid, label, GrayImage(img, bit_depth_source=8), StomachMask(mask))


def patient_seed(cfg_seed: int, index: int) -> int:
    """Counter-based seed: depends only on (cfg_seed, index), so cohorts share prefixes."""
    return int(np.random.SeedSequence(cfg_seed, spawn_key=(index,)).generate_state(1, dtype=np.uint32)[0])


def patient_label_at(index: int, positive_fraction: float) -> PatientLabel:
    # Telescoping rounded counts: the first n labels contain round(n * f) positives for every n.
    step = math.floor((index + 1) * positive_fraction + 0.5) - math.floor(index * positive_fraction + 0.5)
    return PatientLabel.POSITIVE if step == 1 else PatientLabel.NEGATIVE


def generate_cohort(cfg: SynthConfig, n_patients: int, split: str = "ssl_train") -> tuple[list[SynthPatient], DatasetManifest]:
    if n_patients < 2:
        raise ValidationError(f"n_patients must be >= 2, got {n_patients}")
    patients = []
    for i in range(n_patients):
        pid = f"s{cfg.seed}-{i:05d}"
        patients.append(generate_patient(cfg, patient_seed(cfg.seed, i), patient_label_at(i, cfg.positive_fraction), pid))
    entries = tuple(PatientEntry(p.patient_id, p.patient_label, f"{p.patient_id}.png", f"{p.patient_id}.mask.png") for p in patients)
    manifest = DatasetManifest(split, entries, None, cfg.seed, cfg.to_json())
    return patients, manifest


def write_cohort(patients: list[SynthPatient], manifest: DatasetManifest, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for p in patients:
        save_gray_image(p.image, out_dir / f"{p.patient_id}.png", bit_depth=8)
        save_mask(p.mask, out_dir / f"{p.patient_id}.mask.png")
    return manifest.save(out_dir / "manifest.json")


def highfreq_power(image: np.ndarray, mask: np.ndarray, cutoff: float = 0.25) -> float:
    """Mean spectral power above ``cutoff`` x Nyquist of the in-mask region.

    The outside region is replaced by the in-mask mean so the mask edge
    contributes little; normalised by in-mask pixel count.
    """
    img = np.asarray(image, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    filled = np.where(m, img, img[m].mean()) - img[m].mean()
    spec = np.abs(np.fft.fft2(filled)) ** 2
    fy = np.fft.fftfreq(img.shape[0])[:, None]
    fx = np.fft.fftfreq(img.shape[1])[None, :]
    radial = np.sqrt(fx**2 + fy**2) / 0.5
    return float(spec[radial > cutoff].sum() / (m.sum() * img.size))
