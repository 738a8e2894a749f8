"""Two-view stochastic augmentation: crop, resize, horizontal flip, Gaussian blur, normalize."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .core import PatchRecord, ValidationError

SIGMA_MIN = 0.05


@dataclass(frozen=True)
class AugmentConfig:
    view_size: int = 128
    crop_scale_range: tuple[float, float] = (0.4, 1.0)
    crop_aspect_range: tuple[float, float] = (3 / 4, 4 / 3)
    hflip_prob: float = 0.5
    blur_prob: float = 0.5
    blur_sigma_range: tuple[float, float] = (0.1, 2.0)
    normalize_mean: float = 0.5
    normalize_std: float = 0.25

    def __post_init__(self):
        for name in ("crop_scale_range", "crop_aspect_range", "blur_sigma_range"):
            lo, hi = getattr(self, name)
            object.__setattr__(self, name, (float(lo), float(hi)))
            if not lo <= hi:
                raise ValidationError(f"{name}: low {lo} > high {hi}")
        if self.view_size < 8:
            raise ValidationError(f"view_size must be >= 8, got {self.view_size}")
        if not 0 < self.crop_scale_range[0] <= self.crop_scale_range[1] <= 1:
            raise ValidationError("crop_scale_range must lie in (0, 1]")
        if self.crop_aspect_range[0] <= 0:
            raise ValidationError("crop_aspect_range must be positive")
        if self.blur_sigma_range[0] < 0:
            raise ValidationError("blur_sigma_range must be non-negative")
        for name in ("hflip_prob", "blur_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValidationError(f"{name} must lie in [0, 1]")
        if self.normalize_std <= 0:
            raise ValidationError("normalize_std must be positive")


@dataclass(frozen=True)
class TransformSpec:
    """Fully resolved transform. The crop rectangle is in units of the patch
    side (left, top, width, height all in [0, 1]) so it applies to any patch size."""

    crop_left: float = 0.0
    crop_top: float = 0.0
    crop_width: float = 1.0
    crop_height: float = 1.0
    flip: bool = False
    blur: bool = False
    blur_sigma: float = 0.0


IDENTITY = TransformSpec()


@dataclass(frozen=True)
class ViewPair:
    v1: np.ndarray
    v2: np.ndarray
    seed1: int
    seed2: int


def sample_transform(rng: np.random.Generator, cfg: AugmentConfig) -> TransformSpec:
    scale = rng.uniform(*cfg.crop_scale_range)
    log_lo, log_hi = math.log(cfg.crop_aspect_range[0]), math.log(cfg.crop_aspect_range[1])
    aspect = math.exp(rng.uniform(log_lo, log_hi))
    # Clamp rule: a side that would overflow the patch is cut to the full side.
    w = min(1.0, math.sqrt(scale * aspect))
    h = min(1.0, math.sqrt(scale / aspect))
    left = rng.uniform(0.0, 1.0 - w)
    top = rng.uniform(0.0, 1.0 - h)
    flip = bool(rng.random() < cfg.hflip_prob)
    blur = bool(rng.random() < cfg.blur_prob)
    sigma = float(rng.uniform(*cfg.blur_sigma_range))
    return TransformSpec(left, top, w, h, flip, blur, sigma if blur else 0.0)


def _interp_matrix(n_src: int, start: float, extent: float, n_dst: int) -> np.ndarray:
    """(n_dst, n_src) bilinear weights for ``n_dst`` pixel centres spanning
    [start, start + extent) of the source axis, edge-clamped."""
    step = extent / n_dst
    src = start + (np.arange(n_dst) + 0.5) * step - 0.5
    src = np.clip(src, 0.0, n_src - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_src - 1)
    frac = src - i0
    m = np.zeros((n_dst, n_src))
    rows = np.arange(n_dst)
    m[rows, i0] += 1.0 - frac
    m[rows, i1] += frac
    return m


def crop_resize(patch: np.ndarray, spec: TransformSpec, size: int) -> np.ndarray:
    """Crop the TransformSpec rectangle and resample it to ``size`` x ``size`` bilinearly
    (pixel-centre convention). Works on (..., H, W) stacks."""
    h, w = patch.shape[-2:]
    ry = _interp_matrix(h, spec.crop_top * h, spec.crop_height * h, size)
    rx = _interp_matrix(w, spec.crop_left * w, spec.crop_width * w, size)
    return ry @ patch @ rx.T


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma < SIGMA_MIN:
        return img
    k = gaussian_kernel(sigma)
    out = correlate1d(img, k, axis=-1, mode="reflect")
    return correlate1d(out, k, axis=-2, mode="reflect")


def normalize(x: np.ndarray, cfg: AugmentConfig) -> np.ndarray:
    return (x - cfg.normalize_mean) / cfg.normalize_std


def denormalize(x: np.ndarray, cfg: AugmentConfig) -> np.ndarray:
    return x * cfg.normalize_std + cfg.normalize_mean


def apply_transform(patch: np.ndarray, spec: TransformSpec, cfg: AugmentConfig) -> np.ndarray:
    """crop -> resize -> flip -> blur -> normalize; returns float32 view_size x view_size."""
    patch = np.asarray(patch, dtype=np.float64)
    if not np.all(np.isfinite(patch)):
        raise ValidationError("patch contains non-finite pixels")
    view = crop_resize(patch, spec, cfg.view_size)
    if spec.flip:
        view = view[..., ::-1]
    if spec.blur:
        view = gaussian_blur(view, spec.blur_sigma)
    return normalize(view, cfg).astype(np.float32)


def eval_transform(patches: np.ndarray, cfg: AugmentConfig) -> np.ndarray:
    """Deterministic evaluation pipeline: resize to view size and normalize. Accepts (..., H, W)."""
    patches = np.asarray(patches, dtype=np.float64)
    return normalize(crop_resize(patches, IDENTITY, cfg.view_size), cfg).astype(np.float32)


def make_views(patch: PatchRecord | np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> ViewPair:
    pixels = patch.pixels if isinstance(patch, PatchRecord) else patch
    if pixels is None:
        raise ValidationError("patch record carries no pixels")
    seed1, seed2 = (int(s) for s in rng.integers(0, 2**63 - 1, size=2))
    t1 = sample_transform(np.random.default_rng(seed1), cfg)
    t2 = sample_transform(np.random.default_rng(seed2), cfg)
    return ViewPair(apply_transform(pixels, t1, cfg), apply_transform(pixels, t2, cfg), seed1, seed2)
