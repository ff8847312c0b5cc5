"""Gaze-preserving photometric augmentations.

No geometric transform lives here: flips, rotations or crops would move
the iris relative to the eyelids and corrupt the gaze label.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import cv2
import numpy as np

NOISE_MAX = 10.0       # gray levels on the 0-255 scale
BLUR_SIGMA_MAX = 2.0
CUTOUT_MAX = 10
DOWNSCALE_MAX = 2.0
LINES_MAX = 2
CONTRAST_RANGE = (0.5, 1.5)


@dataclass(frozen=True)
class AugmentSpec:
    noise_sigma_range: tuple = (0.0, NOISE_MAX)
    blur_sigma_range: tuple = (0.0, BLUR_SIGMA_MAX)
    cutout_size_range: tuple = (0, CUTOUT_MAX)
    downscale_range: tuple = (1.0, DOWNSCALE_MAX)
    line_count_range: tuple = (0, LINES_MAX)
    contrast_enabled: bool = True
    apply_prob: float = 0.5
    seed: int = 0

    @classmethod
    def identity(cls, seed: int = 0) -> "AugmentSpec":
        return cls((0.0, 0.0), (0.0, 0.0), (0, 0), (1.0, 1.0), (0, 0), False, 0.5, seed)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentSpec":
        d = dict(d)
        for key in ("noise_sigma_range", "blur_sigma_range", "cutout_size_range",
                    "downscale_range", "line_count_range"):
            if key in d:
                d[key] = tuple(d[key])
        spec = cls(**d)
        spec.validate()
        return spec

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def validate(self) -> None:
        _check_range("noise_sigma_range", self.noise_sigma_range, 0.0, NOISE_MAX)
        _check_range("blur_sigma_range", self.blur_sigma_range, 0.0, BLUR_SIGMA_MAX)
        _check_range("cutout_size_range", self.cutout_size_range, 0, CUTOUT_MAX)
        _check_range("downscale_range", self.downscale_range, 1.0, DOWNSCALE_MAX)
        _check_range("line_count_range", self.line_count_range, 0, LINES_MAX)
        if not 0.0 <= self.apply_prob <= 1.0:
            raise ValueError("apply_prob outside [0, 1]")


def _check_range(name, rng, lo, hi):
    if len(rng) != 2 or not (lo <= rng[0] <= rng[1] <= hi):
        raise ValueError(f"{name} {rng} must satisfy {lo} <= low <= high <= {hi}")


def _check_image(image):
    if image.ndim != 2:
        raise ValueError(f"expected a single-channel HxW image, got shape {image.shape}")


def gaussian_noise(image: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Additive zero-mean noise; ``sigma`` in gray levels of 255."""
    if not 0.0 <= sigma <= NOISE_MAX:
        raise ValueError(f"noise sigma {sigma} outside [0, {NOISE_MAX}]")
    if sigma == 0.0:
        return image.copy()
    noisy = image + rng.normal(0.0, sigma / 255.0, size=image.shape)
    return np.clip(noisy, 0.0, 1.0)


def blur_kernel(sigma: float) -> np.ndarray:
    """3x3 discretized Gaussian; sigma 0 is the delta kernel."""
    if sigma == 0.0:
        k1 = np.array([0.0, 1.0, 0.0])
    else:
        k1 = np.exp(-np.array([1.0, 0.0, 1.0]) / (2.0 * sigma * sigma))
        k1 /= k1.sum()
    return np.outer(k1, k1)


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    if not 0.0 <= sigma <= BLUR_SIGMA_MAX:
        raise ValueError(f"blur sigma {sigma} outside [0, {BLUR_SIGMA_MAX}]")
    _check_image(image)
    if sigma == 0.0:
        return image.copy()
    out = cv2.filter2D(image.astype(np.float64), -1, blur_kernel(sigma), borderType=cv2.BORDER_REFLECT_101)
    return np.clip(out, 0.0, 1.0).astype(image.dtype, copy=False)


def cutout(image: np.ndarray, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Zero one h x w rectangle placed uniformly inside the image."""
    if not (0 <= h <= CUTOUT_MAX and 0 <= w <= CUTOUT_MAX):
        raise ValueError(f"cutout size {h}x{w} outside [0, {CUTOUT_MAX}]")
    out = image.copy()
    if h == 0 or w == 0:
        return out
    H, W = image.shape[:2]
    h, w = min(h, H), min(w, W)
    top = int(rng.integers(0, H - h + 1))
    left = int(rng.integers(0, W - w + 1))
    out[top:top + h, left:left + w] = 0.0
    return out


def downscale(image: np.ndarray, factor: float) -> np.ndarray:
    """Bilinear resize to (H/f, W/f) and back to (H, W)."""
    if not 1.0 <= factor <= DOWNSCALE_MAX:
        raise ValueError(f"downscale factor {factor} outside [1, {DOWNSCALE_MAX}]")
    _check_image(image)
    if factor == 1.0:
        return image.copy()
    H, W = image.shape
    small_hw = (max(1, int(round(H / factor))), max(1, int(round(W / factor))))
    src = image.astype(np.float64)
    small = cv2.resize(src, (small_hw[1], small_hw[0]), interpolation=cv2.INTER_LINEAR)
    back = cv2.resize(small, (W, H), interpolation=cv2.INTER_LINEAR)
    return np.clip(back, 0.0, 1.0).astype(image.dtype, copy=False)


def random_lines(image: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` one-pixel lines with uniform endpoints and gray level."""
    if not 0 <= n <= LINES_MAX:
        raise ValueError(f"line count {n} outside [0, {LINES_MAX}]")
    _check_image(image)
    out = np.ascontiguousarray(image, dtype=np.float64).copy()
    H, W = image.shape
    for _ in range(n):
        x0, x1 = rng.integers(0, W, size=2)
        y0, y1 = rng.integers(0, H, size=2)
        level = float(rng.uniform(0.0, 1.0))
        cv2.line(out, (int(x0), int(y0)), (int(x1), int(y1)), level, thickness=1, lineType=cv2.LINE_8)
    return out.astype(image.dtype, copy=False)


def contrast(image: np.ndarray, rng: np.random.Generator, alpha: float | None = None) -> np.ndarray:
    """x -> clip(alpha * (x - mean) + mean), alpha drawn from [0.5, 1.5] when not given."""
    if alpha is None:
        alpha = float(rng.uniform(*CONTRAST_RANGE))
    elif not CONTRAST_RANGE[0] <= alpha <= CONTRAST_RANGE[1]:
        raise ValueError(f"contrast alpha {alpha} outside {CONTRAST_RANGE}")
    if alpha == 1.0:
        return image.copy()
    m = image.mean()
    return np.clip(alpha * (image - m) + m, 0.0, 1.0)


def apply_random(image: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Apply each transform independently with probability ``spec.apply_prob``.

    Order: downscale, blur, contrast, noise, lines, cutout. Parameters are
    drawn uniformly from the spec ranges.
    """
    p = spec.apply_prob
    out = image
    if rng.random() < p:
        out = downscale(out, float(rng.uniform(*spec.downscale_range)))
    if rng.random() < p:
        out = gaussian_blur(out, float(rng.uniform(*spec.blur_sigma_range)))
    if spec.contrast_enabled and rng.random() < p:
        out = contrast(out, rng)
    if rng.random() < p:
        out = gaussian_noise(out, float(rng.uniform(*spec.noise_sigma_range)), rng)
    if rng.random() < p:
        lo, hi = spec.line_count_range
        out = random_lines(out, int(rng.integers(lo, hi + 1)), rng)
    if rng.random() < p:
        lo, hi = spec.cutout_size_range
        out = cutout(out, int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1)), rng)
    return out if out is not image else image.copy()
