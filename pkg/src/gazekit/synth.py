"""Procedural eye-region renderer with landmark-derived masks.

Stands in for a full eye simulator: an eyeball disk seen through an
eyelid opening, an iris disk displaced by the gaze direction, a pupil,
and smooth texture noise. Landmarks are exact, so masks and gaze labels
are consistent with the image by construction.
"""
from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .errors import DataError
from .geometry import GazeAngles
from .kernels import disk_mask, polygon_mask, value_noise

PITCH_RANGE = (-math.radians(25.0), math.radians(25.0))
YAW_RANGE = (-math.radians(35.0), math.radians(35.0))
LID_POINTS = 16  # per lid; polygon has 2 * LID_POINTS vertices


def derive_seed(base: int, *labels) -> int:
    """Stable 63-bit seed from a base seed and a label path."""
    key = json.dumps([int(base), *[str(x) for x in labels]]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1


@dataclass(frozen=True)
class EyeSceneParams:
    gaze: GazeAngles
    eyelid_aperture: float
    eyeball_radius_px: float
    iris_radius_px: float
    pupil_radius_px: float
    sclera_shade: float
    iris_shade: float
    skin_shade: float
    noise_seed: int

    def validate(self) -> None:
        if not 0.0 < self.eyelid_aperture <= 1.0:
            raise ValueError(f"eyelid_aperture {self.eyelid_aperture} outside (0, 1]")
        if not 0.0 < self.pupil_radius_px < self.iris_radius_px < self.eyeball_radius_px:
            raise ValueError("radii must satisfy 0 < pupil < iris < eyeball")
        for name in ("sclera_shade", "iris_shade", "skin_shade"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} {v} outside [0, 1]")


@dataclass(frozen=True)
class LandmarkSet:
    eyelid_polygon: np.ndarray  # (K, 2) x, y pixel coordinates, closed implicitly
    iris_center: tuple[float, float]
    iris_radius: float


@dataclass
class MaskPair:
    eyeball: np.ndarray  # uint8 {0, 1}
    iris: np.ndarray
    degenerate: bool = field(default=False)

    def stack(self) -> np.ndarray:
        return np.stack([self.eyeball, self.iris])


def sample_scene(rng_seed: int, subject_seed: int | None = None) -> EyeSceneParams:
    """Draw scene parameters for a 36x60 crop.

    With ``subject_seed`` the appearance (radii, shades) is centred on a
    per-subject look and only jittered per sample; gaze and aperture are
    always drawn per sample.
    """
    rng = np.random.default_rng(rng_seed)
    pitch = rng.uniform(*PITCH_RANGE)
    yaw = rng.uniform(*YAW_RANGE)
    aperture = rng.uniform(0.45, 1.0)
    look = np.random.default_rng(subject_seed) if subject_seed is not None else rng
    eyeball = look.uniform(13.0, 17.0)
    iris_frac = look.uniform(0.42, 0.52)
    pupil_frac = look.uniform(0.35, 0.5)
    sclera = look.uniform(0.72, 0.9)
    iris = look.uniform(0.18, 0.45)
    skin = look.uniform(0.45, 0.7)
    if subject_seed is not None:
        eyeball *= rng.uniform(0.97, 1.03)
        pupil_frac *= rng.uniform(0.85, 1.15)
        sclera = float(np.clip(sclera + rng.normal(0, 0.02), 0, 1))
        skin = float(np.clip(skin + rng.normal(0, 0.03), 0, 1))
    iris_r = eyeball * iris_frac
    return EyeSceneParams(
        gaze=GazeAngles(float(pitch), float(yaw)),
        eyelid_aperture=float(aperture),
        eyeball_radius_px=float(eyeball),
        iris_radius_px=float(iris_r),
        pupil_radius_px=float(iris_r * pupil_frac),
        sclera_shade=float(sclera),
        iris_shade=float(iris),
        skin_shade=float(skin),
        noise_seed=int(rng.integers(0, 2**31 - 1)),
    )


def eye_landmarks(p: EyeSceneParams, h: int, w: int) -> LandmarkSet:
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    r = p.eyeball_radius_px
    upper = p.eyelid_aperture
    lower = 0.5 + 0.5 * p.eyelid_aperture
    t_up = np.linspace(0.0, math.pi, LID_POINTS, endpoint=False)
    t_lo = np.linspace(math.pi, 2 * math.pi, LID_POINTS, endpoint=False)
    up = np.stack([cx + r * np.cos(t_up), cy - upper * r * np.sin(t_up)], axis=1)
    lo = np.stack([cx + r * np.cos(t_lo), cy - lower * r * np.sin(t_lo)], axis=1)
    th, ph = p.gaze.pitch, p.gaze.yaw
    ic = (cx + r * math.sin(ph) * math.cos(th), cy - r * math.sin(th))
    return LandmarkSet(np.concatenate([up, lo]), ic, p.iris_radius_px)


def render_eye(p: EyeSceneParams, h: int = 36, w: int = 60) -> tuple[np.ndarray, LandmarkSet]:
    if h < 16 or w < 16:
        raise ValueError(f"image must be at least 16x16, got {h}x{w}")
    p.validate()
    lm = eye_landmarks(p, h, w)
    masks = landmarks_to_masks(lm, h, w)
    rng = np.random.default_rng(p.noise_seed)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    skin = p.skin_shade + 0.18 * (value_noise(rng, h, w, 8.0) - 0.5)
    skin += 0.06 * (value_noise(rng, h, w, 3.0) - 0.5)
    # darker crease above the opening
    skin -= 0.12 * np.exp(-((yy - (cy - 0.9 * p.eyeball_radius_px)) ** 2) / 8.0)

    sclera = p.sclera_shade * (1.0 - 0.12 * ((xx - cx) / p.eyeball_radius_px) ** 2)
    sclera += 0.04 * (value_noise(rng, h, w, 4.0) - 0.5)

    icx, icy = lm.iris_center
    dist = np.hypot(xx - icx, yy - icy)
    rel = dist / lm.iris_radius
    iris = p.iris_shade * (1.0 - 0.35 * np.clip(rel, 0, 1) ** 4)
    iris += 0.08 * (value_noise(rng, h, w, 2.0) - 0.5)

    img = skin
    eyeball = masks.eyeball.astype(bool)
    img = np.where(eyeball, sclera, img)
    img = np.where(masks.iris.astype(bool), iris, img)
    pupil = disk_mask(icx, icy, p.pupil_radius_px, h, w).astype(bool) & eyeball
    img = np.where(pupil, 0.05, img)
    # upper-lid shadow inside the opening
    top = cy - p.eyelid_aperture * p.eyeball_radius_px
    img = np.where(eyeball, img * (1.0 - 0.25 * np.exp(-np.clip(yy - top, 0, None) / 2.5)), img)
    img = img + rng.normal(0.0, 0.015, size=(h, w))
    return np.clip(img, 0.0, 1.0), lm


def landmarks_to_masks(lm: LandmarkSet, h: int, w: int) -> MaskPair:
    """Eyeball mask = eyelid polygon interior; iris mask = iris disk clipped to it."""
    poly = np.asarray(lm.eyelid_polygon, dtype=np.float64)
    if len(poly) < 3 or polygon_area(poly) == 0.0:
        warnings.warn("degenerate eyelid polygon; returning empty masks", RuntimeWarning, stacklevel=2)
        z = np.zeros((h, w), dtype=np.uint8)
        return MaskPair(z, z.copy(), degenerate=True)
    eyeball = polygon_mask(poly, h, w)
    iris = disk_mask(lm.iris_center[0], lm.iris_center[1], lm.iris_radius, h, w) & eyeball
    return MaskPair(eyeball, iris)


def polygon_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def gaze_from_landmarks(lm: LandmarkSet, eyeball_radius_px: float, h: int, w: int) -> GazeAngles:
    """Invert the iris placement: offset = r * (sin(yaw) cos(pitch), -sin(pitch))."""
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    dx = (lm.iris_center[0] - cx) / eyeball_radius_px
    dy = (lm.iris_center[1] - cy) / eyeball_radius_px
    pitch = -math.asin(max(-1.0, min(1.0, dy)))
    yaw = math.asin(max(-1.0, min(1.0, dx / math.cos(pitch))))
    return GazeAngles(pitch, yaw)


def to_png8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def generate_dataset(count: int, out_dir, seed: int = 0, h: int = 36, w: int = 60,
                     n_subjects: int = 5) -> Path:
    """Render ``count`` samples into ``out_dir`` and write ``manifest.jsonl``.

    Sample ``i`` belongs to subject ``i % n_subjects`` and is rendered from
    a seed derived from ``(seed, i)``, so output is independent of
    generation order.
    """
    if count < 0:
        raise ValueError("count must be >= 0")
    if n_subjects < 1:
        raise ValueError("n_subjects must be >= 1")
    out = Path(out_dir)
    manifest = out / "manifest.jsonl"
    written = 0
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
        with open(manifest, "w", encoding="utf-8") as fh:
            for i in range(count):
                subject = i % n_subjects
                params = sample_scene(derive_seed(seed, "sample", i),
                                      subject_seed=derive_seed(seed, "subject", subject))
                img, lm = render_eye(params, h, w)
                masks = landmarks_to_masks(lm, h, w)
                sid = f"{i:06d}"
                rec = {
                    "id": sid,
                    "image": f"images/{sid}.png",
                    "eyeball_mask": f"masks/{sid}_eyeball.png",
                    "iris_mask": f"masks/{sid}_iris.png",
                    "pitch_rad": params.gaze.pitch,
                    "yaw_rad": params.gaze.yaw,
                    "subject_id": f"s{subject:02d}",
                }
                _write_png(out / rec["image"], to_png8(img))
                _write_png(out / rec["eyeball_mask"], masks.eyeball * 255)
                _write_png(out / rec["iris_mask"], masks.iris * 255)
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
                written += 1
    except OSError as exc:
        raise DataError(f"dataset generation aborted after {written}/{count} samples "
                        f"in {out}: {exc}") from exc
    return manifest


def _write_png(path: Path, arr: np.ndarray) -> None:
    if not cv2.imwrite(str(path), np.ascontiguousarray(arr, dtype=np.uint8)):
        raise OSError(f"could not write {path}")
