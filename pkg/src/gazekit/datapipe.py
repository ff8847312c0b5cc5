"""Manifest I/O, preprocessing to 36x60 gray, and subject-aware splits."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .errors import DataError
from .geometry import GazeAngles

INPUT_HW = (36, 60)
LUMA = (0.299, 0.587, 0.114)
PROTOCOLS = ("LOSO", "KFOLD")

_REQUIRED = {"image": str, "subject_id": str}
_OPTIONAL = {"eyeball_mask": str, "iris_mask": str, "pitch_rad": (int, float), "yaw_rad": (int, float),
             "id": str}


@dataclass
class SampleRecord:
    """One manifest line. Images are loaded on demand."""
    sample_id: str
    image: Path
    subject_id: str
    eyeball_mask: Path | None = None
    iris_mask: Path | None = None
    gaze: GazeAngles | None = None
    extra: dict = field(default_factory=dict)

    @property
    def has_masks(self) -> bool:
        return self.eyeball_mask is not None and self.iris_mask is not None

    def load(self, preprocessed: bool = True) -> "EyeSample":
        img = read_image(self.image)
        img = preprocess(img) if preprocessed else img.astype(np.float64) / 255.0
        masks = None
        if self.has_masks:
            from .synth import MaskPair
            eb = (read_image(self.eyeball_mask) > 127).astype(np.uint8)
            ir = (read_image(self.iris_mask) > 127).astype(np.uint8)
            if eb.shape != img.shape or ir.shape != img.shape:
                raise DataError(f"mask shape mismatch for sample {self.sample_id}")
            masks = MaskPair(eb, ir)
        return EyeSample(img, masks, self.gaze, self.subject_id, self.image, self.sample_id)

    def to_json(self, root: Path) -> dict:
        rec = dict(self.extra)
        rec["id"] = self.sample_id
        rec["image"] = _rel(self.image, root)
        rec["subject_id"] = self.subject_id
        if self.eyeball_mask is not None:
            rec["eyeball_mask"] = _rel(self.eyeball_mask, root)
        if self.iris_mask is not None:
            rec["iris_mask"] = _rel(self.iris_mask, root)
        if self.gaze is not None:
            rec["pitch_rad"] = self.gaze.pitch
            rec["yaw_rad"] = self.gaze.yaw
        return rec


@dataclass
class EyeSample:
    image: np.ndarray
    masks: object | None
    gaze: GazeAngles | None
    subject_id: str
    source_path: Path
    sample_id: str = ""


@dataclass(frozen=True)
class SplitPlan:
    protocol: str
    folds: tuple  # tuple of (train_subjects, test_subjects) frozensets
    k: int

    def validate(self, subjects) -> None:
        seen = set()
        for train, test in self.folds:
            if train & test:
                raise AssertionError("train/test overlap within a fold")
            if seen & test:
                raise AssertionError("subject appears in two test sets")
            seen |= test
        if seen != set(subjects):
            raise AssertionError("test sets do not cover every subject")


def read_image(path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise DataError(f"cannot read image {path}")
    if img.ndim == 3:
        img = cv2.cvtColor(img, cv2.COLOR_BGRA2RGB if img.shape[2] == 4 else cv2.COLOR_BGR2RGB)
    return img


def to_gray(raw: np.ndarray) -> np.ndarray:
    """Float gray in [0, 1]. Colour input is RGB(A); uint8 is scaled by 1/255."""
    img = np.asarray(raw)
    if img.size == 0:
        raise ValueError("empty image")
    img = img.astype(np.float64) / 255.0 if img.dtype == np.uint8 else img.astype(np.float64)
    if img.ndim == 3:
        if img.shape[2] == 1:
            img = img[..., 0]
        else:
            img = img[..., 0] * LUMA[0] + img[..., 1] * LUMA[1] + img[..., 2] * LUMA[2]
    elif img.ndim != 2:
        raise ValueError(f"expected HxW or HxWxC image, got shape {img.shape}")
    return img


def equalize_hist(gray: np.ndarray) -> np.ndarray:
    """256-bin histogram equalization of a [0, 1] image; output on the 1/255 grid."""
    q = np.round(np.clip(gray, 0.0, 1.0) * 255.0).astype(np.int64)
    hist = np.bincount(q.ravel(), minlength=256)
    cdf = np.cumsum(hist)
    n = q.size
    cdf_min = cdf[hist > 0][0]
    if cdf_min == n:
        return q / 255.0
    lut = np.round((cdf - cdf_min) / (n - cdf_min) * 255.0)
    lut = np.clip(lut, 0, 255)
    return lut[q] / 255.0


def resize_bilinear(img: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    """Half-pixel-centred bilinear resize with edge clamping."""
    h, w = hw
    if img.shape[:2] == (h, w):
        return img.copy()
    return cv2.resize(img, (w, h), interpolation=cv2.INTER_LINEAR)


def preprocess(raw: np.ndarray) -> np.ndarray:
    """gray -> bilinear resize to 36x60 -> histogram equalization."""
    img = np.asarray(raw)
    if img.ndim < 2 or img.shape[0] < 8 or img.shape[1] < 8:
        raise ValueError(f"image must be at least 8x8, got shape {img.shape}")
    gray = to_gray(img)
    gray = resize_bilinear(gray, INPUT_HW)
    return equalize_hist(gray)


def load_manifest(path, check_files: bool = True) -> list[SampleRecord]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    root = path.parent
    records = []
    missing = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                records.append(_parse_record(rec, root, lineno))
            except (json.JSONDecodeError, TypeError, KeyError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed manifest record: {exc}") from exc
    if check_files:
        for r in records:
            for p in (r.image, r.eyeball_mask, r.iris_mask):
                if p is not None and not p.exists():
                    missing.append(str(p))
        if missing:
            raise DataError(f"{len(missing)} files referenced by {path} are missing: " + ", ".join(missing[:20]))
    return records


def _parse_record(rec: dict, root: Path, lineno: int) -> SampleRecord:
    if not isinstance(rec, dict):
        raise TypeError("record is not a JSON object")
    for key, typ in _REQUIRED.items():
        if key not in rec:
            raise KeyError(f"missing field {key!r}")
        if not isinstance(rec[key], typ):
            raise TypeError(f"field {key!r} has wrong type")
    for key, typ in _OPTIONAL.items():
        if key in rec and rec[key] is not None and not isinstance(rec[key], typ):
            raise TypeError(f"field {key!r} has wrong type")
    if ("pitch_rad" in rec) != ("yaw_rad" in rec):
        raise ValueError("pitch_rad and yaw_rad must appear together")
    gaze = None
    if rec.get("pitch_rad") is not None:
        gaze = GazeAngles(float(rec["pitch_rad"]), float(rec["yaw_rad"]))
    known = set(_REQUIRED) | set(_OPTIONAL)
    return SampleRecord(
        sample_id=str(rec.get("id", f"line{lineno:06d}")),
        image=root / rec["image"],
        subject_id=rec["subject_id"],
        eyeball_mask=root / rec["eyeball_mask"] if rec.get("eyeball_mask") else None,
        iris_mask=root / rec["iris_mask"] if rec.get("iris_mask") else None,
        gaze=gaze,
        extra={k: v for k, v in rec.items() if k not in known},
    )


def write_manifest(records, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(path.parent), sort_keys=True) + "\n")
    return path


def _rel(p: Path, root: Path) -> str:
    try:
        return Path(p).resolve().relative_to(root.resolve()).as_posix()
    except ValueError:
        return str(Path(p).resolve())


def make_splits(samples, protocol: str = "LOSO", k: int = 5, seed: int = 0) -> SplitPlan:
    """Person-independent folds. ``samples`` may be records or subject ids."""
    subjects = sorted({s.subject_id if hasattr(s, "subject_id") else str(s) for s in samples})
    protocol = protocol.upper()
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}")
    everyone = frozenset(subjects)
    if protocol == "LOSO":
        if len(subjects) < 2:
            raise ValueError("LOSO needs at least 2 subjects")
        groups = [[s] for s in subjects]
        k = len(subjects)
    else:
        if k < 2 or len(subjects) < k:
            raise ValueError(f"KFOLD with k={k} needs at least k subjects, got {len(subjects)}")
        order = np.random.default_rng(seed).permutation(len(subjects))
        groups = [[subjects[i] for i in part] for part in np.array_split(order, k)]
    folds = tuple((everyone - frozenset(g), frozenset(g)) for g in groups)
    return SplitPlan(protocol, folds, k)


def subsample_labels(records, fraction: float, seed: int = 0) -> list:
    """Subject-stratified uniform subset of ceil(fraction * N) records."""
    records = list(records)
    if not records:
        raise ValueError("empty training set")
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction {fraction} outside (0, 1]")
    if fraction == 1.0:
        return records
    by_subject: dict[str, list[int]] = {}
    for i, r in enumerate(records):
        by_subject.setdefault(r.subject_id, []).append(i)
    subjects = sorted(by_subject)
    target = math.ceil(fraction * len(records) - 1e-9)
    exact = np.array([fraction * len(by_subject[s]) for s in subjects])
    quota = np.floor(exact).astype(int)
    rem = exact - quota
    # hand leftover slots to the largest remainders, ties by subject order
    for j in sorted(range(len(subjects)), key=lambda j: (-rem[j], j))[: target - quota.sum()]:
        quota[j] += 1
    rng = np.random.default_rng(seed)
    keep = []
    for s, q in zip(subjects, quota):
        idx = by_subject[s]
        keep.extend(idx[i] for i in rng.choice(len(idx), size=int(q), replace=False))
    return [records[i] for i in sorted(keep)]


@dataclass
class ArraySet:
    """Materialized samples as stacked arrays, ready for training."""
    ids: list
    subjects: list
    images: np.ndarray          # (N, H, W) float32
    masks: np.ndarray | None    # (N, 2, H, W) float32, channel 0 eyeball, 1 iris
    gaze: np.ndarray | None     # (N, 2) float64 pitch/yaw radians

    def __len__(self):
        return len(self.ids)

    def subset(self, idx) -> "ArraySet":
        idx = np.asarray(idx, dtype=np.int64)
        return ArraySet([self.ids[i] for i in idx], [self.subjects[i] for i in idx], self.images[idx],
                        None if self.masks is None else self.masks[idx],
                        None if self.gaze is None else self.gaze[idx])


def load_arrays(records, preprocessed: bool = True, require_masks: bool = False,
                require_gaze: bool = False) -> ArraySet:
    records = list(records)
    if require_masks and not all(r.has_masks for r in records):
        raise DataError("some samples have no mask ground truth")
    if require_gaze and not all(r.gaze is not None for r in records):
        raise DataError("some samples have no gaze label")
    samples = [r.load(preprocessed) for r in records]
    h, w = INPUT_HW
    images = np.zeros((len(samples), h, w), dtype=np.float32)
    for i, s in enumerate(samples):
        images[i] = s.image
    masks = None
    if records and all(s.masks is not None for s in samples):
        masks = np.stack([s.masks.stack() for s in samples]).astype(np.float32)
    gaze = None
    if records and all(s.gaze is not None for s in samples):
        gaze = np.array([[s.gaze.pitch, s.gaze.yaw] for s in samples], dtype=np.float64)
    return ArraySet([r.sample_id for r in records], [r.subject_id for r in records], images, masks, gaze)
