"""Gaze representations and the angular error metric.

Convention: gaze (pitch, yaw) = (0, 0) looks straight into the camera,
along -z. Positive pitch looks up (towards -y, image y points down).
Angles are radians everywhere; only :func:`angular_error` reports degrees.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GazeAngles:
    pitch: float
    yaw: float

    def __post_init__(self):
        if not (math.isfinite(self.pitch) and math.isfinite(self.yaw)):
            raise ValueError(f"gaze angles must be finite, got ({self.pitch}, {self.yaw})")
        if abs(self.pitch) > math.pi / 2 + 1e-12:
            raise ValueError(f"pitch {self.pitch} outside [-pi/2, pi/2]")
        if not (-math.pi < self.yaw <= math.pi):
            raise ValueError(f"yaw {self.yaw} outside (-pi, pi]")

    def as_array(self) -> np.ndarray:
        return np.array([self.pitch, self.yaw])


@dataclass(frozen=True)
class GazeVector:
    x: float
    y: float
    z: float

    def __post_init__(self):
        n = math.sqrt(self.x * self.x + self.y * self.y + self.z * self.z)
        if not math.isfinite(n) or abs(n - 1.0) > 1e-9:
            raise ValueError(f"gaze vector must have unit norm, got |v| = {n}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])


def angles_to_vector(a: GazeAngles) -> GazeVector:
    x, y, z = pitchyaw_to_vectors(np.array([[a.pitch, a.yaw]]))[0]
    return GazeVector(float(x), float(y), float(z))


def vector_to_angles(v) -> GazeAngles:
    """Inverse of :func:`angles_to_vector`. Accepts a GazeVector or any 3-sequence."""
    arr = v.as_array() if isinstance(v, GazeVector) else np.asarray(v, dtype=np.float64)
    pitch, yaw = vectors_to_pitchyaw(arr[None, :])[0]
    return GazeAngles(float(pitch), float(yaw))


def angular_error(a: GazeAngles, b: GazeAngles) -> float:
    """Angle between two gaze directions, in degrees."""
    return float(angular_error_deg(a.as_array()[None], b.as_array()[None])[0])


def pitchyaw_to_vectors(py: np.ndarray) -> np.ndarray:
    """(N, 2) pitch/yaw radians -> (N, 3) unit vectors."""
    py = np.asarray(py, dtype=np.float64)
    if not np.all(np.isfinite(py)):
        raise ValueError("non-finite gaze angles")
    pitch, yaw = py[..., 0], py[..., 1]
    cp = np.cos(pitch)
    return np.stack([-cp * np.sin(yaw), -np.sin(pitch), -cp * np.cos(yaw)], axis=-1)


def vectors_to_pitchyaw(v: np.ndarray) -> np.ndarray:
    """(N, 3) direction vectors -> (N, 2) pitch/yaw radians. Inputs are normalized first."""
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if not np.all(np.isfinite(v)) or np.any(norm == 0):
        raise ValueError("gaze vectors must be finite and non-zero")
    v = v / norm
    pitch = -np.arcsin(np.clip(v[..., 1], -1.0, 1.0))
    yaw = np.arctan2(-v[..., 0], -v[..., 2])
    yaw = np.where(yaw <= -np.pi, np.pi, yaw)
    return np.stack([pitch, yaw], axis=-1)


def angular_error_deg(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Per-row angular error in degrees between (N, 2) pitch/yaw arrays."""
    a = pitchyaw_to_vectors(pred)
    b = pitchyaw_to_vectors(gt)
    dot = np.clip(np.sum(a * b, axis=-1), -1.0, 1.0)
    return np.degrees(np.arccos(dot))
