"""Per-pixel raster kernels used by the synthetic eye renderer.

Every kernel has a numba implementation (``*_nb``) and a vectorized numpy
implementation (``*_np``). The public wrappers dispatch on
:data:`gazekit._accel.USE_NUMBA`.

Pixel ``(row, col)`` is sampled at its center ``(x=col, y=row)``. Points
lying on a region boundary count as inside.
"""
import numpy as np

from . import _accel
from ._accel import njit

# distance (px) under which a pixel center is treated as on an edge
EDGE_EPS = 1e-9


@njit(cache=True)
def _polygon_mask_nb(xs, ys, h, w, eps):
    n = xs.shape[0]
    out = np.zeros((h, w), dtype=np.uint8)
    for r in range(h):
        py = float(r)
        for c in range(w):
            px = float(c)
            inside = False
            on_edge = False
            for i in range(n):
                j = (i + 1) % n
                x1 = xs[i]
                y1 = ys[i]
                x2 = xs[j]
                y2 = ys[j]
                dx = x2 - x1
                dy = y2 - y1
                cross = dx * (py - y1) - dy * (px - x1)
                seg2 = dx * dx + dy * dy
                if seg2 > 0.0:
                    if cross * cross <= eps * eps * seg2:
                        dot = (px - x1) * dx + (py - y1) * dy
                        if dot >= -eps and dot <= seg2 + eps:
                            on_edge = True
                            break
                elif (px - x1) * (px - x1) + (py - y1) * (py - y1) <= eps * eps:
                    on_edge = True
                    break
                if (y1 > py) != (y2 > py):
                    xint = x1 + (py - y1) * dx / dy
                    if px < xint:
                        inside = not inside
            if on_edge or inside:
                out[r, c] = 1
    return out


def _polygon_mask_np(xs, ys, h, w, eps):
    py, px = np.mgrid[0:h, 0:w].astype(np.float64)
    inside = np.zeros((h, w), dtype=bool)
    on_edge = np.zeros((h, w), dtype=bool)
    n = xs.shape[0]
    for i in range(n):
        j = (i + 1) % n
        x1, y1, x2, y2 = xs[i], ys[i], xs[j], ys[j]
        dx = x2 - x1
        dy = y2 - y1
        seg2 = dx * dx + dy * dy
        if seg2 > 0.0:
            cross = dx * (py - y1) - dy * (px - x1)
            dot = (px - x1) * dx + (py - y1) * dy
            on_edge |= (cross * cross <= eps * eps * seg2) & (dot >= -eps) & (dot <= seg2 + eps)
        else:
            on_edge |= (px - x1) * (px - x1) + (py - y1) * (py - y1) <= eps * eps
        straddle = (y1 > py) != (y2 > py)
        if dy != 0.0:
            with np.errstate(invalid="ignore", divide="ignore"):
                xint = x1 + (py - y1) * dx / dy
            inside ^= straddle & (px < xint)
    return (inside | on_edge).astype(np.uint8)


@njit(cache=True)
def _disk_mask_nb(cx, cy, radius, h, w):
    out = np.zeros((h, w), dtype=np.uint8)
    r2 = radius * radius
    for r in range(h):
        ddy = float(r) - cy
        for c in range(w):
            ddx = float(c) - cx
            if ddx * ddx + ddy * ddy <= r2:
                out[r, c] = 1
    return out


def _disk_mask_np(cx, cy, radius, h, w):
    py, px = np.mgrid[0:h, 0:w].astype(np.float64)
    ddx = px - cx
    ddy = py - cy
    return (ddx * ddx + ddy * ddy <= radius * radius).astype(np.uint8)


@njit(cache=True)
def _value_noise_nb(lattice, cell, h, w):
    out = np.zeros((h, w), dtype=np.float64)
    for r in range(h):
        fy = r / cell
        iy = int(fy)
        ty = fy - iy
        sy = ty * ty * (3.0 - 2.0 * ty)
        for c in range(w):
            fx = c / cell
            ix = int(fx)
            tx = fx - ix
            sx = tx * tx * (3.0 - 2.0 * tx)
            a = lattice[iy, ix] + sx * (lattice[iy, ix + 1] - lattice[iy, ix])
            b = lattice[iy + 1, ix] + sx * (lattice[iy + 1, ix + 1] - lattice[iy + 1, ix])
            out[r, c] = a + sy * (b - a)
    return out


def _value_noise_np(lattice, cell, h, w):
    fy = np.arange(h, dtype=np.float64) / cell
    fx = np.arange(w, dtype=np.float64) / cell
    iy = fy.astype(np.int64)
    ix = fx.astype(np.int64)
    ty = fy - iy
    tx = fx - ix
    sy = (ty * ty * (3.0 - 2.0 * ty))[:, None]
    sx = (tx * tx * (3.0 - 2.0 * tx))[None, :]
    iy = iy[:, None]
    ix = ix[None, :]
    a = lattice[iy, ix] + sx * (lattice[iy, ix + 1] - lattice[iy, ix])
    b = lattice[iy + 1, ix] + sx * (lattice[iy + 1, ix + 1] - lattice[iy + 1, ix])
    return a + sy * (b - a)


def polygon_mask(vertices, h: int, w: int, *, use_numba: bool | None = None) -> np.ndarray:
    """Rasterize the interior (boundary inclusive) of a closed polygon to a uint8 {0,1} map."""
    v = np.ascontiguousarray(vertices, dtype=np.float64).reshape(-1, 2)
    xs = np.ascontiguousarray(v[:, 0])
    ys = np.ascontiguousarray(v[:, 1])
    if xs.shape[0] < 3:
        return np.zeros((h, w), dtype=np.uint8)
    fn = _polygon_mask_nb if _pick(use_numba) else _polygon_mask_np
    return fn(xs, ys, int(h), int(w), EDGE_EPS)


def disk_mask(cx: float, cy: float, radius: float, h: int, w: int, *, use_numba: bool | None = None) -> np.ndarray:
    fn = _disk_mask_nb if _pick(use_numba) else _disk_mask_np
    return fn(float(cx), float(cy), float(radius), int(h), int(w))


def value_noise(rng: np.random.Generator, h: int, w: int, cell: float,
                *, use_numba: bool | None = None) -> np.ndarray:
    """Smooth lattice noise in [0, 1]; lattice spacing ``cell`` pixels."""
    if cell <= 0:
        raise ValueError("cell must be positive")
    lattice = rng.random((int(h / cell) + 2, int(w / cell) + 2))
    fn = _value_noise_nb if _pick(use_numba) else _value_noise_np
    return fn(lattice, float(cell), int(h), int(w))


def _pick(use_numba):
    if use_numba is None:
        return _accel.USE_NUMBA
    return bool(use_numba) and _accel.HAS_NUMBA
