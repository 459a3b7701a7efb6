"""Synthetic test objects."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

KINDS = ("blocks", "shepp3d-like", "random-smooth")


def _check_shape(shape):
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or any(s < 2 for s in shape):
        raise ValueError(f"phantom shape must be three extents >= 2, got {shape}")
    return shape


def blocks(shape, seed: int = 0, n_blocks: int = 6) -> np.ndarray:
    """Piecewise-constant boxes with random extents and levels."""
    shape = _check_shape(shape)
    rng = np.random.default_rng(seed)
    u = np.zeros(shape)
    for _ in range(n_blocks):
        lo = [rng.integers(0, max(1, s - s // 4)) for s in shape]
        hi = [min(s, a + rng.integers(max(2, s // 6), max(3, s // 2))) for a, s in zip(lo, shape)]
        u[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] += rng.uniform(0.3, 1.0)
    return u.astype(np.complex128)


# (value, center xyz, semi-axes xyz, rotation about axis 0 in degrees)
_ELLIPSOIDS = [
    (1.0, (0.0, 0.0, 0.0), (0.69, 0.92, 0.81), 0),
    (-0.8, (0.0, -0.0184, 0.0), (0.6624, 0.874, 0.78), 0),
    (-0.2, (0.22, 0.0, 0.0), (0.11, 0.31, 0.22), -18),
    (-0.2, (-0.22, 0.0, 0.0), (0.16, 0.41, 0.28), 18),
    (0.1, (0.0, 0.35, -0.15), (0.21, 0.25, 0.41), 0),
    (0.1, (0.0, 0.1, 0.25), (0.046, 0.046, 0.05), 0),
    (0.1, (-0.08, -0.605, 0.0), (0.046, 0.023, 0.05), 0),
    (0.1, (0.06, -0.605, 0.0), (0.023, 0.046, 0.02), 0),
]


def shepp3d_like(shape, seed: int = 0) -> np.ndarray:
    """Ellipsoid phantom in the style of the head test object.

    ``seed`` is accepted for interface symmetry; the object is fixed.
    """
    shape = _check_shape(shape)
    axes = [np.linspace(-1, 1, s) for s in shape]
    z, y, x = np.meshgrid(*axes, indexing="ij")
    u = np.zeros(shape)
    for val, (cx, cy, cz), (ax, ay, az), deg in _ELLIPSOIDS:
        t = np.deg2rad(deg)
        xr = (x - cx) * np.cos(t) + (y - cy) * np.sin(t)
        yr = -(x - cx) * np.sin(t) + (y - cy) * np.cos(t)
        inside = (xr / ax) ** 2 + (yr / ay) ** 2 + ((z - cz) / az) ** 2 <= 1
        u[inside] += val
    return u.astype(np.complex128)


def random_smooth(shape, seed: int = 0, sigma: float = 2.0) -> np.ndarray:
    """Gaussian-filtered white noise, scaled to unit peak magnitude."""
    shape = _check_shape(shape)
    rng = np.random.default_rng(seed)
    u = ndimage.gaussian_filter(rng.standard_normal(shape), sigma)
    return (u / np.abs(u).max()).astype(np.complex128)


def make_phantom(kind: str, shape, seed: int = 0) -> np.ndarray:
    if kind == "blocks":
        return blocks(shape, seed)
    if kind == "shepp3d-like":
        return shepp3d_like(shape, seed)
    if kind == "random-smooth":
        return random_smooth(shape, seed)
    raise ValueError(f"unknown phantom kind {kind!r}; choose from {KINDS}")
