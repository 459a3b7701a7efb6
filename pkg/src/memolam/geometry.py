"""Array shapes, the simplified laminography geometry, and chunk partitioning.

Object volumes are stored with axis order ``(n1, n0, n2)`` and projection
stacks with ``(n_theta, h, w)``.  Both are complex double precision.

Chunks are slabs along one axis.  They are the unit of pipelining,
memoization and work distribution.
"""

from __future__ import annotations

import io
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

SPACE = "space"
FREQUENCY = "frequency"
_DOMAINS = (SPACE, FREQUENCY)

DEFAULT_CHUNK_EXTENT = 16


@dataclass(frozen=True)
class Geometry:
    """Sizes of the object and detector plus the tilt/rotation parameters.

    ``phi`` is the tilt angle; the axial frequency grid is scaled by
    ``cos(phi)``, so ``phi = pi/2`` collapses it to zero (accepted with a
    warning).  ``thetas`` defaults to ``n_theta`` angles evenly covering
    ``[0, pi)``.
    """

    n1: int
    n0: int
    n2: int
    n_theta: int
    h: int
    w: int
    phi: float = math.pi / 6
    thetas: tuple = field(default=())

    def __post_init__(self):
        for name in ("n1", "n0", "n2", "n_theta", "h", "w"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if not (0.0 <= self.phi <= math.pi / 2):
            raise ValueError(f"phi must lie in [0, pi/2], got {self.phi}")
        if math.isclose(math.cos(self.phi), 0.0, abs_tol=1e-12):
            warnings.warn("phi = pi/2 makes every axial frequency zero", RuntimeWarning)
        if not self.thetas:
            thetas = tuple(math.pi * t / self.n_theta for t in range(self.n_theta))
            object.__setattr__(self, "thetas", thetas)
        else:
            object.__setattr__(self, "thetas", tuple(float(t) for t in self.thetas))
        th = np.asarray(self.thetas)
        if th.size != self.n_theta:
            raise ValueError("len(thetas) must equal n_theta")
        if np.any(np.diff(th) <= 0) or th[0] < 0 or th[-1] >= 2 * math.pi:
            raise ValueError("thetas must be strictly increasing in [0, 2*pi)")

    @classmethod
    def cube(cls, n: int, n_theta: int | None = None, phi: float = math.pi / 6) -> "Geometry":
        """Cubic object of side ``n`` seen by an ``n x n`` detector."""
        return cls(n, n, n, n_theta or n, n, n, phi)

    @property
    def volume_shape(self) -> tuple[int, int, int]:
        return (self.n1, self.n0, self.n2)

    @property
    def projection_shape(self) -> tuple[int, int, int]:
        return (self.n_theta, self.h, self.w)

    @property
    def intermediate_shape(self) -> tuple[int, int, int]:
        """Shape after the axial transform, ``(n1, h, n2)``."""
        return (self.n1, self.h, self.n2)


def _check_tagged(data: np.ndarray, domain: str, shape: tuple | None):
    if domain not in _DOMAINS:
        raise ValueError(f"domain must be one of {_DOMAINS}, got {domain!r}")
    if data.ndim != 3:
        raise ValueError(f"expected a 3-D array, got shape {data.shape}")
    if shape is not None and tuple(data.shape) != tuple(shape):
        raise ValueError(f"shape {data.shape} does not match {shape}")
    if not np.all(np.isfinite(data)):
        raise ValueError("array contains non-finite entries")


@dataclass(frozen=True, eq=False)
class Volume:
    """Object-space array ``(n1, n0, n2)``; intermediate ``(n1, h, n2)`` arrays
    produced by the axial transform are also carried in this type."""

    data: np.ndarray
    domain: str = SPACE

    def __post_init__(self):
        object.__setattr__(self, "data", np.asarray(self.data, dtype=np.complex128))
        _check_tagged(self.data, self.domain, None)

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True, eq=False)
class ProjectionSet:
    """Measured or simulated projections ``(n_theta, h, w)``."""

    data: np.ndarray
    domain: str = SPACE

    def __post_init__(self):
        object.__setattr__(self, "data", np.asarray(self.data, dtype=np.complex128))
        _check_tagged(self.data, self.domain, None)

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True, order=True)
class ChunkLocation:
    axis: int
    index: int
    extent: int

    def __post_init__(self):
        if self.extent < 1:
            raise ValueError("extent must be >= 1")
        if self.index < 0 or self.axis < 0:
            raise ValueError("axis and index must be non-negative")

    @property
    def start(self) -> int:
        return self.index * self.extent

    def slicer(self, stop: int) -> tuple:
        sl = [slice(None)] * (self.axis + 1)  # trailing axes are taken whole
        sl[self.axis] = slice(self.start, min(self.start + self.extent, stop))
        return tuple(sl)


@dataclass(frozen=True, eq=False)
class Chunk:
    location: ChunkLocation
    data: np.ndarray
    iteration: int = 0
    domain: str = SPACE
    kind: type = Volume


ArrayLike = Union[Volume, ProjectionSet, np.ndarray]


def _unwrap(array: ArrayLike):
    if isinstance(array, (Volume, ProjectionSet)):
        return array.data, array.domain, type(array)
    return np.asarray(array), SPACE, np.ndarray


def split_chunks(array: ArrayLike, axis: int = 0, extent: int = DEFAULT_CHUNK_EXTENT,
                 iteration: int = 0) -> list[Chunk]:
    """Cut ``array`` into slabs of ``extent`` along ``axis``.

    The last slab is short when ``extent`` does not divide the axis length.
    Slabs are views into the parent array.
    """
    data, domain, kind = _unwrap(array)
    if not 0 <= axis < data.ndim:
        raise ValueError(f"axis {axis} out of range for a {data.ndim}-D array")
    if extent <= 0:
        raise ValueError("extent must be positive")
    n = data.shape[axis]
    chunks = []
    for index in range(math.ceil(n / extent)):
        loc = ChunkLocation(axis, index, extent)
        chunks.append(Chunk(loc, data[loc.slicer(n)], iteration, domain, kind))
    return chunks


def merge_chunks(chunks: Sequence[Chunk]):
    """Inverse of :func:`split_chunks`; input order does not matter."""
    if not chunks:
        raise ValueError("no chunks to merge")
    ordered = sorted(chunks, key=lambda c: c.location.index)
    axis = ordered[0].location.axis
    extent = ordered[0].location.extent
    ref = ordered[0].data.shape
    for pos, ch in enumerate(ordered):
        loc = ch.location
        if loc.axis != axis or loc.extent != extent:
            raise ValueError("chunks come from different partitions")
        if loc.index != pos:
            raise ValueError(f"gap or overlap in chunk coverage at index {pos}")
        other = [s for a, s in enumerate(ch.data.shape) if a != axis]
        if other != [s for a, s in enumerate(ref) if a != axis]:
            raise ValueError("inconsistent slab shapes")
        if pos < len(ordered) - 1 and ch.data.shape[axis] != extent:
            raise ValueError("only the last slab may be short")
        if ch.data.shape[axis] > extent:
            raise ValueError("slab thicker than its extent")
    data = np.concatenate([c.data for c in ordered], axis=axis)
    kind = ordered[0].kind
    if kind in (Volume, ProjectionSet):
        return kind(data, ordered[0].domain)
    return data


def frequency_grids(geom: Geometry) -> tuple[np.ndarray, np.ndarray]:
    """Axial and in-plane sample frequencies (cycles per voxel).

    Returns ``nu_z`` with shape ``(h,)`` and ``nu_xy`` with shape
    ``(n_theta, w, 2)``.  Every component lies in ``[-1/2, 1/2]``.
    """
    k = np.arange(geom.h)
    nu_z = (k - geom.h / 2) / geom.h * math.cos(geom.phi)
    q = np.arange(geom.w)
    radius = (q - geom.w / 2) / geom.w
    th = np.asarray(geom.thetas)
    nu_xy = np.empty((geom.n_theta, geom.w, 2))
    nu_xy[..., 0] = radius[None, :] * np.cos(th)[:, None]
    nu_xy[..., 1] = radius[None, :] * np.sin(th)[:, None]
    return nu_z, nu_xy


# --- LVOL raw files -------------------------------------------------------

_LVOL_MAGIC = b"LVOL"
_DOMAIN_CODE = {SPACE: 0, FREQUENCY: 1}


def write_array(path, array: ArrayLike) -> None:
    """Write a complex array as an LVOL file."""
    data, domain, _ = _unwrap(array)
    data = np.ascontiguousarray(data, dtype="<c16")
    header = _LVOL_MAGIC + struct.pack("<BB", data.ndim, _DOMAIN_CODE[domain]) + bytes(10)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(struct.pack(f"<{data.ndim}Q", *data.shape))
        fh.write(data.tobytes())


def read_array(path) -> tuple[np.ndarray, str]:
    """Read an LVOL file; returns ``(data, domain)``."""
    raw = Path(path).read_bytes()
    return decode_array(raw)


def decode_array(raw: bytes) -> tuple[np.ndarray, str]:
    buf = io.BytesIO(raw)
    header = buf.read(16)
    if len(header) != 16 or header[:4] != _LVOL_MAGIC:
        raise ValueError("not an LVOL file")
    rank, code = header[4], header[5]
    if code not in (0, 1):
        raise ValueError(f"unknown domain tag {code}")
    dims = struct.unpack(f"<{rank}Q", buf.read(8 * rank))
    count = int(np.prod(dims)) if rank else 1
    body = buf.read()
    if len(body) != 16 * count:
        raise ValueError("LVOL payload size does not match its extents")
    data = np.frombuffer(body, dtype="<c16").reshape(dims).astype(np.complex128)
    return data, _DOMAINS[code]
