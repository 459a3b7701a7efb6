"""Laminography forward/adjoint operators built from Fourier transforms.

``L = F2D* . Fu2D . Fu1D`` and ``L* = Fu1D* . Fu2D* . F2D``.

* ``F2D`` is a centered, orthonormal 2-D DFT over each detector image, so
  ``F2D . F2D* = I`` holds to rounding.
* ``Fu1D`` maps ``u[n1, n0, n2]`` to ``[n1, h, n2]`` by evaluating, along
  axis 1, the Fourier sum at the unequally spaced axial frequencies.
* ``Fu2D`` maps ``[n1, h, n2]`` to ``[n_theta, h, w]`` by evaluating, for every
  detector row, the 2-D Fourier sum over ``(n1, n2)`` at the polar samples.

The nonuniform sums are unnormalized.  Two evaluation paths share one
contract: ``direct`` (dense NUDFT matrices, the reference) and ``gridding``
(fast Gaussian gridding on a 2x oversampled grid).

Every kernel below also accepts a slab of its full input: ``Fu1D``/``Fu1D*``
slabs along axis 0 and ``Fu2D``/``Fu2D*``/``F2D``/``F2D*`` slabs along axis 1
(angles, axis 0, for the 2-D DFTs).  Slab outputs are slabs of the full
output along the same axis.
"""

from __future__ import annotations

import functools
import math

import numpy as np
import scipy.sparse as sp

from .geometry import FREQUENCY, SPACE, Geometry, ProjectionSet, Volume, frequency_grids

# axis along which each memoizable operator is chunked
CHUNK_AXIS = {
    "fu1d": 0,
    "fu1d_adj": 0,
    "fu2d": 1,
    "fu2d_adj": 1,
    "f2d": 0,
    "f2d_adj": 0,
}

NUFFT_METHODS = ("direct", "gridding")


# --- uniform 2-D DFT ------------------------------------------------------

def _f2d_kernel(x: np.ndarray) -> np.ndarray:
    x = np.fft.ifftshift(x, axes=(-2, -1))
    return np.fft.fftshift(np.fft.fft2(x, norm="ortho"), axes=(-2, -1))


def _f2d_adj_kernel(x: np.ndarray) -> np.ndarray:
    x = np.fft.ifftshift(x, axes=(-2, -1))
    return np.fft.fftshift(np.fft.ifft2(x, norm="ortho"), axes=(-2, -1))


# --- Gaussian gridding ----------------------------------------------------

class _Gridder:
    """Gaussian-gridding evaluation of ``sum_m c[m] exp(-2j*pi*<nu, m>)``.

    ``m`` runs over ``range(n)`` per dimension; ``nu`` is ``(npts, ndim)``.
    The sum is shifted to a centered index set, deconvolved by the Gaussian's
    Fourier coefficients, transformed on an ``oversample*n`` grid and
    interpolated with a truncated periodic Gaussian of ``2*spread`` taps.
    """

    def __init__(self, nu: np.ndarray, sizes: tuple[int, ...], oversample: int = 2,
                 spread: int = 12):
        nu = np.atleast_2d(np.asarray(nu, dtype=float))
        self.sizes = tuple(sizes)
        self.fine = tuple(oversample * n for n in sizes)
        self.npts = nu.shape[0]
        shifts = np.array([n // 2 for n in sizes])
        self.phase = np.exp(-2j * np.pi * (nu @ shifts))
        weights = []
        cols = []
        self.deconv = []
        for d, (n, m_fine) in enumerate(zip(sizes, self.fine)):
            tau = math.pi * spread / (n * n * oversample * (oversample - 0.5))
            x = 2 * np.pi * nu[:, d]
            j0 = np.floor(x * m_fine / (2 * np.pi)).astype(int)
            offs = np.arange(-spread + 1, spread + 1)
            j = j0[:, None] + offs[None, :]
            dist = x[:, None] - 2 * np.pi * j / m_fine
            wts = math.sqrt(math.pi / tau) * np.exp(-dist * dist / (4 * tau)) / m_fine
            weights.append(wts)
            cols.append(np.mod(j, m_fine))
            mc = np.arange(n) - n // 2
            self.deconv.append(np.exp(tau * mc * mc))
        # separable tensor product of the per-dimension windows
        w_all = weights[0]
        c_all = cols[0]
        for d in range(1, len(sizes)):
            w_all = (w_all[:, :, None] * weights[d][:, None, :]).reshape(self.npts, -1)
            c_all = (c_all[:, :, None] * self.fine[d] + cols[d][:, None, :]).reshape(self.npts, -1)
        rows = np.repeat(np.arange(self.npts), c_all.shape[1])
        self.interp = sp.csr_matrix(
            (w_all.ravel(), (rows, c_all.ravel())),
            shape=(self.npts, int(np.prod(self.fine))),
        )
        self.interp_t = self.interp.T.tocsr()
        deconv = self.deconv[0]
        for d in range(1, len(sizes)):
            deconv = np.multiply.outer(deconv, self.deconv[d])
        self.deconv_full = deconv
        # fine-grid positions of the centered indices, per dimension
        self.index = np.ix_(*[np.mod(np.arange(n) - n // 2, mf) for n, mf in zip(sizes, self.fine)])

    def forward(self, c: np.ndarray) -> np.ndarray:
        """``c`` has shape ``(batch, *sizes)``; returns ``(npts, batch)``."""
        batch = c.shape[0]
        grid = np.zeros((batch,) + self.fine, dtype=np.complex128)
        grid[(slice(None),) + self.index] = c * self.deconv_full
        axes = tuple(range(1, grid.ndim))
        grid = np.fft.fftn(grid, axes=axes)
        out = self.interp @ grid.reshape(batch, -1).T
        return out * self.phase[:, None]

    def adjoint(self, f: np.ndarray) -> np.ndarray:
        """``f`` has shape ``(npts, batch)``; returns ``(batch, *sizes)``."""
        batch = f.shape[1]
        spread = self.interp_t @ (f * np.conj(self.phase)[:, None])
        grid = spread.T.reshape((batch,) + self.fine)
        axes = tuple(range(1, grid.ndim))
        grid = np.fft.ifftn(grid, axes=axes) * np.prod(self.fine)
        return grid[(slice(None),) + self.index] * self.deconv_full


# --- operator set -----------------------------------------------------------

class LaminoOperators:
    """Precomputed kernels for one geometry.

    Parameters
    ----------
    geom : Geometry
    nufft : {"direct", "gridding"}
        Evaluation path for the nonuniform transforms.
    """

    def __init__(self, geom: Geometry, nufft: str = "direct"):
        if nufft not in NUFFT_METHODS:
            raise ValueError(f"nufft must be one of {NUFFT_METHODS}")
        self.geom = geom
        self.nufft = nufft
        nu_z, nu_xy = frequency_grids(geom)
        self.nu_z = nu_z
        self.nu_xy = nu_xy.reshape(-1, 2)
        if nufft == "direct":
            m = np.arange(geom.n0)
            self.a1 = np.exp(-2j * np.pi * np.outer(nu_z, m))
            self.a1_h = np.ascontiguousarray(self.a1.conj().T)
            ii, jj = np.meshgrid(np.arange(geom.n1), np.arange(geom.n2), indexing="ij")
            phase = np.outer(self.nu_xy[:, 0], ii.ravel()) + np.outer(self.nu_xy[:, 1], jj.ravel())
            self.a2 = np.exp(-2j * np.pi * phase)
            self.a2_h = np.ascontiguousarray(self.a2.conj().T)
        else:
            self.grid1 = _Gridder(nu_z[:, None], (geom.n0,))
            self.grid2 = _Gridder(self.nu_xy, (geom.n1, geom.n2))

    # chunk-level kernels operate on raw arrays ---------------------------

    def fu1d(self, u: np.ndarray) -> np.ndarray:
        """``(k, n0, n2) -> (k, h, n2)``."""
        _trailing(u, (self.geom.n0, self.geom.n2), "fu1d")
        if self.nufft == "direct":
            return np.matmul(self.a1, u)
        k, n0, n2 = u.shape
        c = u.transpose(0, 2, 1).reshape(k * n2, n0)
        out = self.grid1.forward(c)  # (h, k*n2)
        return out.reshape(self.geom.h, k, n2).transpose(1, 0, 2)

    def fu1d_adj(self, v: np.ndarray) -> np.ndarray:
        """``(k, h, n2) -> (k, n0, n2)``."""
        _trailing(v, (self.geom.h, self.geom.n2), "fu1d_adj")
        if self.nufft == "direct":
            return np.matmul(self.a1_h, v)
        k, h, n2 = v.shape
        f = v.transpose(1, 0, 2).reshape(h, k * n2)
        c = self.grid1.adjoint(f)  # (k*n2, n0)
        return c.reshape(k, n2, self.geom.n0).transpose(0, 2, 1)

    def fu2d(self, v: np.ndarray) -> np.ndarray:
        """``(n1, r, n2) -> (n_theta, r, w)`` for any row count ``r``."""
        g = self.geom
        if v.ndim != 3 or v.shape[0] != g.n1 or v.shape[2] != g.n2:
            raise ValueError(f"fu2d expects (n1, r, n2) = ({g.n1}, r, {g.n2}), got {v.shape}")
        r = v.shape[1]
        if self.nufft == "direct":
            x = v.transpose(0, 2, 1).reshape(g.n1 * g.n2, r)
            y = self.a2 @ x
        else:
            y = self.grid2.forward(v.transpose(1, 0, 2))
        return y.reshape(g.n_theta, g.w, r).transpose(0, 2, 1)

    def fu2d_adj(self, p: np.ndarray) -> np.ndarray:
        """``(n_theta, r, w) -> (n1, r, n2)``."""
        g = self.geom
        if p.ndim != 3 or p.shape[0] != g.n_theta or p.shape[2] != g.w:
            raise ValueError(f"fu2d_adj expects (n_theta, r, w), got {p.shape}")
        r = p.shape[1]
        y = p.transpose(0, 2, 1).reshape(g.n_theta * g.w, r)
        if self.nufft == "direct":
            x = self.a2_h @ y
            return x.reshape(g.n1, g.n2, r).transpose(0, 2, 1)
        x = self.grid2.adjoint(y)  # (r, n1, n2)
        return x.transpose(1, 0, 2)

    def fused_sub_fu2d(self, v: np.ndarray, d_hat: np.ndarray) -> np.ndarray:
        """``fu2d(v) - d_hat`` with the subtraction applied to the kernel output."""
        out = self.fu2d(v)
        if out.shape != d_hat.shape:
            raise ValueError(f"d_hat shape {d_hat.shape} does not match fu2d output {out.shape}")
        out -= d_hat
        return out

    @staticmethod
    def f2d(p: np.ndarray) -> np.ndarray:
        return _f2d_kernel(p)

    @staticmethod
    def f2d_adj(p: np.ndarray) -> np.ndarray:
        return _f2d_adj_kernel(p)

    # whole-array compositions --------------------------------------------

    def forward(self, u: np.ndarray) -> np.ndarray:
        return self.f2d_adj(self.fu2d(self.fu1d(u)))

    def adjoint(self, d: np.ndarray) -> np.ndarray:
        return self.fu1d_adj(self.fu2d_adj(self.f2d(d)))

    def forward_freq(self, u: np.ndarray) -> np.ndarray:
        """``Fu2D . Fu1D``; ``||L u|| == ||forward_freq(u)||`` since F2D is unitary."""
        return self.fu2d(self.fu1d(u))


def _trailing(x: np.ndarray, expected: tuple, name: str):
    if x.ndim != 3 or tuple(x.shape[1:]) != expected:
        raise ValueError(f"{name} expects (k, {expected[0]}, {expected[1]}), got {x.shape}")


@functools.lru_cache(maxsize=16)
def get_operators(geom: Geometry, nufft: str = "direct") -> LaminoOperators:
    return LaminoOperators(geom, nufft)


# --- finite differences -----------------------------------------------------

def grad(u) -> np.ndarray:
    """Forward differences along the three axes, stacked as ``(3, *u.shape)``.

    The last difference along each axis is zero (replicated edge).
    """
    u = u.data if isinstance(u, Volume) else np.asarray(u)
    g = np.zeros((3,) + u.shape, dtype=np.result_type(u.dtype, np.float64))
    g[0, :-1] = u[1:] - u[:-1]
    g[1, :, :-1] = u[:, 1:] - u[:, :-1]
    g[2, :, :, :-1] = u[:, :, 1:] - u[:, :, :-1]
    return g


def div(g: np.ndarray) -> np.ndarray:
    """Negative adjoint of :func:`grad`: ``<grad u, g> = -<u, div g>``."""
    g = np.asarray(g)
    if g.ndim != 4 or g.shape[0] != 3:
        raise ValueError(f"div expects a (3, n1, n0, n2) field, got {g.shape}")
    out = np.zeros(g.shape[1:], dtype=g.dtype)
    for axis in range(3):
        ga = g[axis]
        n = ga.shape[axis]
        lead = [slice(None)] * 3
        head = list(lead); head[axis] = slice(0, n - 1)
        tail = list(lead); tail[axis] = slice(1, n)
        out[tuple(head)] += ga[tuple(head)]
        out[tuple(tail)] -= ga[tuple(head)]
    return out


# --- typed public API -------------------------------------------------------

def _need(x, kind, domain, name):
    if not isinstance(x, kind):
        raise TypeError(f"{name} expects a {kind.__name__}")
    if domain is not None and x.domain != domain:
        raise ValueError(f"{name} expects {domain}-domain input, got {x.domain}")


def _shape(x, shape, name):
    if tuple(x.shape) != tuple(shape):
        raise ValueError(f"{name}: shape {tuple(x.shape)} does not match geometry {tuple(shape)}")


def f2d(p: ProjectionSet) -> ProjectionSet:
    _need(p, ProjectionSet, SPACE, "f2d")
    return ProjectionSet(_f2d_kernel(p.data), FREQUENCY)


def f2d_adj(p: ProjectionSet) -> ProjectionSet:
    _need(p, ProjectionSet, FREQUENCY, "f2d_adj")
    return ProjectionSet(_f2d_adj_kernel(p.data), SPACE)


def fu1d(u: Volume, geom: Geometry, nufft: str = "direct") -> Volume:
    _need(u, Volume, SPACE, "fu1d")
    _shape(u, geom.volume_shape, "fu1d")
    return Volume(get_operators(geom, nufft).fu1d(u.data), FREQUENCY)


def fu1d_adj(v: Volume, geom: Geometry, nufft: str = "direct") -> Volume:
    _need(v, Volume, None, "fu1d_adj")
    _shape(v, geom.intermediate_shape, "fu1d_adj")
    return Volume(get_operators(geom, nufft).fu1d_adj(v.data), SPACE)


def fu2d(v: Volume, geom: Geometry, nufft: str = "direct") -> ProjectionSet:
    _need(v, Volume, None, "fu2d")
    _shape(v, geom.intermediate_shape, "fu2d")
    return ProjectionSet(get_operators(geom, nufft).fu2d(v.data), FREQUENCY)


def fu2d_adj(p: ProjectionSet, geom: Geometry, nufft: str = "direct") -> Volume:
    _need(p, ProjectionSet, None, "fu2d_adj")
    _shape(p, geom.projection_shape, "fu2d_adj")
    return Volume(get_operators(geom, nufft).fu2d_adj(p.data), FREQUENCY)


def fused_sub_fu2d(v: Volume, d_hat: ProjectionSet, geom: Geometry,
                   nufft: str = "direct") -> ProjectionSet:
    _need(v, Volume, None, "fused_sub_fu2d")
    _need(d_hat, ProjectionSet, FREQUENCY, "fused_sub_fu2d")
    _shape(v, geom.intermediate_shape, "fused_sub_fu2d")
    ops = get_operators(geom, nufft)
    return ProjectionSet(ops.fused_sub_fu2d(v.data, d_hat.data), FREQUENCY)


def forward_L(u: Volume, geom: Geometry, nufft: str = "direct") -> ProjectionSet:
    """``L u = F2D*(Fu2D(Fu1D u))``."""
    return f2d_adj(fu2d(fu1d(u, geom, nufft), geom, nufft))


def adjoint_L(d: ProjectionSet, geom: Geometry, nufft: str = "direct") -> Volume:
    """``L* d = Fu1D*(Fu2D*(F2D d))``."""
    return fu1d_adj(fu2d_adj(f2d(d), geom, nufft), geom, nufft)
