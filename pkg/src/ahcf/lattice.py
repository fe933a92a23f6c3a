"""Periodic lattices on flat tori and Fourier-collocation calculus.

Fields are stored grid-first: a field with ``r`` index slots on a lattice of
real dimension ``d`` has data shape ``(N,) * d + (d,) * r``.  Every
derivative, integral and norm in the package goes through this module.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

UP = "up"
DOWN = "down"


class LatticeError(ValueError):
    """Raised for malformed lattices or fields."""


@dataclass(frozen=True)
class Lattice:
    """Uniform periodic grid over the flat torus ``[0, L)^(2n)``."""

    n: int
    points_per_axis: int
    side_length: float = 2.0 * np.pi

    def __post_init__(self):
        if self.n not in (1, 2):
            raise LatticeError(f"complex dimension must be 1 or 2, got {self.n}")
        if self.points_per_axis < 4 or self.points_per_axis % 2:
            raise LatticeError("points_per_axis must be even and >= 4")
        if not self.side_length > 0:
            raise LatticeError("side_length must be positive")

    @property
    def dim(self) -> int:
        return 2 * self.n

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.points_per_axis,) * self.dim

    @property
    def spacing(self) -> float:
        return self.side_length / self.points_per_axis

    @property
    def cell_volume(self) -> float:
        return self.spacing**self.dim

    @property
    def volume(self) -> float:
        return self.side_length**self.dim

    @property
    def grid_axes(self) -> tuple[int, ...]:
        return tuple(range(self.dim))

    @cached_property
    def coords(self) -> tuple[np.ndarray, ...]:
        x = np.arange(self.points_per_axis) * self.spacing
        return tuple(np.meshgrid(*([x] * self.dim), indexing="ij"))

    @cached_property
    def _integer_modes(self) -> np.ndarray:
        N = self.points_per_axis
        return np.fft.fftfreq(N, 1.0 / N)

    @cached_property
    def _wavenumbers(self) -> tuple[np.ndarray, ...]:
        """Per-axis derivative multipliers ``i k`` shaped for an rfftn spectrum.

        The last grid axis carries the half spectrum.  Nyquist entries are
        zero so derivatives of real fields stay real.
        """
        N = self.points_per_axis
        scale = 2.0 * np.pi / self.side_length
        full = self._integer_modes.copy()
        full[N // 2] = 0.0
        half = np.arange(N // 2 + 1, dtype=float)
        half[N // 2] = 0.0
        out = []
        for a in range(self.dim):
            k = half if a == self.dim - 1 else full
            shape = [1] * self.dim
            shape[a] = k.size
            out.append(1j * scale * k.reshape(shape))
        return tuple(out)

    @cached_property
    def _spectral_shape(self) -> tuple[int, ...]:
        N = self.points_per_axis
        return (N,) * (self.dim - 1) + (N // 2 + 1,)

    def _band_mask(self, kmax: float) -> np.ndarray:
        N = self.points_per_axis
        mask = np.ones(self._spectral_shape, dtype=bool)
        for a in range(self.dim):
            k = np.abs(self._integer_modes) if a < self.dim - 1 else np.arange(N // 2 + 1)
            shape = [1] * self.dim
            shape[a] = k.size
            mask = mask & (k.reshape(shape) <= kmax)
        return mask

    @cached_property
    def resolved_mask(self) -> np.ndarray:
        """Spectral mask of the modes strictly below Nyquist on every axis."""
        return self._band_mask(self.points_per_axis // 2 - 1)

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        """Two-thirds rule: keep ``|k_a| <= N/3`` on every axis."""
        return self._band_mask(self.points_per_axis // 3)

    @property
    def max_resolved_wavenumber(self) -> float:
        return (self.points_per_axis // 2 - 1) * 2.0 * np.pi / self.side_length

    def zeros(self, rank: int = 0) -> np.ndarray:
        """Zero array for a tensor field with ``rank`` index slots."""
        return np.zeros(self.shape + (self.dim,) * rank)


def _check_finite(data: np.ndarray) -> None:
    if not np.all(np.isfinite(data)):
        raise LatticeError("field contains non-finite values")


@dataclass(frozen=True, eq=False)
class LatticeField:
    """A real tensor field sampled on a lattice.

    ``valence`` lists each index slot as ``"up"`` (contravariant) or
    ``"down"`` (covariant); data has shape ``lattice.shape + (d,) * len(valence)``.
    """

    lattice: Lattice
    valence: tuple[str, ...]
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "valence", tuple(self.valence))
        data = np.asarray(self.data, dtype=float)
        expected = self.lattice.shape + (self.lattice.dim,) * len(self.valence)
        if data.shape != expected:
            raise LatticeError(f"data shape {data.shape} != expected {expected}")
        if any(v not in (UP, DOWN) for v in self.valence):
            raise LatticeError(f"bad valence {self.valence}")
        _check_finite(data)
        object.__setattr__(self, "data", data)

    @property
    def rank(self) -> int:
        return len(self.valence)

    def like(self, data: np.ndarray) -> "LatticeField":
        return LatticeField(self.lattice, self.valence, data)

    def __add__(self, other: "LatticeField") -> "LatticeField":
        _same_kind(self, other)
        return self.like(self.data + other.data)

    def __sub__(self, other: "LatticeField") -> "LatticeField":
        _same_kind(self, other)
        return self.like(self.data - other.data)

    def __mul__(self, c: float) -> "LatticeField":
        return self.like(self.data * c)

    __rmul__ = __mul__

    def __neg__(self) -> "LatticeField":
        return self.like(-self.data)


def _same_kind(a: LatticeField, b: LatticeField) -> None:
    if a.lattice != b.lattice or a.valence != b.valence:
        raise LatticeError("fields live on different lattices or have different valence")


def scalar(lattice: Lattice, data: np.ndarray) -> LatticeField:
    return LatticeField(lattice, (), data)


def constant_field(lattice: Lattice, value: np.ndarray, valence: Sequence[str]) -> LatticeField:
    value = np.asarray(value, dtype=float)
    return LatticeField(lattice, tuple(valence), np.broadcast_to(value, lattice.shape + value.shape).copy())


# --- spectral calculus on raw arrays -------------------------------------------------


def _fft(lattice: Lattice, data: np.ndarray) -> np.ndarray:
    return np.fft.rfftn(data, axes=lattice.grid_axes)


def _ifft(lattice: Lattice, spec: np.ndarray) -> np.ndarray:
    return np.fft.irfftn(spec, s=lattice.shape, axes=lattice.grid_axes)


def _expand(mult: np.ndarray, extra: int) -> np.ndarray:
    return mult.reshape(mult.shape + (1,) * extra)


def deriv(lattice: Lattice, data: np.ndarray, axis: int) -> np.ndarray:
    """Fourier-collocation derivative of a raw array along one grid axis."""
    if not 0 <= axis < lattice.dim:
        raise LatticeError(f"axis {axis} out of range for dimension {lattice.dim}")
    extra = data.ndim - lattice.dim
    spec = _fft(lattice, data)
    return _ifft(lattice, spec * _expand(lattice._wavenumbers[axis], extra))


def grad(lattice: Lattice, data: np.ndarray) -> np.ndarray:
    """All first partials, derivative index appended as the last axis."""
    extra = data.ndim - lattice.dim
    spec = _fft(lattice, data)
    parts = [_ifft(lattice, spec * _expand(k, extra)) for k in lattice._wavenumbers]
    return np.stack(parts, axis=-1)


def hessian(lattice: Lattice, data: np.ndarray) -> np.ndarray:
    """Second partials, the two derivative indices appended last."""
    extra = data.ndim - lattice.dim
    spec = _fft(lattice, data)
    ks = lattice._wavenumbers
    d = lattice.dim
    out = np.empty(data.shape + (d, d))
    for a in range(d):
        for b in range(a, d):
            part = _ifft(lattice, spec * _expand(ks[a] * ks[b], extra))
            out[..., a, b] = part
            out[..., b, a] = part
    return out


def _masked(lattice: Lattice, data: np.ndarray, mask: np.ndarray) -> np.ndarray:
    extra = data.ndim - lattice.dim
    return _ifft(lattice, _fft(lattice, data) * _expand(mask, extra))


def resolve(lattice: Lattice, data: np.ndarray) -> np.ndarray:
    """Remove Nyquist content, leaving the resolved (band-limited) part."""
    return _masked(lattice, data, lattice.resolved_mask)


def dealias(lattice: Lattice, data: np.ndarray) -> np.ndarray:
    """Zero the top third of the spectrum on every axis."""
    return _masked(lattice, data, lattice.dealias_mask)


def grid_mean(lattice: Lattice, data: np.ndarray) -> np.ndarray:
    """Zero-frequency coefficient of every component."""
    return data.mean(axis=lattice.grid_axes)


# --- public field operations ----------------------------------------------------------


def spectral_derivative(f: LatticeField, axis: int) -> LatticeField:
    """Exact derivative of the resolved Fourier interpolant along ``axis``.

    The derivative slot is not appended: the result has the valence of ``f``.
    """
    _check_finite(f.data)
    return f.like(deriv(f.lattice, f.data, axis))


def integrate(f: LatticeField) -> float:
    """Rectangle-rule integral over the torus; exact for band-limited data."""
    if f.rank != 0:
        raise LatticeError("integrate expects a scalar field")
    return float(f.data.sum() * f.lattice.cell_volume)


@dataclass(frozen=True)
class NormReport:
    l2: float
    sup_by_order: dict[int, float]
    sobolev_l2_by_order: dict[int, float]

    @property
    def k(self) -> int:
        return max(self.sup_by_order)

    def ck(self, k: int | None = None) -> float:
        """Discrete C^k norm: the sum of the sup norms of orders 0..k."""
        k = self.k if k is None else k
        return float(sum(self.sup_by_order[j] for j in range(k + 1)))

    def to_dict(self) -> dict:
        return {
            "l2": self.l2,
            "sup_by_order": {str(j): v for j, v in self.sup_by_order.items()},
            "sobolev_l2_by_order": {str(j): v for j, v in self.sobolev_l2_by_order.items()},
        }


def orthonormal_frame(g: np.ndarray) -> np.ndarray:
    """Pointwise symmetric ``g^{-1/2}``; its columns are g-orthonormal.

    Raises ``LatticeError`` when ``g`` is not positive definite somewhere.
    """
    w, v = np.linalg.eigh(g)
    if np.min(w) <= 0:
        raise LatticeError("metric is not positive definite")
    return np.einsum("...ia,...a,...ja->...ij", v, w**-0.5, v)


def to_frame(data: np.ndarray, valence: Sequence[str], e: np.ndarray) -> np.ndarray:
    """Components of a tensor in the pointwise frame ``e`` (columns = frame vectors)."""
    einv = np.linalg.inv(e)
    out = data
    base = data.ndim - len(valence)
    for s, v in enumerate(valence):
        m = e if v == DOWN else np.swapaxes(einv, -1, -2)
        # contract slot s with m: new[..., a, ...] = sum_i old[..., i, ...] * m[..., i, a]
        out = np.moveaxis(out, base + s, -1)
        out = np.einsum("...i,...ia->...a", out, _broadcast_frame(m, out.ndim))
        out = np.moveaxis(out, -1, base + s)
    return out


def _broadcast_frame(m: np.ndarray, ndim: int) -> np.ndarray:
    # m has shape grid + (d, d); insert singleton axes for the untouched slots
    grid = m.ndim - 2
    return m.reshape(m.shape[:grid] + (1,) * (ndim - grid - 1) + m.shape[grid:])


def pointwise_norm(data: np.ndarray, valence: Sequence[str], operator: bool) -> np.ndarray:
    """Euclidean pointwise norm of frame components.

    With ``operator`` the first two slots are read as an endomorphism and its
    spectral norm is taken for each remaining multi-index.
    """
    r = len(valence)
    grid_nd = data.ndim - r
    if operator and r >= 2:
        mats = np.moveaxis(data, (grid_nd, grid_nd + 1), (-2, -1))
        op = np.linalg.norm(mats, ord=2, axis=(-2, -1))
        return np.sqrt(np.sum(op**2, axis=tuple(range(grid_nd, op.ndim))))
    return np.sqrt(np.sum(data**2, axis=tuple(range(grid_nd, data.ndim))))


def norms(f: LatticeField, g: LatticeField, k: int) -> NormReport:
    """Discrete C^j and L^{j,2} norms of ``f`` and its spectral derivatives.

    Endomorphism fields (valence up, down) use the pointwise operator norm
    for sup norms and the g-Frobenius norm for L^2.
    """
    if k < 0:
        raise LatticeError("k must be non-negative")
    lat = f.lattice
    e = orthonormal_frame(g.data)
    vol_density = np.sqrt(np.linalg.det(g.data))
    is_endo = f.valence == (UP, DOWN)
    sup, sob = {}, {}
    data, valence = f.data, f.valence
    for j in range(k + 1):
        comps = to_frame(data, valence, e)
        sup[j] = float(np.max(pointwise_norm(comps, valence, operator=is_endo)))
        dens = pointwise_norm(comps, valence, operator=False) ** 2
        sob[j] = float(np.sqrt(np.sum(dens * vol_density) * lat.cell_volume))
        if j < k:
            data = grad(lat, data)
            valence = valence + (DOWN,)
    return NormReport(l2=sob[0], sup_by_order=sup, sobolev_l2_by_order=sob)


def flat_metric(lattice: Lattice) -> LatticeField:
    return constant_field(lattice, np.eye(lattice.dim), (DOWN, DOWN))
