"""Perturbed structures, the tangent surrogate psi of rho, and the nonlinear error A.

``rho = (omega - omega0, J - J0)`` is the raw perturbation.  Its tangent
surrogate keeps the J0-anti-commuting block of ``J - J0`` as ``psi2`` and
assembles ``psi1`` from the (1,1) part of ``omega - omega0`` plus the
(2,0)+(0,2) form determined by ``psi2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .lattice import DOWN, UP, Lattice, LatticeField, NormReport, grad, orthonormal_frame, pointwise_norm, to_frame
from .linear import LinearOperatorHandle, apply_L, band_mask, random_band_limited
from .structure import (
    AHStructure,
    StructureError,
    TangentPerturbation,
    anti_commuting_part,
    anti_invariant_form,
    build_structure,
    commuting_part,
    form_parts,
    j_squared_residual,
)

ENDO = (UP, DOWN)
FORM = (DOWN, DOWN)


class PerturbationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Perturbation:
    h: LatticeField
    K: LatticeField

    @property
    def lattice(self) -> Lattice:
        return self.h.lattice

    def arrays(self):
        return self.h.data, self.K.data


def rho_of(s: AHStructure, ref: AHStructure) -> Perturbation:
    return Perturbation(s.omega - ref.omega, s.J - ref.J)


def pair_norms(a: np.ndarray, b: np.ndarray, g: np.ndarray, lat: Lattice, k: int) -> NormReport:
    """Norms of a (2-form, endomorphism) pair with pointwise norm ``sqrt(|a|^2 + |b|^2)``.

    Sup norms use the operator norm on the endomorphism slot; L^2 norms use
    Frobenius norms, all in a g-orthonormal frame.
    """
    e = orthonormal_frame(g)
    dens = np.sqrt(np.linalg.det(g))
    sup, sob = {}, {}
    va, vb = FORM, ENDO
    for j in range(k + 1):
        ca, cb = to_frame(a, va, e), to_frame(b, vb, e)
        na = pointwise_norm(ca, va, operator=False)
        sup[j] = float(np.sqrt(na**2 + pointwise_norm(cb, vb, operator=True) ** 2).max())
        l2dens = na**2 + pointwise_norm(cb, vb, operator=False) ** 2
        sob[j] = float(np.sqrt(np.sum(l2dens * dens) * lat.cell_volume))
        if j < k:
            a, b = grad(lat, a), grad(lat, b)
            va, vb = va + (DOWN,), vb + (DOWN,)
    return NormReport(l2=sob[0], sup_by_order=sup, sobolev_l2_by_order=sob)


def rho_norms(rho: Perturbation, ref: AHStructure, k: int) -> NormReport:
    return pair_norms(rho.h.data, rho.K.data, ref.g.data, rho.lattice, k)


def psi_norms(psi: TangentPerturbation, ref: AHStructure, k: int) -> NormReport:
    return pair_norms(psi.psi1.data, psi.psi2.data, ref.g.data, psi.lattice, k)


def psi_arrays(h: np.ndarray, K: np.ndarray, ref: AHStructure) -> tuple[np.ndarray, np.ndarray]:
    J0, omega0 = ref.J.data, ref.omega.data
    psi2 = anti_commuting_part(K, J0)
    h11, _ = form_parts(h, J0)
    return h11 + anti_invariant_form(psi2, omega0, J0), psi2


def psi_from_rho(rho: Perturbation, ref: AHStructure, check: bool = True) -> TangentPerturbation:
    if check:
        c0 = rho_norms(rho, ref, 0).sup_by_order[0]
        if not c0 < 1.0:
            raise PerturbationError(f"|rho|_C0 = {c0:.3g} is not below 1")
    p1, p2 = psi_arrays(rho.h.data, rho.K.data, ref)
    return TangentPerturbation.from_arrays(rho.lattice, p1, p2)


def psi_of(s: AHStructure, ref: AHStructure, check: bool = True) -> TangentPerturbation:
    return psi_from_rho(rho_of(s, ref), ref, check)


def reconstruct_commuting_block(
    psi2: LatticeField | np.ndarray, ref: AHStructure, tol: float = 1e-10, max_iter: int = 200
) -> np.ndarray:
    """Commuting completion ``Kc`` with ``(J0 + psi2 + Kc)^2 = -Id``.

    Iterates ``Kc <- J0 (psi2^2 + Kc^2) / 2`` from the quadratic seed
    ``J0 psi2^2 / 2``; the anti-commuting part of the identity holds for any
    ``Kc`` that is a polynomial in ``J0`` and ``psi2^2``.
    """
    p2 = psi2.data if isinstance(psi2, LatticeField) else np.asarray(psi2)
    return commuting_block_array(p2, ref.J.data, tol, max_iter)


def commuting_block_array(p2: np.ndarray, J0: np.ndarray, tol: float = 1e-10, max_iter: int = 200) -> np.ndarray:
    """Array form of :func:`reconstruct_commuting_block`; ``J0`` broadcasts against ``p2``."""
    if p2.size and np.linalg.norm(p2, ord=2, axis=(-2, -1)).max() >= 1.0:
        raise PerturbationError("psi2 must have operator norm below 1 for the iteration to contract")
    sq = p2 @ p2
    Kc = 0.5 * J0 @ sq
    prev = np.inf
    res = np.inf
    for _ in range(max_iter):
        J = J0 + p2 + Kc
        res = float(j_squared_residual(J).max()) if J.size else 0.0
        if res < tol:
            return Kc
        if res > prev * 0.999 and res > 1e-3:
            raise PerturbationError(f"commuting-block iteration is not contracting (residual {res:.2e})")
        prev = res
        Kc = 0.5 * J0 @ (sq + Kc @ Kc)
    raise PerturbationError(f"commuting-block iteration did not converge (residual {res:.2e})")


def complex_structure_from_psi2(psi2: np.ndarray, ref: AHStructure) -> np.ndarray:
    return ref.J.data + psi2 + reconstruct_commuting_block(psi2, ref)


def _sup_operator(a: np.ndarray) -> float:
    return float(np.linalg.norm(a, ord=2, axis=(-2, -1)).max())


def perturbation_fields(lat: Lattice, mode_band: tuple[int, int], seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic unit-sup generator ``E`` and symmetric metric direction ``S``."""
    rng = np.random.default_rng(seed)
    kmin, kmax = mode_band
    E = random_band_limited(lat, rng, 2, kmax=kmax, kmin=kmin)
    S = random_band_limited(lat, rng, 2, kmax=kmax, kmin=kmin)
    S = 0.5 * (S + np.swapaxes(S, -1, -2))
    return E / _sup_operator(E), S / _sup_operator(S)


def generate_perturbation(
    ref: AHStructure,
    amplitude: float,
    mode_band: tuple[int, int] = (1, 2),
    seed: int = 0,
    components: str = "both",
) -> AHStructure:
    """Structure with ``J = exp(aE) J0 exp(-aE)`` and metric averaged from ``g0 + a S``.

    ``components`` selects ``"both"``, ``"metric"`` (J = J0) or ``"complex"``
    (g0 = reference metric).  Deterministic in ``seed``.
    """
    if amplitude == 0:
        return ref
    if not 0 < amplitude < 0.1:
        raise PerturbationError("amplitude must lie in (0, 0.1)")
    if components not in ("both", "metric", "complex"):
        raise PerturbationError(f"unknown components selector {components!r}")
    lat = ref.lattice
    kmin, kmax = mode_band
    if kmin < 0 or kmax < max(kmin, 1) or kmax > lat.points_per_axis // 2 - 1:
        raise PerturbationError(f"mode band {mode_band} is not resolved on {lat.points_per_axis} points")
    E, S = perturbation_fields(lat, mode_band, seed)
    J0, g0 = ref.J.data, ref.g.data
    if components == "metric":
        E = np.zeros_like(E)
    if components == "complex":
        S = np.zeros_like(S)
    X = expm(amplitude * E)
    Xi = expm(-amplitude * E)
    J = X @ J0 @ Xi
    g = g0 + amplitude * S
    try:
        s = build_structure(LatticeField(lat, FORM, g), LatticeField(lat, ENDO, J))
    except StructureError as exc:
        raise PerturbationError(str(exc)) from exc
    c0 = rho_norms(rho_of(s, ref), ref, 0).sup_by_order[0]
    if not c0 < 1.0:
        raise PerturbationError(f"|rho|_C0 = {c0:.3g} is not below 1")
    return s


def commuting_remainder(rho: Perturbation, ref: AHStructure) -> np.ndarray:
    return commuting_part(rho.K.data, ref.J.data)


# --- nonlinear error tensor ----------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ResidualAReport:
    A: TangentPerturbation
    norms: NormReport
    psi_norms: NormReport
    bound_ratio: float
    t: float
    dt: float

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "dt": self.dt,
            "A": self.norms.to_dict(),
            "psi": self.psi_norms.to_dict(),
            "bound_ratio": self.bound_ratio,
        }


def residual_A(traj, index: int, handle: LinearOperatorHandle, reference: AHStructure | None = None) -> ResidualAReport:
    """``A = (psi(t+) - psi(t-)) / (t+ - t-) - L psi(t)`` at a recorded interior state.

    The bound ratio is ``|A|_C0 / (|psi|_C0 |d^2 psi|_C0 + |d psi|_C0^2)``.
    """
    states = traj.states
    if not 0 < index < len(states) - 1:
        raise PerturbationError("index must be interior to the trajectory")
    ref = reference if reference is not None else handle.background
    tm, t0, tp = states[index - 1].t, states[index].t, states[index + 1].t
    if not np.isclose(tp - t0, t0 - tm, rtol=1e-9, atol=1e-14):
        raise PerturbationError("central differencing needs equally spaced neighbours")
    pm = psi_of(states[index - 1].structure, ref, check=False)
    p0 = psi_of(states[index].structure, ref, check=False)
    pp = psi_of(states[index + 1].structure, ref, check=False)
    dpsi = (pp - pm) * (1.0 / (tp - tm))
    A = dpsi - apply_L(p0, handle, check=False)
    an = psi_norms(A, ref, 0)
    pn = psi_norms(p0, ref, 2)
    s = pn.sup_by_order
    denom = s[0] * s[2] + s[1] ** 2
    ratio = an.sup_by_order[0] / denom if denom > 0 else float("nan")
    return ResidualAReport(A=A, norms=an, psi_norms=pn, bound_ratio=float(ratio), t=t0, dt=(tp - tm) / 2)


def mode_support(data: np.ndarray, lat: Lattice, threshold: float = 1e-12) -> np.ndarray:
    """Integer max-norm wavenumbers carrying spectral energy above ``threshold`` (relative)."""
    spec = np.abs(np.fft.rfftn(data, axes=lat.grid_axes))
    energy = spec.reshape(lat._spectral_shape + (-1,)).max(axis=-1)
    cut = threshold * max(energy.max(), 1e-300)
    found = []
    for k in range(lat.points_per_axis // 2 + 1):
        mask = band_mask(lat, k, k) if k < lat.points_per_axis // 2 else None
        if mask is not None and np.any(energy[mask] > cut):
            found.append(k)
    return np.array(found)
