"""Compatible almost hermitian structures (g, J, omega) and J-type splits.

Conventions: ``J[..., i, j] = J^i_j`` acts on column vectors, and
``omega(X, Y) = g(JX, Y)``, i.e. ``omega = J^T g`` as matrices.  The standard
complex structure sends ``e_{2m}`` to ``e_{2m+1}``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lattice import DOWN, UP, Lattice, LatticeError, LatticeField, constant_field

CONSTRUCTION_TOL = 1e-9
EVOLUTION_TOL = 1e-8

ENDO = (UP, DOWN)
FORM = (DOWN, DOWN)


class StructureError(ValueError):
    """Raised when (g, J) do not define a valid almost hermitian structure."""


def standard_complex_matrix(dim: int) -> np.ndarray:
    J = np.zeros((dim, dim))
    for m in range(dim // 2):
        J[2 * m + 1, 2 * m] = 1.0
        J[2 * m, 2 * m + 1] = -1.0
    return J


def _T(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def pullback(form: np.ndarray, A: np.ndarray, B: np.ndarray | None = None) -> np.ndarray:
    """Matrix of ``(X, Y) -> form(AX, BY)``."""
    B = A if B is None else B
    return _T(A) @ form @ B


@dataclass(frozen=True, eq=False)
class AHStructure:
    g: LatticeField
    J: LatticeField
    omega: LatticeField
    volume: float

    @property
    def lattice(self) -> Lattice:
        return self.g.lattice

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.g.data, self.J.data, self.omega.data


@dataclass(frozen=True)
class StructureDiagnostics:
    j_squared: float
    compatibility: float
    omega_consistency: float
    min_eig_g: float

    def max_residual(self) -> float:
        return max(self.j_squared, self.compatibility, self.omega_consistency)

    def to_dict(self) -> dict:
        return dict(
            j_squared=self.j_squared,
            compatibility=self.compatibility,
            omega_consistency=self.omega_consistency,
            min_eig_g=self.min_eig_g,
        )


def metric_volume(lattice: Lattice, g: np.ndarray) -> float:
    return float(np.sqrt(np.linalg.det(g)).sum() * lattice.cell_volume)


def j_squared_residual(J: np.ndarray) -> np.ndarray:
    """Pointwise max-abs entry of ``J^2 + Id``."""
    eye = np.eye(J.shape[-1])
    return np.abs(J @ J + eye).max(axis=(-2, -1))


def build_structure(g0: LatticeField, J: LatticeField, tol: float = CONSTRUCTION_TOL) -> AHStructure:
    """Average ``g0`` over J and derive omega.

    ``g(X, Y) = (g0(X, Y) + g0(JX, JY)) / 2`` is exactly J-invariant, so the
    only checks are ``J^2 = -Id`` and positive definiteness.
    """
    if g0.valence != FORM or J.valence != ENDO or g0.lattice != J.lattice:
        raise StructureError("build_structure expects a (0,2) metric and a (1,1) endomorphism")
    Jd = J.data
    res = float(j_squared_residual(Jd).max())
    if res > tol:
        raise StructureError(f"J^2 + Id residual {res:.3e} exceeds {tol:.1e}")
    g0d = 0.5 * (g0.data + _T(g0.data))
    g = 0.5 * (g0d + pullback(g0d, Jd))
    g = 0.5 * (g + _T(g))
    if np.linalg.eigvalsh(g).min() <= 0:
        raise StructureError("averaged metric is not positive definite")
    return assemble(J.lattice, g, Jd)


def assemble(lattice: Lattice, g: np.ndarray, J: np.ndarray) -> AHStructure:
    """Wrap an already compatible pair (g, J); omega is derived, never stored independently."""
    omega = _T(J) @ g
    omega = 0.5 * (omega - _T(omega))
    return AHStructure(
        g=LatticeField(lattice, FORM, g),
        J=LatticeField(lattice, ENDO, J),
        omega=LatticeField(lattice, FORM, omega),
        volume=metric_volume(lattice, g),
    )


def standard_structure(lattice: Lattice) -> AHStructure:
    d = lattice.dim
    g = constant_field(lattice, np.eye(d), FORM)
    J = constant_field(lattice, standard_complex_matrix(d), ENDO)
    return build_structure(g, J)


def constant_structure(lattice: Lattice, g: np.ndarray, J: np.ndarray) -> AHStructure:
    return build_structure(constant_field(lattice, g, FORM), constant_field(lattice, J, ENDO))


def check_structure(s: AHStructure) -> StructureDiagnostics:
    g, J, omega = s.arrays()
    compat = np.abs(pullback(g, J) - g).max()
    omega_res = np.abs(omega - _T(J) @ g).max()
    return StructureDiagnostics(
        j_squared=float(j_squared_residual(J).max()),
        compatibility=float(compat),
        omega_consistency=float(omega_res),
        min_eig_g=float(np.linalg.eigvalsh(0.5 * (g + _T(g))).min()),
    )


# --- type decompositions with respect to a reference complex structure ---------------


@dataclass(frozen=True, eq=False)
class EndoTypeBlocks:
    """The four complex-type blocks of an endomorphism relative to a reference J.

    ``k_a_b`` maps ``T^{b}`` into ``T^{a}`` (e.g. ``k_10_01`` sends (0,1)-vectors
    to (1,0)-vectors).  Blocks are complex-valued matrices in the real
    coordinate basis; conjugate pairs sum to real fields: the anti-commuting
    part is ``k_10_01 + k_01_10`` and the commuting part ``k_10_10 + k_01_01``.
    """

    k_10_01: np.ndarray
    k_01_10: np.ndarray
    k_10_10: np.ndarray
    k_01_01: np.ndarray

    @property
    def anti_commuting(self) -> np.ndarray:
        return (self.k_10_01 + self.k_01_10).real

    @property
    def commuting(self) -> np.ndarray:
        return (self.k_10_10 + self.k_01_01).real

    def total(self) -> np.ndarray:
        return self.k_10_01 + self.k_01_10 + self.k_10_10 + self.k_01_01


@dataclass(frozen=True, eq=False)
class FormTypeBlocks:
    part_11: LatticeField
    part_20_02: LatticeField


def anti_commuting_part(K: np.ndarray, J0: np.ndarray) -> np.ndarray:
    return 0.5 * (K + J0 @ K @ J0)


def commuting_part(K: np.ndarray, J0: np.ndarray) -> np.ndarray:
    return 0.5 * (K - J0 @ K @ J0)


def holomorphic_projector(J0: np.ndarray) -> np.ndarray:
    """``P = (Id - i J0) / 2``, the projector onto the +i eigenspace ``T^{1,0}``."""
    return 0.5 * (np.eye(J0.shape[-1]) - 1j * J0)


def decompose_endo(K: LatticeField, ref: AHStructure) -> EndoTypeBlocks:
    J0 = ref.J.data
    P = holomorphic_projector(J0)
    Pb = P.conj()
    Kc = K.data.astype(complex)
    return EndoTypeBlocks(
        k_10_01=P @ Kc @ Pb,
        k_01_10=Pb @ Kc @ P,
        k_10_10=P @ Kc @ P,
        k_01_01=Pb @ Kc @ Pb,
    )


def form_parts(h: np.ndarray, J0: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    hJ = pullback(h, J0)
    return 0.5 * (h + hJ), 0.5 * (h - hJ)


def decompose_form(h: LatticeField, ref: AHStructure) -> FormTypeBlocks:
    hd = h.data
    if np.abs(hd + _T(hd)).max() > CONSTRUCTION_TOL * max(1.0, np.abs(hd).max()):
        raise StructureError("decompose_form expects an antisymmetric (0,2) field")
    p11, p20 = form_parts(hd, ref.J.data)
    return FormTypeBlocks(part_11=h.like(p11), part_20_02=h.like(p20))


def anti_invariant_form(psi2: np.ndarray, omega0: np.ndarray, J0: np.ndarray) -> np.ndarray:
    """``(X, Y) -> omega0(psi2 X, J0 Y) + omega0(J0 X, psi2 Y)``."""
    return pullback(omega0, psi2, J0) + pullback(omega0, J0, psi2)


# --- tangent perturbations ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TangentPerturbation:
    """A pair (psi1, psi2): a 2-form and an endomorphism anti-commuting with the reference J."""

    psi1: LatticeField
    psi2: LatticeField

    def __post_init__(self):
        if self.psi1.valence != FORM or self.psi2.valence != ENDO:
            raise LatticeError("psi1 must be a (0,2) field and psi2 a (1,1) field")
        if self.psi1.lattice != self.psi2.lattice:
            raise LatticeError("psi components live on different lattices")

    @property
    def lattice(self) -> Lattice:
        return self.psi1.lattice

    @classmethod
    def from_arrays(cls, lattice: Lattice, p1: np.ndarray, p2: np.ndarray) -> "TangentPerturbation":
        return cls(LatticeField(lattice, FORM, p1), LatticeField(lattice, ENDO, p2))

    @classmethod
    def zeros(cls, lattice: Lattice) -> "TangentPerturbation":
        return cls.from_arrays(lattice, lattice.zeros(2), lattice.zeros(2))

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return self.psi1.data, self.psi2.data

    def flat(self) -> np.ndarray:
        return np.concatenate([self.psi1.data.ravel(), self.psi2.data.ravel()])

    def map(self, f) -> "TangentPerturbation":
        return TangentPerturbation.from_arrays(self.lattice, f(self.psi1.data), f(self.psi2.data))

    def __add__(self, o: "TangentPerturbation") -> "TangentPerturbation":
        return TangentPerturbation(self.psi1 + o.psi1, self.psi2 + o.psi2)

    def __sub__(self, o: "TangentPerturbation") -> "TangentPerturbation":
        return TangentPerturbation(self.psi1 - o.psi1, self.psi2 - o.psi2)

    def __mul__(self, c: float) -> "TangentPerturbation":
        return TangentPerturbation(self.psi1 * c, self.psi2 * c)

    __rmul__ = __mul__

    def type_residuals(self, ref: AHStructure) -> dict:
        """Anti-commutation of psi2 and the linearized compatibility of psi1 against psi2."""
        J0 = ref.J.data
        p1, p2 = self.arrays()
        anti = np.abs(p2 @ J0 + J0 @ p2).max()
        _, p20 = form_parts(p1, J0)
        compat = np.abs(p20 - anti_invariant_form(p2, ref.omega.data, J0)).max()
        skew = np.abs(p1 + _T(p1)).max()
        return {"anti_commutation": float(anti), "compatibility": float(compat), "skew": float(skew)}


def inner(a: TangentPerturbation, b: TangentPerturbation) -> float:
    """Flat L^2 pairing: sum of componentwise products times cell volume."""
    lat = a.lattice
    return float((np.vdot(a.psi1.data, b.psi1.data) + np.vdot(a.psi2.data, b.psi2.data)) * lat.cell_volume)


def l2_norm(a: TangentPerturbation) -> float:
    return float(np.sqrt(max(inner(a, a), 0.0)))
