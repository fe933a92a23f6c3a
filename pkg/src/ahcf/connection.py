"""Levi-Civita and canonical (almost-Chern) connections and derived tensors.

Index conventions (all arrays grid-first, tensor indices trailing):

* ``Gamma[..., i, j, k] = Gamma^i_{jk}`` with ``nabla_j Y^i = d_j Y^i + Gamma^i_{jk} Y^k``
* torsion ``T^i_{jk} = Gamma^i_{jk} - Gamma^i_{kj}``
* curvature ``R[..., i, j, k, l] = R^i_{jkl}``, the i-component of ``R(d_k, d_l) d_j``
* Nijenhuis ``N[..., i, j, k] = N^i_{jk}``

The trace ``omega^{kl} Omega_{klij}`` in ``S`` is taken with the
complex-coordinate weight 1/2, which makes ``S`` the Ricci form on Kaehler
inputs.  ``K`` uses the full real trace; its linearization at the flat
structure is then ``-sum_a d_a d_a`` on the non-gauge directions, matching
the J-block of the linear operator.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .lattice import Lattice, grad
from .structure import AHStructure, standard_complex_matrix

LEVI_CIVITA = "levi_civita"
CANONICAL = "canonical"
CANONICAL_TOL = 1e-8


class ConnectionError_(RuntimeError):
    """Canonical-connection construction failed its defining checks."""

    def __init__(self, message: str, residuals: dict):
        super().__init__(f"{message}: {residuals}")
        self.residuals = residuals


@dataclass(frozen=True, eq=False)
class ConnectionField:
    lattice: Lattice
    coefficients: np.ndarray
    kind: str


@dataclass(frozen=True, eq=False)
class CurvatureBundle:
    riemann: np.ndarray
    torsion: np.ndarray
    s_form: np.ndarray
    scalar: np.ndarray


@lru_cache(maxsize=512)
def _path(spec: str, shapes: tuple):
    return np.einsum_path(spec, *[np.empty(sh) for sh in shapes], optimize="greedy")[0]


def _ein(spec, *ops):
    if len(ops) < 3:
        return np.einsum(spec, *ops)
    return np.einsum(spec, *ops, optimize=_path(spec, tuple(o.shape for o in ops)))


def levi_civita(g: np.ndarray, lattice: Lattice) -> ConnectionField:
    """Christoffel symbols of ``g`` from spectral first derivatives."""
    dg = grad(lattice, g)  # dg[..., j, k, l] = d_l g_{jk}
    # Gamma_{l j k} (first index lowered) = (d_j g_{lk} + d_k g_{jl} - d_l g_{jk}) / 2
    low = 0.5 * (
        np.einsum("...lkj->...ljk", dg) + np.einsum("...jlk->...ljk", dg) - np.einsum("...jkl->...ljk", dg)
    )
    ginv = np.linalg.inv(g)
    return ConnectionField(lattice, _ein("...il,...ljk->...ijk", ginv, low), LEVI_CIVITA)


def torsion(c: ConnectionField) -> np.ndarray:
    G = c.coefficients
    return G - np.swapaxes(G, -1, -2)


def curvature(c: ConnectionField) -> np.ndarray:
    G = c.coefficients
    dG = grad(c.lattice, G)  # dG[..., i, l, j, k] = d_k Gamma^i_{lj}
    term = np.einsum("...iljk->...ijkl", dG)
    quad = _ein("...ikm,...mlj->...ijkl", G, G)
    R = term - np.swapaxes(term, -1, -2) + quad - np.swapaxes(quad, -1, -2)
    return R


def covariant_derivative(c: ConnectionField, data: np.ndarray, valence: tuple[str, ...]) -> np.ndarray:
    """``nabla`` of a tensor, derivative index appended last."""
    G = c.coefficients
    out = grad(c.lattice, data)
    r = len(valence)
    letters = "abcdefgh"[:r]
    for s, v in enumerate(valence):
        src = letters
        if v == "up":
            # + Gamma^{a_s}_{z m} T^{..m..}
            tgt = letters[:s] + "m" + letters[s + 1 :]
            out = out + _ein(f"...{letters[s]}zm,...{tgt}->...{src}z", G, data)
        else:
            tgt = letters[:s] + "m" + letters[s + 1 :]
            out = out - _ein(f"...mz{letters[s]},...{tgt}->...{src}z", G, data)
    return out


def ricci_tensor(riemann: np.ndarray) -> np.ndarray:
    """``Ric_{jl} = R^k_{l k j}``."""
    return np.einsum("...klkj->...jl", riemann)


def scalar_curvature(g: np.ndarray, riemann_lc: np.ndarray) -> np.ndarray:
    return np.einsum("...jl,...jl->...", np.linalg.inv(g), ricci_tensor(riemann_lc))


def ricci_form(g: np.ndarray, J: np.ndarray, riemann_lc: np.ndarray) -> np.ndarray:
    """``rho(X, Y) = Ric(JX, Y)``."""
    return np.swapaxes(J, -1, -2) @ ricci_tensor(riemann_lc)


def omega_inverse(g: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """``omega^{kl} = g^{ka} g^{lb} omega_{ab}``."""
    gi = np.linalg.inv(g)
    return gi @ omega @ np.swapaxes(gi, -1, -2)


def s_tensor(s: AHStructure, c: ConnectionField, riemann: np.ndarray | None = None) -> np.ndarray:
    """``S_{ij} = (1/2) omega^{kl} Omega_{klij}`` with ``Omega_{klij} = g_{ia} R^a_{jkl}``."""
    if c.kind != CANONICAL:
        raise ValueError("s_tensor expects the canonical connection")
    g, _, omega = s.arrays()
    R = curvature(c) if riemann is None else riemann
    winv = omega_inverse(g, omega)
    S = 0.5 * _ein("...kl,...ia,...ajkl->...ij", winv, g, R)
    return S


def nijenhuis(J: np.ndarray, lattice: Lattice) -> np.ndarray:
    """``N^i_{jk} = J^p_j d_p J^i_k - J^p_k d_p J^i_j - J^i_p d_j J^p_k + J^i_p d_k J^p_j``."""
    dJ = grad(lattice, J)  # dJ[..., i, k, p] = d_p J^i_k
    a = _ein("...pj,...ikp->...ijk", J, dJ)
    b = _ein("...ip,...pkj->...ijk", J, dJ)
    return a - np.swapaxes(a, -1, -2) - b + np.swapaxes(b, -1, -2)


def k_tensor(s: AHStructure, c: ConnectionField, N: np.ndarray | None = None) -> np.ndarray:
    """``K^i_j = omega^{kl} nabla_k N^i_{lj}`` with the canonical connection."""
    if c.kind != CANONICAL:
        raise ValueError("k_tensor expects the canonical connection")
    g, J, omega = s.arrays()
    N = nijenhuis(J, s.lattice) if N is None else N
    dN = covariant_derivative(c, N, ("up", "down", "down"))  # dN[..., i, l, j, k] = nabla_k N^i_{lj}
    return _ein("...kl,...iljk->...ij", omega_inverse(g, omega), dN)


def h_term(s: AHStructure, j_dot: np.ndarray) -> np.ndarray:
    """``H(X,Y) = (omega(j_dot X, JY) + omega(JX, j_dot Y)) / 2``."""
    _, J, omega = s.arrays()
    jdT = np.swapaxes(j_dot, -1, -2)
    JT = np.swapaxes(J, -1, -2)
    return 0.5 * (jdT @ omega @ J + JT @ omega @ j_dot)


def exterior_derivative_2form(lattice: Lattice, w: np.ndarray) -> np.ndarray:
    """``(dw)_{abc} = d_a w_{bc} + d_b w_{ca} + d_c w_{ab}``."""
    dw = grad(lattice, w)  # dw[..., b, c, a] = d_a w_{bc}
    t = np.einsum("...bca->...abc", dw)
    return t + np.einsum("...abc->...bca", t) + np.einsum("...abc->...cab", t)


# --- canonical connection -------------------------------------------------------------


def adapted_frame(g: np.ndarray, J: np.ndarray) -> np.ndarray:
    """Pointwise g-orthonormal frame with ``J e_{2m} = e_{2m+1}`` (columns are frame vectors)."""
    d = g.shape[-1]
    grid = g.shape[:-2]
    E = np.zeros(grid + (d, d))
    eye = np.eye(d)

    def ip(u, v):
        return np.einsum("...i,...ij,...j->...", u, g, v)

    for m in range(d // 2):
        # choose the coordinate vector with the largest component orthogonal to the frame so far
        best, best_norm = None, None
        for c in range(d):
            v = np.broadcast_to(eye[c], grid + (d,)).copy()
            for b in range(2 * m):
                v = v - ip(E[..., b], v)[..., None] * E[..., b]
            nv = np.sqrt(ip(v, v))
            if best is None:
                best, best_norm = v, nv
            else:
                take = nv > best_norm * 1.5
                best = np.where(take[..., None], v, best)
                best_norm = np.where(take, nv, best_norm)
        e = best / best_norm[..., None]
        E[..., 2 * m] = e
        E[..., 2 * m + 1] = np.einsum("...ij,...j->...i", J, e)
    return E


@lru_cache(maxsize=4)
def _canonical_system(d: int):
    """Linear map from frame coefficients ``a[c, j, b] = g(e_c, A(e_j) e_b)`` to constraint values.

    Constraints: metric skew in (c, b); ``[A_j, J0] = -D_j``; ``T + T(J0., J0.) = 0``.
    Returns the pseudo-inverse and the row layout for the right-hand side.
    """
    J0 = standard_complex_matrix(d)
    n_unk = d**3
    rows = []

    def unit(idx):
        v = np.zeros((d, d, d))
        v[idx] = 1.0
        return v

    basis = [unit(np.unravel_index(q, (d, d, d))) for q in range(n_unk)]
    ops = []
    # metric: a[c, j, b] + a[b, j, c] = 0
    ops.append(lambda a: (a + np.transpose(a, (2, 1, 0))).ravel())
    # complex: A_j J0 - J0 A_j = -D_j ; A_j[c, b] = a[c, j, b]
    ops.append(lambda a: (np.einsum("cjm,mb->cjb", a, J0) - np.einsum("cm,mjb->cjb", J0, a)).ravel())

    # torsion (1,1) part: T(X,Y) + T(J0 X, J0 Y), T^c_{jb} = a[c,j,b] - a[c,b,j]
    def tors(a):
        T = a - np.transpose(a, (0, 2, 1))
        TJ = np.einsum("cpq,pj,qb->cjb", T, J0, J0)
        return (T + TJ).ravel()

    ops.append(tors)
    M = np.stack([np.concatenate([op(v) for op in ops]) for v in basis], axis=1)
    rows = [d**3, d**3, d**3]
    pinv = np.linalg.pinv(M, rcond=1e-12)
    return M, pinv, rows


def canonical_connection(s: AHStructure, check: bool = True, tol: float = CANONICAL_TOL) -> ConnectionField:
    """Canonical connection ``nabla = nabla^LC + A``, solved in a J-adapted orthonormal frame.

    The correction is obtained from a constant linear system per point, then the
    defining properties (``nabla g = 0``, ``nabla J = 0``, ``T^{1,1} = 0``) are
    re-measured in coordinates.
    """
    lat = s.lattice
    g, J, omega = s.arrays()
    d = lat.dim
    lc = levi_civita(g, lat)
    DJ = covariant_derivative(lc, J, ("up", "down"))  # DJ[..., i, k, j] = (nabla_j J)^i_k
    E = adapted_frame(g, J)
    Ei = np.linalg.inv(E)
    # frame components: D[..., j, c, b] = Ei^c_i (nabla_{E_j} J)^i_k E^k_b
    D = _ein("...ci,...ikq,...kb,...qj->...jcb", Ei, DJ, E, E)
    M, pinv, rows = _canonical_system(d)
    rhs_complex = -np.einsum("...jcb->...cjb", D).reshape(D.shape[:-3] + (d**3,))
    zeros = np.zeros_like(rhs_complex)
    rhs = np.concatenate([zeros, rhs_complex, zeros], axis=-1)
    a = (rhs @ pinv.T).reshape(D.shape[:-3] + (d, d, d))
    # back to coordinates: A^i_{jk} = E^i_c a[c, q, b] Ei^q_j Ei^b_k
    A = _ein("...ic,...cqb,...qj,...bk->...ijk", E, a, Ei, Ei)
    conn = ConnectionField(lat, lc.coefficients + A, CANONICAL)
    if check:
        res = canonical_residuals(s, conn)
        if max(res.values()) > tol:
            raise ConnectionError_("canonical connection failed its defining checks", res)
    return conn


def canonical_residuals(s: AHStructure, c: ConnectionField) -> dict:
    """Sup-norms of ``nabla g``, ``nabla omega``, ``nabla J`` and ``T^{1,1}``."""
    g, J, omega = s.arrays()
    T = torsion(c)
    T11 = T + _ein("...ipq,...pj,...qk->...ijk", T, J, J)
    return {
        "nabla_g": float(np.abs(covariant_derivative(c, g, ("down", "down"))).max()),
        "nabla_omega": float(np.abs(covariant_derivative(c, omega, ("down", "down"))).max()),
        "nabla_J": float(np.abs(covariant_derivative(c, J, ("up", "down"))).max()),
        "torsion_11": float(np.abs(0.5 * T11).max()),
    }


def curvature_bundle(s: AHStructure, c: ConnectionField) -> CurvatureBundle:
    R = curvature(c)
    lc = levi_civita(s.g.data, s.lattice)
    scal = scalar_curvature(s.g.data, curvature(lc))
    S = s_tensor(s, c, R) if c.kind == CANONICAL else np.zeros_like(s.g.data)
    return CurvatureBundle(riemann=R, torsion=torsion(c), s_form=S, scalar=scal)
