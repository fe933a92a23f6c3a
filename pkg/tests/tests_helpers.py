import numpy as np

from ahcf.lattice import LatticeField, hessian
from ahcf.linear import random_band_limited
from ahcf.structure import ENDO, FORM, TangentPerturbation, anti_commuting_part, build_structure, standard_complex_matrix


def random_psi(lat, rng, kmax=3, kmin=0):
    J0 = standard_complex_matrix(lat.dim)
    p1 = random_band_limited(lat, rng, 2, kmax=kmax, kmin=kmin)
    p1 = p1 - np.swapaxes(p1, -1, -2)
    p2 = anti_commuting_part(random_band_limited(lat, rng, 2, kmax=kmax, kmin=kmin), J0)
    return TangentPerturbation.from_arrays(lat, p1, p2)


def constant_psi(lat, rng):
    d = lat.dim
    w = rng.standard_normal((d, d))
    K = anti_commuting_part(rng.standard_normal((d, d)), standard_complex_matrix(d))
    return TangentPerturbation.from_arrays(
        lat, np.broadcast_to(w - w.T, lat.shape + (d, d)).copy(), np.broadcast_to(K, lat.shape + (d, d)).copy()
    )


def kahler_4d(lat, amp=0.02, seed=3):
    """Kaehler metric g = Id + (1,1) part of a potential Hessian, constant standard J."""
    rng = np.random.default_rng(seed)
    f = amp * random_band_limited(lat, rng, 0, kmax=1, kmin=1)
    H = hessian(lat, f)
    J0 = standard_complex_matrix(lat.dim)
    g = np.eye(lat.dim) + 0.5 * (H + J0.T @ H @ J0)
    return build_structure(LatticeField(lat, FORM, g), LatticeField(lat, ENDO, np.broadcast_to(J0, g.shape).copy()))


def fd4(f, h, axis):
    return (-np.roll(f, -2, axis) + 8 * np.roll(f, -1, axis) - 8 * np.roll(f, 1, axis) + np.roll(f, 2, axis)) / (12 * h)


def bracket_nijenhuis(J, lat):
    """N(e_j, e_k) from the bracket definition, coordinate fields commuting, derivatives by 4th-order FD."""
    d = lat.dim
    dJ = np.stack([fd4(J, lat.spacing, a) for a in range(d)], axis=-1)  # dJ[..., i, k, p] = d_p J^i_k
    N = np.zeros(J.shape + (d,))
    for j in range(d):
        for k in range(d):
            JX, JY = J[..., :, j], J[..., :, k]
            # [U, V]^i = U^p d_p V^i - V^p d_p U^i
            br_JJ = np.einsum("...p,...ip->...i", JX, dJ[..., :, k, :]) - np.einsum("...p,...ip->...i", JY, dJ[..., :, j, :])
            br_JX_Y = -dJ[..., :, j, k]
            br_X_JY = dJ[..., :, k, j]
            N[..., :, j, k] = br_JJ - np.einsum("...ip,...p->...i", J, br_JX_Y) - np.einsum("...ip,...p->...i", J, br_X_JY)
    return N
