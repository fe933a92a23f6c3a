"""The linearized operator at the flat structure: Laplacians, Weitzenboeck checks, spectrum.

Normalizations.  ``rough_laplacian`` is the real coordinate operator
``-sum_a d_a d_a``.  The complex-coordinate rough Laplacian used in the
Weitzenboeck identities is half of it (``-g^{i jbar} nabla_i nabla_jbar`` with
``g_{i jbar} = delta/2``), so on the flat torus the identities read
``Delta_d = 2 * rough_c`` on 2-forms and ``Delta_dbar = rough_c`` on
anti-commuting endomorphisms.

The operator on pairs is
``L(psi1, psi2) = (-Delta_d psi1 + 2 s/n psi1, -2 Delta_dbar psi2 + 2 s/n psi2)``,
which at ``s = 0`` is the componentwise coordinate Laplacian on both blocks.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .lattice import Lattice, LatticeError, LatticeField, deriv, grid_mean, resolve
from .structure import (
    AHStructure,
    TangentPerturbation,
    anti_commuting_part,
    holomorphic_projector,
    inner,
    standard_complex_matrix,
    standard_structure,
)

KERNEL_THRESHOLD = 1e-7
TYPE_TOL = 1e-8


class SpectrumError(RuntimeError):
    pass


# --- componentwise calculus on raw arrays (real or complex) --------------------------


def _d(lat: Lattice, data: np.ndarray, axis: int) -> np.ndarray:
    if np.iscomplexobj(data):
        return deriv(lat, data.real, axis) + 1j * deriv(lat, data.imag, axis)
    return deriv(lat, data, axis)


def _grad_first(lat: Lattice, data: np.ndarray) -> np.ndarray:
    """Gradient with the derivative index placed first among the tensor slots."""
    g = np.stack([_d(lat, data, a) for a in range(lat.dim)], axis=lat.dim)
    return g


def rough_laplacian_array(lat: Lattice, data: np.ndarray) -> np.ndarray:
    out = np.zeros_like(data)
    for a in range(lat.dim):
        out = out - _d(lat, _d(lat, data, a), a)
    return out


def rough_laplacian(u: LatticeField, background: AHStructure | None = None) -> LatticeField:
    """``-sum_a d_a d_a`` componentwise (flat background)."""
    return u.like(rough_laplacian_array(u.lattice, u.data))


def complex_rough_laplacian_array(lat: Lattice, data: np.ndarray) -> np.ndarray:
    return 0.5 * rough_laplacian_array(lat, data)


def _alternate(t: np.ndarray, first: int) -> np.ndarray:
    """Antisymmetrize over the trailing axes starting at ``first`` (average with signs)."""
    p = t.ndim - first
    out = np.zeros_like(t)
    base = list(range(first))
    for perm in itertools.permutations(range(p)):
        sign = _perm_sign(perm)
        out = out + sign * np.transpose(t, base + [first + q for q in perm])
    return out / math.factorial(p)


def _perm_sign(perm) -> int:
    sign, seen = 1, list(perm)
    for i in range(len(seen)):
        while seen[i] != i:
            j = seen[i]
            seen[i], seen[j] = seen[j], seen[i]
            sign = -sign
    return sign


def exterior_d(lat: Lattice, alpha: np.ndarray, form_slots: int, lead: int = 0) -> np.ndarray:
    """``d`` of a p-form stored as a full antisymmetric array.

    ``lead`` tensor slots before the form slots are carried along as parameters.
    """
    p = form_slots
    t = _grad_first(lat, alpha)  # derivative slot at position dim
    first = lat.dim + lead
    # move derivative slot to the front of the form slots
    t = np.moveaxis(t, lat.dim, first)
    return (p + 1) * _alternate(t, first)


def codifferential(lat: Lattice, beta: np.ndarray, form_slots: int, lead: int = 0) -> np.ndarray:
    """Flat codifferential ``(delta beta)_{b...} = -sum_a d_a beta_{a b ...}``."""
    first = lat.dim + lead
    out = 0
    for a in range(lat.dim):
        out = out - _d(lat, np.take(beta, a, axis=first), a)
    return out


def hodge_laplacian_array(lat: Lattice, h: np.ndarray) -> np.ndarray:
    """``Delta_d = d delta + delta d`` on 2-forms."""
    return exterior_d(lat, codifferential(lat, h, 2), 1) + codifferential(lat, exterior_d(lat, h, 2), 3)


def hodge_laplacian(h: LatticeField, background: AHStructure | None = None) -> LatticeField:
    return h.like(hodge_laplacian_array(h.lattice, h.data))


def _type_project(alpha: np.ndarray, Pb: np.ndarray, form_slots: int) -> np.ndarray:
    """Restrict every form slot to (0,1)-vectors: ``alpha(Pb X1, ..., Pb Xp)``."""
    out = alpha
    nd = alpha.ndim
    for s in range(form_slots):
        ax = nd - form_slots + s
        out = np.moveaxis(np.tensordot(out, Pb, axes=([ax], [0])), -1, ax)
    return out


def dbar(lat: Lattice, alpha: np.ndarray, form_slots: int, Pb: np.ndarray, full: bool = False) -> np.ndarray:
    """``dbar`` on (0,p)-forms with one vector slot in front; ``full`` skips the type projection."""
    da = exterior_d(lat, alpha, form_slots, lead=1)
    return da if full else _type_project(da, Pb, form_slots + 1)


def dbar_adjoint(lat: Lattice, beta: np.ndarray, form_slots: int, Pb: np.ndarray, full: bool = False) -> np.ndarray:
    """Flat L^2 adjoint of ``dbar`` on (0,q)-forms: codifferential followed by the type projection."""
    db = codifferential(lat, beta, form_slots, lead=1)
    if form_slots == 1 or full:
        return db
    return _type_project(db, Pb, form_slots - 1)


def dbar_laplacian_block(lat: Lattice, beta: np.ndarray, Pb: np.ndarray, full: bool = False) -> np.ndarray:
    """``dbar dbar* + dbar* dbar`` on a T^{1,0}-valued (0,1)-form (vector slot first)."""
    return dbar(lat, dbar_adjoint(lat, beta, 1, Pb, full), 0, Pb, full) + dbar_adjoint(
        lat, dbar(lat, beta, 1, Pb, full), 2, Pb, full
    )


def dbar_laplacian_array(lat: Lattice, K: np.ndarray, J0: np.ndarray, full: bool = False) -> np.ndarray:
    """Complex Laplacian of an anti-commuting endomorphism, assembled blockwise.

    ``K`` splits as ``beta + conj(beta)`` with ``beta = P K Pb`` the
    T^{1,0}-valued (0,1)-form block; the Laplacian acts on ``beta`` and the
    real endomorphism is reassembled.  ``full`` replaces the type projections
    by the full exterior derivative (negative control).
    """
    P = holomorphic_projector(J0)
    Pb = P.conj()
    beta = P @ K.astype(complex) @ Pb
    out = dbar_laplacian_block(lat, beta, Pb, full)
    out = P @ out @ Pb if not full else out
    return 2.0 * out.real


def dbar_laplacian(K: LatticeField, background: AHStructure) -> LatticeField:
    J0 = background.J.data
    res = np.abs(K.data @ J0 + J0 @ K.data).max()
    if res > TYPE_TOL * max(1.0, np.abs(K.data).max()):
        raise LatticeError(f"endomorphism does not anti-commute with the reference J (residual {res:.2e})")
    return K.like(dbar_laplacian_array(K.lattice, K.data, _constant(J0)))


def _constant(J0: np.ndarray) -> np.ndarray:
    """The reference J as a single matrix (the flat background is constant)."""
    flat = J0.reshape(-1, J0.shape[-2], J0.shape[-1])
    if np.abs(flat - flat[0]).max() > 1e-12:
        raise LatticeError("operator assembly requires a constant background")
    return flat[0]


# --- the linear operator -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LinearOperatorHandle:
    background: AHStructure
    scalar_curvature_param: float = 0.0

    @property
    def lattice(self) -> Lattice:
        return self.background.lattice

    @property
    def n(self) -> int:
        return self.lattice.n

    @property
    def shift(self) -> float:
        return 2.0 * self.scalar_curvature_param / self.n

    def apply(self, psi: TangentPerturbation) -> TangentPerturbation:
        return apply_L(psi, self)


def flat_handle(lattice: Lattice, s: float = 0.0) -> LinearOperatorHandle:
    return LinearOperatorHandle(standard_structure(lattice), s)


def apply_L_arrays(lat: Lattice, J0: np.ndarray, shift: float, p1: np.ndarray, p2: np.ndarray):
    a = -hodge_laplacian_array(lat, p1) + shift * p1
    b = -2.0 * dbar_laplacian_array(lat, p2, J0) + shift * p2
    return a, b


def apply_L(psi: TangentPerturbation, h: LinearOperatorHandle, check: bool = True) -> TangentPerturbation:
    lat = psi.lattice
    J0 = _constant(h.background.J.data)
    p1, p2 = psi.arrays()
    if check:
        scale = max(1.0, np.abs(p2).max(), np.abs(p1).max())
        if np.abs(p2 @ J0 + J0 @ p2).max() > TYPE_TOL * scale or np.abs(p1 + np.swapaxes(p1, -1, -2)).max() > TYPE_TOL * scale:
            raise LatticeError("apply_L expects a 2-form and an anti-commuting endomorphism")
    a, b = apply_L_arrays(lat, J0, h.shift, p1, p2)
    return TangentPerturbation.from_arrays(lat, a, b)


@dataclass(frozen=True)
class WeitzenbockReport:
    hodge_11: float
    hodge_20_02: float
    dbar: float
    trials: int

    def max(self) -> float:
        return max(self.hodge_11, self.hodge_20_02, self.dbar)

    def to_dict(self) -> dict:
        return dict(hodge_11=self.hodge_11, hodge_20_02=self.hodge_20_02, dbar=self.dbar, trials=self.trials)


def band_mask(lat: Lattice, kmin: int, kmax: int) -> np.ndarray:
    """Spectral mask for ``kmin <= max_a |k_a| <= kmax`` (integer wavevectors)."""
    N = lat.points_per_axis
    full = np.abs(np.fft.fftfreq(N, 1.0 / N))
    half = np.arange(N // 2 + 1)
    axes = [full] * (lat.dim - 1) + [half]
    kinf = np.zeros(lat._spectral_shape)
    for a, k in enumerate(axes):
        shape = [1] * lat.dim
        shape[a] = k.size
        kinf = np.maximum(kinf, k.reshape(shape))
    return (kinf >= kmin) & (kinf <= min(kmax, N // 2 - 1))


def random_band_limited(lat: Lattice, rng: np.random.Generator, slots: int, kmax: int = 2, kmin: int = 0) -> np.ndarray:
    """Random real field whose Fourier support is ``kmin <= max_a |k_a| <= kmax``, unit RMS."""
    d = lat.dim
    raw = rng.normal(size=lat.shape + (d,) * slots)
    spec = np.fft.rfftn(raw, axes=lat.grid_axes)
    mask = band_mask(lat, kmin, kmax).reshape(lat._spectral_shape + (1,) * slots)
    out = np.fft.irfftn(spec * mask, s=lat.shape, axes=lat.grid_axes)
    rms = np.sqrt(np.mean(out**2))
    return out / rms if rms > 0 else out


def weitzenbock_residual(background: AHStructure, trials: int = 10, seed: int = 0, kmax: int = 3, negative_control: bool = False) -> WeitzenbockReport:
    """Max residuals of ``Delta_d - 2 rough_c`` on (1,1) and (2,0)+(0,2) forms and ``Delta_dbar - rough_c``.

    Residuals are relative to the sup-norm of the compared operator output.
    """
    lat = background.lattice
    J0 = _constant(background.J.data)
    rng = np.random.default_rng(seed)
    r11 = r20 = rdb = 0.0
    for _ in range(trials):
        h = random_band_limited(lat, rng, 2, kmax)
        h = h - np.swapaxes(h, -1, -2)
        hJ = np.swapaxes(J0, -1, -2) @ h @ J0
        for part, which in ((0.5 * (h + hJ), 0), (0.5 * (h - hJ), 1)):
            lhs = hodge_laplacian_array(lat, part)
            rhs = 2.0 * complex_rough_laplacian_array(lat, part)
            r = np.abs(lhs - rhs).max() / max(np.abs(rhs).max(), 1e-300)
            if which == 0:
                r11 = max(r11, r)
            else:
                r20 = max(r20, r)
        K = anti_commuting_part(random_band_limited(lat, rng, 2, kmax), J0)
        lhs = dbar_laplacian_array(lat, K, J0, full=negative_control)
        rhs = complex_rough_laplacian_array(lat, K)
        rdb = max(rdb, np.abs(lhs - rhs).max() / max(np.abs(rhs).max(), 1e-300))
    return WeitzenbockReport(float(r11), float(r20), float(rdb), trials)


# --- spectrum ------------------------------------------------------------------------


def fiber_bases(dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal (Frobenius) bases of 2-forms and of endomorphisms anti-commuting with J0.

    Ordered lexicographically by component, then orthonormalized.
    """
    J0 = standard_complex_matrix(dim)
    forms = []
    for a, b in itertools.combinations(range(dim), 2):
        w = np.zeros((dim, dim))
        w[a, b], w[b, a] = 1.0, -1.0
        forms.append(w / np.sqrt(2.0))
    cols = []
    for q in range(dim * dim):
        E = np.zeros(dim * dim)
        E[q] = 1.0
        cols.append(anti_commuting_part(E.reshape(dim, dim), J0).ravel())
    # Gram-Schmidt in lexicographic order of the source columns
    basis = []
    for c in cols:
        v = c.copy()
        for b in basis:
            v -= np.dot(b, v) * b
        if np.linalg.norm(v) > 1e-10:
            basis.append(v / np.linalg.norm(v))
    return np.array(forms), np.array([b.reshape(dim, dim) for b in basis])


def kernel_dimension_expected(n: int) -> int:
    forms, endos = fiber_bases(2 * n)
    return len(forms) + len(endos)


def scalar_fourier_basis(lat: Lattice) -> list[np.ndarray]:
    """Real orthonormal (flat L^2) basis of the resolved scalar functions."""
    kmax = lat.points_per_axis // 2 - 1
    d = lat.dim
    x = np.stack(lat.coords, axis=-1) * (2 * np.pi / lat.side_length)
    vol = lat.volume
    out = [np.full(lat.shape, 1.0 / math.sqrt(vol))]
    for k in itertools.product(range(-kmax, kmax + 1), repeat=d):
        if all(v == 0 for v in k):
            continue
        # one representative per +/- pair: first nonzero entry positive
        first = next(v for v in k if v != 0)
        if first < 0:
            continue
        phase = x @ np.array(k, dtype=float)
        out.append(np.cos(phase) * math.sqrt(2.0 / vol))
        out.append(np.sin(phase) * math.sqrt(2.0 / vol))
    return out


@dataclass(frozen=True, eq=False)
class SpectrumReport:
    eigenvalues: np.ndarray
    kernel_dimension: int
    gap_lambda: float
    eigenbasis_handles: list = field(default_factory=list, repr=False)
    method: str = "dense"
    scalar_curvature_param: float = 0.0

    def to_dict(self) -> dict:
        return {
            "eigenvalues": [float(v) for v in self.eigenvalues],
            "kernel_dimension": int(self.kernel_dimension),
            "gap_lambda": float(self.gap_lambda),
            "method": self.method,
            "scalar_curvature_param": self.scalar_curvature_param,
        }


def _summarize(eigs: np.ndarray, vectors, method: str, s: float) -> SpectrumReport:
    eigs = np.sort(np.asarray(eigs, dtype=float))
    small = np.abs(eigs) < KERNEL_THRESHOLD
    kdim = int(small.sum())
    nonzero = np.abs(eigs[~small])
    gap = float(nonzero.min()) if nonzero.size else float("nan")
    return SpectrumReport(eigs, kdim, gap, vectors, method, s)


def _field_basis(lat: Lattice) -> list[TangentPerturbation]:
    forms, endos = fiber_bases(lat.dim)
    scal = scalar_fourier_basis(lat)
    zero = lat.zeros(2)
    out = []
    for f in scal:
        fe = f[..., None, None]
        for w in forms:
            out.append((fe * w, zero))
        for e in endos:
            out.append((zero, fe * e))
    return out


def _apply_pair(lat, J0, shift, pair):
    return apply_L_arrays(lat, J0, shift, pair[0], pair[1])


def _pair_inner(lat: Lattice, a, b) -> float:
    return float((np.vdot(a[0], b[0]) + np.vdot(a[1], b[1])) * lat.cell_volume)


def dense_spectrum(h: LinearOperatorHandle, count: int | None = None) -> SpectrumReport:
    lat = h.lattice
    if lat.points_per_axis > 12 or (lat.dim == 4 and lat.points_per_axis > 8):
        raise SpectrumError("dense assembly is limited to small grids; use the iterative method")
    J0 = _constant(h.background.J.data)
    basis = _field_basis(lat)
    m = len(basis)
    flat = np.array([np.concatenate([p[0].ravel(), p[1].ravel()]) for p in basis]).T * math.sqrt(lat.cell_volume)
    images = []
    for p in basis:
        a, b = _apply_pair(lat, J0, h.shift, p)
        images.append(np.concatenate([a.ravel(), b.ravel()]))
    LQ = np.array(images).T * math.sqrt(lat.cell_volume)
    A = -(flat.T @ LQ)
    A = 0.5 * (A + A.T)
    w, V = np.linalg.eigh(A)
    k = m if count is None else min(count, m)
    vecs = [_unflatten(lat, flat @ V[:, i] / math.sqrt(lat.cell_volume)) for i in range(k)]
    return _summarize(w, vecs, "dense", h.scalar_curvature_param)


def _unflatten(lat: Lattice, v: np.ndarray) -> TangentPerturbation:
    d = lat.dim
    size = int(np.prod(lat.shape)) * d * d
    return TangentPerturbation.from_arrays(lat, v[:size].reshape(lat.shape + (d, d)), v[size:].reshape(lat.shape + (d, d)))


def block_lanczos(
    apply, dim_vectors: np.ndarray, count: int, max_steps: int = 200, tol: float = 1e-9
) -> tuple[np.ndarray, np.ndarray]:
    """Lowest ``count`` eigenpairs of a symmetric operator by block Lanczos.

    ``apply`` maps an (m, b) block of vectors to its image; ``dim_vectors`` is
    the (m, b) starting block.  Full reorthogonalization against the whole
    Krylov basis keeps degenerate eigenvalues resolvable up to multiplicity b.
    """
    Q, _ = np.linalg.qr(dim_vectors)
    m, b = Q.shape
    basis = [Q]
    AQ = [apply(Q)]
    ritz, vecs = None, None
    for step in range(max_steps):
        W = AQ[-1].copy()
        V = np.concatenate(basis, axis=1)
        for _ in range(2):
            W -= V @ (V.T @ W)
        T = V.T @ np.concatenate(AQ, axis=1)
        T = 0.5 * (T + T.T)
        theta, S = np.linalg.eigh(T)
        ritz = theta[:count]
        vecs = V @ S[:, :count]
        AV = np.concatenate(AQ, axis=1) @ S[:, :count]
        res = np.linalg.norm(AV - vecs * ritz, axis=0)
        scale = max(1.0, float(np.abs(theta).max()))
        if V.shape[1] >= count and np.all(res < tol * scale):
            return ritz, vecs
        Qn, R = np.linalg.qr(W)
        keep = np.abs(np.diag(R)) > 1e-10 * scale
        if not keep.any() or V.shape[1] >= m:
            if np.all(res < 1e-6 * scale):
                return ritz, vecs
            raise SpectrumError(f"block Lanczos stalled with residuals {res.max():.2e}")
        Qn = Qn[:, keep]
        for _ in range(2):
            Qn -= V @ (V.T @ Qn)
            Qn, _r = np.linalg.qr(Qn)
        basis.append(Qn)
        AQ.append(apply(Qn))
    raise SpectrumError(f"block Lanczos did not converge in {max_steps} steps (residual {res.max():.2e})")


def iterative_spectrum(h: LinearOperatorHandle, count: int, seed: int = 0, block: int | None = None, max_steps: int = 200) -> SpectrumReport:
    """Lowest eigenvalues of ``-L`` on the resolved field space via block Lanczos."""
    lat = h.lattice
    J0 = _constant(h.background.J.data)
    d = lat.dim
    size = int(np.prod(lat.shape)) * d * d
    w = math.sqrt(lat.cell_volume)

    def to_pair(v):
        p1 = v[:size].reshape(lat.shape + (d, d)) / w
        p2 = v[size:].reshape(lat.shape + (d, d)) / w
        return p1, p2

    def restrict(p1, p2):
        # roundoff outside the typed, resolved subspace would otherwise grow across Krylov steps
        p1 = resolve(lat, 0.5 * (p1 - np.swapaxes(p1, -1, -2)))
        return p1, resolve(lat, anti_commuting_part(p2, J0))

    def apply(X):
        cols = []
        for j in range(X.shape[1]):
            p1, p2 = restrict(*to_pair(X[:, j]))
            a, b = restrict(*apply_L_arrays(lat, J0, h.shift, p1, p2))
            cols.append(-np.concatenate([a.ravel(), b.ravel()]) * w)
        return np.array(cols).T

    rng = np.random.default_rng(seed)
    b = block or count + 2
    start = []
    for _ in range(b):
        p1 = resolve(lat, rng.normal(size=lat.shape + (d, d)))
        p1 = p1 - np.swapaxes(p1, -1, -2)
        p2 = anti_commuting_part(resolve(lat, rng.normal(size=lat.shape + (d, d))), J0)
        start.append(np.concatenate([p1.ravel(), p2.ravel()]) * w)
    ritz, vecs = block_lanczos(apply, np.array(start).T, count, max_steps=max_steps)
    handles = [_unflatten(lat, vecs[:, i] / w) for i in range(vecs.shape[1])]
    return _summarize(ritz, handles, "iterative", h.scalar_curvature_param)


def spectrum(h: LinearOperatorHandle, grid: Lattice | None = None, count: int | None = None, method: str = "auto", seed: int = 0) -> SpectrumReport:
    """Spectrum of ``-L`` (ascending) at the flat background on ``grid``."""
    if grid is not None and grid != h.lattice:
        h = LinearOperatorHandle(standard_structure(grid), h.scalar_curvature_param)
    lat = h.lattice
    small = lat.points_per_axis <= 12 if lat.dim == 2 else lat.points_per_axis <= 8
    if method == "dense" or (method == "auto" and small):
        return dense_spectrum(h, count)
    if count is None:
        raise SpectrumError("iterative spectrum needs an explicit count")
    return iterative_spectrum(h, count, seed)


def kernel_projection(psi: TangentPerturbation, report: SpectrumReport | None = None) -> TangentPerturbation:
    """L^2 projection onto the kernel: the zero-frequency part of each component."""
    lat = psi.lattice
    return psi.map(lambda a: np.broadcast_to(grid_mean(lat, a), a.shape).copy())


def kernel_projection_by_basis(psi: TangentPerturbation, report: SpectrumReport) -> TangentPerturbation:
    """Projection through the kernel eigenfields of a dense report (oracle for the mean extraction)."""
    lat = psi.lattice
    out = TangentPerturbation.zeros(lat)
    for v, lam in zip(report.eigenbasis_handles, report.eigenvalues):
        if abs(lam) < KERNEL_THRESHOLD:
            out = out + v * (inner(psi, v) / inner(v, v))
    return out


def evolve_linear(psi: TangentPerturbation, h: LinearOperatorHandle, dt: float, steps: int, record_every: int = 1):
    """RK4 integration of ``d psi/dt = L psi``; returns (times, states)."""
    lat = psi.lattice
    J0 = _constant(h.background.J.data)
    y = psi.arrays()

    def f(p):
        return apply_L_arrays(lat, J0, h.shift, p[0], p[1])

    times, states = [0.0], [psi]
    for i in range(1, steps + 1):
        k1 = f(y)
        k2 = f(tuple(a + 0.5 * dt * b for a, b in zip(y, k1)))
        k3 = f(tuple(a + 0.5 * dt * b for a, b in zip(y, k2)))
        k4 = f(tuple(a + dt * b for a, b in zip(y, k3)))
        y = tuple(a + dt / 6.0 * (p + 2 * q + 2 * r + s) for a, p, q, r, s in zip(y, k1, k2, k3, k4))
        if i % record_every == 0 or i == steps:
            times.append(i * dt)
            states.append(TangentPerturbation.from_arrays(lat, y[0], y[1]))
    return np.array(times), states
