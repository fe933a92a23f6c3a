"""Time integration of the volume-normalized coupled flow of (omega, J).

The evolution is

    d omega/dt = -2 S + H(dJ) + Q,        dJ/dt = -K + Hj,

with ``Q`` and ``Hj`` optional hooks (default zero).  The state carried by
the integrator is (g, J); omega is always rederived.  With
``gauge="deturck"`` the right-hand side is augmented by the Lie derivative
along ``W^k = g^{ij} Gamma^k_{ij}``, which moves the flow along
diffeomorphisms only and makes it strictly parabolic; ``gauge="none"``
integrates the equations as written.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .connection import (
    canonical_connection,
    covariant_derivative,
    curvature,
    h_term,
    k_tensor,
    levi_civita,
    s_tensor,
    torsion,
)
from .lattice import DOWN, UP, Lattice, grad, orthonormal_frame, pointwise_norm, to_frame
from .perturb import psi_norms, psi_of, rho_norms, rho_of
from .structure import EVOLUTION_TOL, AHStructure, assemble, check_structure, metric_volume

log = logging.getLogger(__name__)

RK4_STABILITY = 2.7


class FlowError(RuntimeError):
    """Integration failed (lost positivity, invalid structure, or bad parameters)."""


class SingularityError(FlowError):
    def __init__(self, message: str, gauge: float, t: float):
        super().__init__(message)
        self.gauge = gauge
        self.t = t


Hook = Callable[[AHStructure, object], np.ndarray]


@dataclass(frozen=True)
class FlowParams:
    dt: float
    q_hook: Optional[Hook] = None
    h_hook: Optional[Hook] = None
    normalize_volume: bool = True
    project_every: int = 1
    gauge: str = "deturck"
    target_volume: Optional[float] = None
    singularity_factor: float = 1e3
    check_cfl: bool = True

    def __post_init__(self):
        if not self.dt > 0:
            raise FlowError("dt must be positive")
        if self.project_every < 1:
            raise FlowError("project_every must be a positive integer")
        if self.gauge not in ("none", "deturck"):
            raise FlowError(f"unknown gauge {self.gauge!r}")


@dataclass(frozen=True, eq=False)
class FlowState:
    t: float
    structure: AHStructure
    diagnostics: dict = field(default_factory=dict)


@dataclass(eq=False)
class Trajectory:
    states: list
    params: FlowParams
    reference: Optional[AHStructure] = None
    records: list = field(default_factory=list)
    failure: Optional[str] = None

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.states])

    def series(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.records])


# --- right-hand side -------------------------------------------------------------


def _lie_derivatives(lat: Lattice, W: np.ndarray, g: np.ndarray, J: np.ndarray):
    dW = grad(lat, W)  # dW[..., k, i] = d_i W^k
    dg = grad(lat, g)  # dg[..., i, j, k] = d_k g_{ij}
    dJ = grad(lat, J)  # dJ[..., i, j, k] = d_k J^i_j
    Lg = (
        np.einsum("...k,...ijk->...ij", W, dg)
        + np.einsum("...kj,...ki->...ij", g, dW)
        + np.einsum("...ik,...kj->...ij", g, dW)
    )
    LJ = (
        np.einsum("...k,...ijk->...ij", W, dJ)
        - np.einsum("...kj,...ik->...ij", J, dW)
        + np.einsum("...ik,...kj->...ij", J, dW)
    )
    return Lg, LJ


def deturck_field(g: np.ndarray, lat: Lattice, lc=None) -> np.ndarray:
    """``W^k = g^{ij} Gamma^k_{ij}`` relative to the flat coordinate connection."""
    lc = levi_civita(g, lat) if lc is None else lc
    return np.einsum("...ij,...kij->...k", np.linalg.inv(g), lc.coefficients)


def rhs(s: AHStructure, p: FlowParams, check: bool = True):
    """(d omega/dt, dJ/dt) at ``s``, including the gauge term when enabled."""
    lat = s.lattice
    g, J, omega = s.arrays()
    conn = canonical_connection(s, check=check)
    S = s_tensor(s, conn)
    if lat.n == 1:
        # every almost complex structure in real dimension 2 is integrable
        Kt = np.zeros_like(J)
    else:
        Kt = k_tensor(s, conn)
    d_J = -Kt
    if p.h_hook is not None:
        d_J = d_J + p.h_hook(s, conn)
    d_omega = -2.0 * S + h_term(s, d_J)
    if p.q_hook is not None:
        d_omega = d_omega + p.q_hook(s, conn)
    if p.gauge == "deturck":
        W = deturck_field(g, lat)
        Lg, LJ = _lie_derivatives(lat, W, g, J)
        d_J = d_J + LJ
        d_omega = d_omega + np.swapaxes(LJ, -1, -2) @ g + np.swapaxes(J, -1, -2) @ Lg
    if check:
        anti = float(np.abs(d_J @ J + J @ d_J).max())
        if anti > EVOLUTION_TOL * max(1.0, float(np.abs(d_J).max())):
            raise FlowError(f"dJ fails to skew-commute with J (residual {anti:.2e})")
    return d_omega, d_J


def _metric_rates(s: AHStructure, d_omega: np.ndarray, d_J: np.ndarray) -> np.ndarray:
    """``g(X,Y) = omega(X, JY)`` so ``dg = d_omega J + omega dJ`` (symmetrized)."""
    _, J, omega = s.arrays()
    dg = d_omega @ J + omega @ d_J
    return 0.5 * (dg + np.swapaxes(dg, -1, -2))


def _rates(lat: Lattice, g: np.ndarray, J: np.ndarray, p: FlowParams):
    s = assemble(lat, g, J)
    d_omega, d_J = rhs(s, p, check=False)
    return _metric_rates(s, d_omega, d_J), d_J


# --- projection and normalization ----------------------------------------------------


def project_complex(J: np.ndarray, tol: float = 1e-14, max_iter: int = 50) -> np.ndarray:
    """Nearest solution of ``X^2 = -Id`` by the Newton iteration ``X <- (X - X^{-1}) / 2``."""
    X = J
    eye = np.eye(J.shape[-1])
    for _ in range(max_iter):
        X = 0.5 * (X - np.linalg.inv(X))
        if np.abs(X @ X + eye).max() < tol:
            break
    return X


def project(lat: Lattice, g: np.ndarray, J: np.ndarray, target_volume: Optional[float]) -> AHStructure:
    J = project_complex(J)
    g = 0.5 * (g + np.swapaxes(J, -1, -2) @ g @ J)
    g = 0.5 * (g + np.swapaxes(g, -1, -2))
    if np.linalg.eigvalsh(g).min() <= 0:
        raise FlowError("metric lost positive definiteness")
    if target_volume is not None:
        c = (target_volume / metric_volume(lat, g)) ** (1.0 / lat.n)
        g = c * g
    return assemble(lat, g, J)


# --- diagnostics ---------------------------------------------------------------------


def _frame_sup(data: np.ndarray, valence, e: np.ndarray) -> float:
    return float(pointwise_norm(to_frame(data, valence, e), valence, operator=False).max())


def blowup_quantities(s: AHStructure, conn=None) -> dict:
    """Sup-norms of the Levi-Civita curvature, squared canonical torsion and its derivative."""
    lat = s.lattice
    g = s.g.data
    lc = levi_civita(g, lat)
    conn = canonical_connection(s, check=False) if conn is None else conn
    e = orthonormal_frame(g)
    R = curvature(lc)
    T = torsion(conn)
    DT = covariant_derivative(lc, T, (UP, DOWN, DOWN))
    return {
        "rm": _frame_sup(R, (UP, DOWN, DOWN, DOWN), e),
        "torsion_sq": _frame_sup(T, (UP, DOWN, DOWN), e) ** 2,
        "d_torsion": _frame_sup(DT, (UP, DOWN, DOWN, DOWN), e),
    }


def singularity_gauge(s: AHStructure) -> float:
    q = blowup_quantities(s)
    return max(q.values())


def cfl_bound(s: AHStructure) -> float:
    """Largest stable dt for RK4 against the principal part ``-sum_a g^{aa} d_a^2``."""
    lat = s.lattice
    lam = float(np.linalg.eigvalsh(np.linalg.inv(s.g.data)).max())
    kmax = lat.max_resolved_wavenumber
    return RK4_STABILITY / (lat.dim * kmax**2 * lam)


def diagnostics(s: AHStructure, target_volume: Optional[float]) -> dict:
    d = check_structure(s).to_dict()
    d.update(blowup_quantities(s))
    d["gauge"] = max(d["rm"], d["torsion_sq"], d["d_torsion"])
    d["volume"] = s.volume
    d["volume_error"] = abs(s.volume - target_volume) / target_volume if target_volume else 0.0
    return d


# --- stepping ------------------------------------------------------------------------


def _target(p: FlowParams, s: AHStructure) -> Optional[float]:
    if not p.normalize_volume:
        return None
    return p.target_volume if p.target_volume is not None else s.lattice.volume


def step(st: FlowState, p: FlowParams, index: int = 1, with_diagnostics: bool = True) -> FlowState:
    """One classical RK4 step on (g, J) followed by projection and volume rescaling."""
    s = st.structure
    lat = s.lattice
    if p.check_cfl and p.dt > cfl_bound(s):
        raise FlowError(f"dt={p.dt} exceeds the RK4 stability bound {cfl_bound(s):.4g}")
    g, J, _ = s.arrays()
    dt = p.dt
    k1 = _rates(lat, g, J, p)
    k2 = _rates(lat, g + 0.5 * dt * k1[0], J + 0.5 * dt * k1[1], p)
    k3 = _rates(lat, g + 0.5 * dt * k2[0], J + 0.5 * dt * k2[1], p)
    k4 = _rates(lat, g + dt * k3[0], J + dt * k3[1], p)
    g_new = g + dt / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
    J_new = J + dt / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    if not (np.all(np.isfinite(g_new)) and np.all(np.isfinite(J_new))):
        raise FlowError("non-finite values produced by the step")
    target = _target(p, s)
    if index % p.project_every == 0:
        new = project(lat, g_new, J_new, target)
    else:
        if np.linalg.eigvalsh(g_new).min() <= 0:
            raise FlowError("metric lost positive definiteness")
        new = assemble(lat, g_new, J_new)
    diag = diagnostics(new, target) if with_diagnostics else {}
    return FlowState(t=st.t + dt, structure=new, diagnostics=diag)


def initial_state(s: AHStructure, p: FlowParams) -> FlowState:
    return FlowState(0.0, s, diagnostics(s, _target(p, s)))


def record(st: FlowState, reference: Optional[AHStructure], k: int) -> dict:
    out = {"t": st.t, "gauge": st.diagnostics.get("gauge", float("nan"))}
    for key in ("j_squared", "compatibility", "omega_consistency", "volume_error"):
        out[key] = st.diagnostics.get(key, float("nan"))
    if reference is not None:
        rho = rho_of(st.structure, reference)
        rn = rho_norms(rho, reference, k)
        pn = psi_norms(psi_of(st.structure, reference, check=False), reference, k)
        out["rho_l2"] = rn.l2
        out["psi_l2"] = pn.l2
        for j in range(k + 1):
            out[f"rho_c{j}"] = rn.ck(j)
            out[f"psi_c{j}"] = pn.ck(j)
    return out


def run(
    initial: AHStructure,
    p: FlowParams,
    t_end: float,
    record_every: int = 1,
    reference: Optional[AHStructure] = None,
    norm_order: int = 2,
    progress: Optional[Callable[[FlowState], None]] = None,
) -> Trajectory:
    """Integrate to ``t_end``; on failure the partial trajectory is returned with a marker."""
    if not t_end > 0:
        raise FlowError("t_end must be positive")
    if record_every < 1:
        raise FlowError("record_every must be a positive integer")
    if p.normalize_volume and p.target_volume is None:
        p = replace(p, target_volume=initial.lattice.volume)
    steps = int(round(t_end / p.dt))
    if not math.isclose(steps * p.dt, t_end, rel_tol=1e-9):
        raise FlowError("t_end must be an integer multiple of dt")
    st = initial_state(initial, p)
    traj = Trajectory(states=[st], params=p, reference=reference)
    traj.records.append(record(st, reference, norm_order))
    ceiling = p.singularity_factor * st.diagnostics["gauge"] + 1.0
    for i in range(1, steps + 1):
        recording = i % record_every == 0 or i == steps
        try:
            st = step(st, p, index=i, with_diagnostics=recording)
            diag = st.diagnostics if recording else check_structure(st.structure).to_dict()
            st = FlowState(i * p.dt, st.structure, diag)
            if diag.get("gauge", 0.0) > ceiling:
                raise SingularityError(
                    f"singularity gauge {st.diagnostics['gauge']:.3g} exceeded ceiling {ceiling:.3g}",
                    st.diagnostics["gauge"],
                    st.t,
                )
            if max(st.diagnostics["j_squared"], st.diagnostics["compatibility"]) > EVOLUTION_TOL:
                raise FlowError(f"structure residuals exceeded {EVOLUTION_TOL:g} at t={st.t:.4g}")
        except (FlowError, np.linalg.LinAlgError, ValueError) as exc:
            traj.failure = f"{type(exc).__name__}: {exc}"
            log.warning("flow stopped at step %d: %s", i, traj.failure)
            break
        if recording:
            traj.states.append(st)
            traj.records.append(record(st, reference, norm_order))
            if progress is not None:
                progress(st)
    return traj
