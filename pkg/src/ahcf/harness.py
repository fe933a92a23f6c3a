"""Stability experiments: amplitude sweeps, decay fits, kernel re-centering, full pipeline."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .lattice import Lattice, grid_mean
from .linear import SpectrumReport, flat_handle, kernel_projection, spectrum
from .perturb import (
    PerturbationError,
    generate_perturbation,
    pair_norms,
    psi_norms,
    psi_of,
    commuting_block_array,
    rho_norms,
    rho_of,
)
from .flow import FlowParams, Trajectory, run
from .structure import (
    AHStructure,
    TangentPerturbation,
    anti_commuting_part,
    check_structure,
    constant_structure,
    form_parts,
    inner,
    standard_complex_matrix,
    standard_structure,
)
from .storage import ExperimentConfig

log = logging.getLogger(__name__)

THREADS_ENV = "AHCF_THREADS"


class HarnessError(RuntimeError):
    pass


def thread_count() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            return max(1, int(raw))
        except ValueError as exc:
            raise HarnessError(f"{THREADS_ENV} must be a positive integer") from exc
    return os.cpu_count() or 1


# --- decay fits ----------------------------------------------------------------------


@dataclass(frozen=True)
class DecayReport:
    fit_rate: float
    window: tuple
    r_squared: float
    reference_gap: Optional[float]
    verdict: Optional[bool]
    fraction: float
    samples: int

    def to_dict(self) -> dict:
        return {
            "fit_rate": self.fit_rate,
            "window": list(self.window),
            "r_squared": self.r_squared,
            "reference_gap": self.reference_gap,
            "verdict": self.verdict,
            "fraction": self.fraction,
            "samples": self.samples,
        }


def decay_fit(
    times: Sequence[float],
    values: Sequence[float],
    window: Optional[tuple] = None,
    reference_gap: Optional[float] = None,
    fraction: float = 0.8,
) -> DecayReport:
    """Least-squares slope of ``-log(values)`` against time inside ``window``."""
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    if t.shape != v.shape:
        raise HarnessError("times and values differ in length")
    lo, hi = window if window is not None else (t.min(), t.max())
    if not hi > lo or lo < t.min() - 1e-12 or hi > t.max() + 1e-12:
        raise HarnessError(f"degenerate or out-of-span window {window}")
    sel = (t >= lo - 1e-12) & (t <= hi + 1e-12)
    if sel.sum() < 10:
        raise HarnessError(f"need at least 10 samples in the fit window, got {int(sel.sum())}")
    if np.any(v[sel] <= 0):
        raise HarnessError("decay fits need strictly positive values")
    x, y = t[sel], np.log(v[sel])
    A = np.vstack([x, np.ones_like(x)]).T
    (slope, icpt), *_ = np.linalg.lstsq(A, y, rcond=None)
    pred = A @ np.array([slope, icpt])
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    r2 = min(max(r2, 0.0), 1.0)
    rate = float(-slope)
    verdict = None if reference_gap is None else bool(rate >= fraction * reference_gap)
    return DecayReport(rate, (float(lo), float(hi)), r2, reference_gap, verdict, fraction, int(sel.sum()))


# --- kernel re-centering ---------------------------------------------------------------


def kernel_structure(lattice: Lattice, c1: np.ndarray, c2: np.ndarray) -> AHStructure:
    """The constant structure whose tangent surrogate against the standard structure is (c1, c2).

    ``J = J0 + c2 + Kc(c2)``; omega is the unique constant J-invariant 2-form
    whose J0-(1,1) part is ``omega0 + c1^(1,1)``; the metric is ``omega J``.
    """
    d = lattice.dim
    J0 = standard_complex_matrix(d)
    w0 = J0.T
    J = J0 + c2 + commuting_block_array(np.asarray(c2, dtype=float), J0)
    iu = np.triu_indices(d, 1)
    cols = []
    for a, b in zip(*iu):
        w = np.zeros((d, d))
        w[a, b], w[b, a] = 1.0, -1.0
        p11, _ = form_parts(w, J0)
        cols.append(np.concatenate([p11[iu], (w - J.T @ w @ J)[iu]]))
    target, _ = form_parts(w0 + c1, J0)
    rhs = np.concatenate([target[iu], np.zeros(len(cols))])
    coef, *_ = np.linalg.lstsq(np.array(cols).T, rhs, rcond=None)
    omega = np.zeros((d, d))
    omega[iu] = coef
    omega = omega - omega.T
    g = omega @ J
    g = 0.5 * (g + g.T)
    if np.linalg.eigvalsh(g).min() <= 0:
        raise HarnessError("kernel shift produced a non-positive metric")
    return constant_structure(lattice, g, J)


def pi0_ratio(psi: TangentPerturbation) -> float:
    tot = inner(psi, psi)
    if tot <= 0:
        return 0.0
    p0 = kernel_projection(psi)
    return float(inner(p0, p0) / tot)


def _kernel_coords(psi: TangentPerturbation) -> tuple[np.ndarray, np.ndarray]:
    lat = psi.lattice
    return grid_mean(lat, psi.psi1.data), grid_mean(lat, psi.psi2.data)


@dataclass(eq=False)
class RecenterRecord:
    t0: float
    reference_j: AHStructure
    kernel_coords: tuple
    times: np.ndarray
    pi0_ratio_series: np.ndarray
    psi_l2_series: np.ndarray
    neighborhood_norm: float
    neighborhood_ratio: float
    pi0_ratio_at_t0: float
    iterations: int

    def to_dict(self) -> dict:
        return {
            "t0": self.t0,
            "kernel_coords": {"psi1": self.kernel_coords[0].tolist(), "psi2": self.kernel_coords[1].tolist()},
            "times": self.times.tolist(),
            "pi0_ratio_series": self.pi0_ratio_series.tolist(),
            "psi_l2_series": self.psi_l2_series.tolist(),
            "neighborhood_norm": self.neighborhood_norm,
            "neighborhood_ratio": self.neighborhood_ratio,
            "pi0_ratio_at_t0": self.pi0_ratio_at_t0,
            "iterations": self.iterations,
        }


def _state_index(traj: Trajectory, t0: float) -> int:
    times = traj.times
    i = int(np.argmin(np.abs(times - t0)))
    if abs(times[i] - t0) > 1e-9 * max(1.0, abs(t0)):
        raise HarnessError(f"t0={t0} is not a recorded time")
    return i


def solve_recenter(structure: AHStructure, start: Optional[tuple] = None, tol: float = 1e-13, max_iter: int = 50):
    """Kernel coordinates c with ``pi0(psi(structure) against kernel_structure(c)) = 0``.

    Fixed-point iteration ``c <- c + mean(psi_c)``; the linear version of the
    map is the identity, so it contracts at rate O(|psi|).
    """
    lat = structure.lattice
    d = lat.dim
    if start is None:
        c1, c2 = np.zeros((d, d)), np.zeros((d, d))
    else:
        c1, c2 = (np.array(a, dtype=float) for a in start)
    J0 = standard_complex_matrix(d)
    for it in range(1, max_iter + 1):
        ref = kernel_structure(lat, c1, c2)
        m1, m2 = _kernel_coords(psi_of(structure, ref, check=False))
        c1 = c1 + m1
        c2 = anti_commuting_part(c2 + m2, J0)
        if max(np.abs(m1).max(), np.abs(m2).max()) < tol:
            return (c1, c2), kernel_structure(lat, c1, c2), it
    raise HarnessError("re-centering iteration did not converge")


def recenter(
    traj: Trajectory,
    t0: float,
    spec: Optional[SpectrumReport] = None,
    interval: Optional[float] = None,
    k: int = 2,
    start: Optional[tuple] = None,
) -> RecenterRecord:
    """Re-center on the flat family so that the kernel part of psi vanishes at ``t0``."""
    ref0 = traj.reference if traj.reference is not None else standard_structure(traj.states[0].structure.lattice)
    i0 = _state_index(traj, t0)
    coords, ref_I, iters = solve_recenter(traj.states[i0].structure, start)
    diag = check_structure(ref_I)
    if diag.max_residual() > 1e-8:
        raise HarnessError(f"re-centered reference fails its checks: {diag.to_dict()}")
    times = traj.times
    hi = times[-1] if interval is None else t0 + interval
    sel = [i for i, t in enumerate(times) if t0 - 1e-12 <= t <= hi + 1e-12]
    ratios, l2 = [], []
    sup_psi = 0.0
    for i in sel:
        psi_I = psi_of(traj.states[i].structure, ref_I, check=False)
        ratios.append(pi0_ratio(psi_I))
        l2.append(np.sqrt(inner(psi_I, psi_I)))
        sup_psi = max(sup_psi, psi_norms(psi_of(traj.states[i].structure, ref0, check=False), ref0, k).ck(k))
    rho_ref = rho_of(ref_I, ref0)
    nb = pair_norms(rho_ref.h.data, rho_ref.K.data, ref0.g.data, ref0.lattice, k).ck(k)
    return RecenterRecord(
        t0=float(times[i0]),
        reference_j=ref_I,
        kernel_coords=coords,
        times=times[sel],
        pi0_ratio_series=np.array(ratios),
        psi_l2_series=np.array(l2),
        neighborhood_norm=float(nb),
        neighborhood_ratio=float(nb / sup_psi) if sup_psi > 0 else float("nan"),
        pi0_ratio_at_t0=float(ratios[0]),
        iterations=iters,
    )


def reference_distance(a: AHStructure, b: AHStructure) -> float:
    """Sup-norm distance of two structures as a (2-form, endomorphism) pair."""
    r = rho_of(a, b)
    return float(pair_norms(r.h.data, r.K.data, b.g.data, b.lattice, 0).sup_by_order[0])


@dataclass(eq=False)
class IteratedRecentering:
    records: list
    distances: list
    distance_ratios: list
    final_reference: AHStructure
    limit_decay: Optional[DecayReport]
    final_distance: float

    def to_dict(self) -> dict:
        return {
            "records": [r.to_dict() for r in self.records],
            "successive_distances": self.distances,
            "distance_ratios": self.distance_ratios,
            "limit_decay": None if self.limit_decay is None else self.limit_decay.to_dict(),
            "final_distance": self.final_distance,
        }


def iterated_recenter(traj: Trajectory, T: float, count: int, gap: Optional[float], k: int = 2) -> IteratedRecentering:
    """Re-center at ``jT`` for ``j = 1..count`` and track the reference sequence.

    The squared L^2 norm of ``rho_j = (omega - omega_j, J - J_j)`` against the
    last reference is fitted over ``[T, t_end]`` and compared with ``gap / 2``.
    """
    ref0 = traj.reference if traj.reference is not None else standard_structure(traj.states[0].structure.lattice)
    records, refs = [], [ref0]
    start = None
    for j in range(1, count + 1):
        rec = recenter(traj, j * T, interval=T, k=k, start=start)
        start = rec.kernel_coords
        records.append(rec)
        refs.append(rec.reference_j)
    dists = [reference_distance(refs[j + 1], refs[j]) for j in range(len(refs) - 1)]
    ratios = [dists[j + 1] / dists[j] if dists[j] > 0 else float("nan") for j in range(len(dists) - 1)]
    last = refs[-1]
    times = traj.times
    sel = times >= T - 1e-12
    sq = []
    for i in np.nonzero(sel)[0]:
        rn = rho_norms(rho_of(traj.states[i].structure, last), last, 0)
        sq.append(rn.l2**2)
    fit = None
    try:
        fit = decay_fit(times[sel], sq, reference_gap=gap, fraction=0.4)
    except HarnessError as exc:
        log.warning("limit decay fit unavailable: %s", exc)
    final = rho_norms(rho_of(traj.states[-1].structure, last), last, 0).l2
    return IteratedRecentering(records, dists, ratios, last, fit, float(final))


# --- sweeps --------------------------------------------------------------------------


@dataclass(eq=False)
class SweepReport:
    amplitudes: list
    sup_norms: list
    initial_norms: list
    growth: list
    halving_ratios: list
    failures: list
    k: int
    T: float

    def to_dict(self) -> dict:
        return {
            "amplitudes": self.amplitudes,
            "sup_norms": self.sup_norms,
            "initial_norms": self.initial_norms,
            "growth": self.growth,
            "halving_ratios": self.halving_ratios,
            "failures": self.failures,
            "k": self.k,
            "T": self.T,
            "monotone": all(a >= b for a, b in zip(self.sup_norms, self.sup_norms[1:])),
        }


def start_close_stay_close(
    amplitudes: Sequence[float],
    T: float = 3.0,
    k: int = 2,
    config: Optional[ExperimentConfig] = None,
    threads: Optional[int] = None,
) -> SweepReport:
    """sup over [0, T] of ``|rho|_{C^k}`` for each amplitude (sorted descending)."""
    cfg = config or ExperimentConfig()
    amps = sorted((float(a) for a in amplitudes), reverse=True)
    if any(a > 0.05 for a in amps):
        raise HarnessError("sweep amplitudes must not exceed 0.05")
    lat = cfg.lattice()
    ref = standard_structure(lat)
    params = FlowParams(dt=cfg.dt, gauge=cfg.gauge)

    def member(a):
        if a == 0:
            return 0.0, 0.0, None
        s0 = generate_perturbation(ref, a, tuple(cfg.mode_band), cfg.seed, cfg.components)
        traj = run(s0, params, T, record_every=cfg.record_every, reference=ref, norm_order=k)
        sups = traj.series(f"rho_c{k}")
        return float(sups.max()), float(sups[0]), traj.failure

    workers = min(threads or thread_count(), len(amps)) or 1
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(member, amps))
    sups = [r[0] for r in results]
    init = [r[1] for r in results]
    growth = [s / i if i > 0 else float("nan") for s, i in zip(sups, init)]
    halving = []
    for a, b, sa, sb in zip(amps, amps[1:], sups, sups[1:]):
        if sb > 0 and np.isclose(a, 2 * b):
            halving.append(sa / sb)
    return SweepReport(amps, sups, init, growth, halving, [r[2] for r in results], k, T)


# --- full pipeline -------------------------------------------------------------------


@dataclass(eq=False)
class ExperimentReport:
    config: ExperimentConfig
    status: str
    trajectory: Optional[Trajectory] = None
    spectrum: Optional[SpectrumReport] = None
    decay: Optional[DecayReport] = None
    recentering: Optional[IteratedRecentering] = None
    errors: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "status": self.status,
            "failure": None if self.trajectory is None else self.trajectory.failure,
            "spectrum": None if self.spectrum is None else self.spectrum.to_dict(),
            "decay": None if self.decay is None else self.decay.to_dict(),
            "recentering": None if self.recentering is None else self.recentering.to_dict(),
            "errors": self.errors,
        }


def experiment_spectrum(cfg: ExperimentConfig) -> SpectrumReport:
    lat = cfg.lattice()
    h = flat_handle(lat, cfg.s_param)
    if lat.dim == 2 and lat.points_per_axis <= 12:
        return spectrum(h, method="dense")
    return spectrum(h, count=kernel_count(lat.n) + 4, method="iterative", seed=cfg.seed)


def kernel_count(n: int) -> int:
    return (2 * n) * (2 * n - 1) // 2 + 2 * n * n


def attach_pi0(traj: Trajectory, ref: AHStructure) -> None:
    for st, rec in zip(traj.states, traj.records):
        rec["pi0_ratio"] = pi0_ratio(psi_of(st.structure, ref, check=False))


def run_experiment(cfg: ExperimentConfig) -> ExperimentReport:
    """generate -> spectrum -> flow -> decay fit -> iterated re-centering."""
    report = ExperimentReport(config=cfg, status="ok")
    lat = cfg.lattice()
    ref = standard_structure(lat)
    try:
        report.spectrum = experiment_spectrum(cfg)
    except Exception as exc:  # embedded, not fatal
        report.errors.append(f"spectrum: {exc}")
    gap = report.spectrum.gap_lambda if report.spectrum is not None else None
    try:
        s0 = generate_perturbation(ref, cfg.amplitude, tuple(cfg.mode_band), cfg.seed, cfg.components)
    except PerturbationError as exc:
        report.errors.append(f"generate: {exc}")
        report.status = "failed"
        return report
    params = FlowParams(dt=cfg.dt, gauge=cfg.gauge)
    traj = run(s0, params, cfg.t_end, record_every=cfg.record_every, reference=ref, norm_order=cfg.norm_order)
    attach_pi0(traj, ref)
    report.trajectory = traj
    if traj.failure:
        report.errors.append(f"flow: {traj.failure}")
        report.status = "partial"
    if cfg.amplitude == 0:
        report.status = "static"
        return report
    times, l2 = traj.times, traj.series("psi_l2")
    try:
        lo = cfg.fit_window_fraction * times[-1]
        report.decay = decay_fit(times, l2, (lo, times[-1]), gap, 0.8)
    except HarnessError as exc:
        report.errors.append(f"decay_fit: {exc}")
    T = cfg.recenter_T if cfg.recenter_T > 0 else (3.0 / gap if gap else 3.0)
    count = min(cfg.intervals, int(np.floor(times[-1] / T + 1e-9)))
    if count >= 1:
        # snap to recorded times
        step = cfg.dt * cfg.record_every
        T = round(T / step) * step
        try:
            report.recentering = iterated_recenter(traj, T, count, gap, cfg.norm_order)
        except (HarnessError, PerturbationError) as exc:
            report.errors.append(f"recenter: {exc}")
    return report
