import numpy as np
import pytest

from ahcf.flow import FlowParams, run
from ahcf.harness import (
    HarnessError,
    decay_fit,
    kernel_count,
    kernel_structure,
    pi0_ratio,
    recenter,
    run_experiment,
    solve_recenter,
    start_close_stay_close,
)
from ahcf.lattice import Lattice
from ahcf.perturb import generate_perturbation, psi_of
from ahcf.storage import ExperimentConfig
from ahcf.structure import check_structure, standard_complex_matrix, standard_structure


def test_decay_fit_recovers_exponential():
    t = np.linspace(0, 5, 51)
    rep = decay_fit(t, 3.0 * np.exp(-1.0 * t), reference_gap=1.0)
    assert rep.fit_rate == pytest.approx(1.0, abs=1e-10)
    assert rep.r_squared == pytest.approx(1.0, abs=1e-12)
    assert rep.verdict is True and rep.samples == 51


def test_decay_fit_window_and_verdict():
    t = np.linspace(0, 10, 101)
    v = np.where(t < 5, np.exp(-3 * t), np.exp(-15) * np.exp(-0.2 * (t - 5)))
    rep = decay_fit(t, v, window=(5, 10), reference_gap=1.0)
    assert rep.fit_rate == pytest.approx(0.2, abs=1e-10)
    assert rep.verdict is False


def test_decay_fit_rejects_bad_input():
    t = np.linspace(0, 1, 5)
    with pytest.raises(HarnessError):
        decay_fit(t, np.exp(-t))
    t = np.linspace(0, 1, 20)
    with pytest.raises(HarnessError):
        decay_fit(t, np.exp(-t), window=(0.5, 0.5))
    with pytest.raises(HarnessError):
        decay_fit(t, -np.exp(-t))


def test_kernel_counts():
    assert kernel_count(1) == 3 and kernel_count(2) == 14


@pytest.mark.parametrize("n", [1, 2])
def test_kernel_structure_zero_is_standard(n):
    lat = Lattice(n, 4)
    d = 2 * n
    s = kernel_structure(lat, np.zeros((d, d)), np.zeros((d, d)))
    ref = standard_structure(lat)
    for a, b in zip(s.arrays(), ref.arrays()):
        assert np.abs(a - b).max() < 1e-14


def test_solve_recenter_removes_constant_shift(rng):
    lat = Lattice(2, 4)
    d = 4
    J0 = standard_complex_matrix(d)
    c1 = 1e-3 * rng.standard_normal((d, d))
    c1 = c1 - c1.T
    c2 = 1e-3 * rng.standard_normal((d, d))
    c2 = 0.5 * (c2 + J0 @ c2 @ J0)
    target = kernel_structure(lat, c1, c2)
    assert check_structure(target).max_residual() < 1e-12
    _, ref, _ = solve_recenter(target)
    psi = psi_of(target, ref, check=False)
    assert max(np.abs(psi.psi1.data).max(), np.abs(psi.psi2.data).max()) < 1e-8


def test_recenter_on_mean_free_start_keeps_reference():
    lat = Lattice(1, 12)
    ref = standard_structure(lat)
    s0 = generate_perturbation(ref, 1e-2, seed=0)
    traj = run(s0, FlowParams(dt=0.05), 0.1, record_every=1, reference=ref)
    rec = recenter(traj, 0.0)
    # the generated perturbation has no zero mode, so the kernel part is already quadratic
    assert rec.neighborhood_norm < 1e-3
    assert rec.pi0_ratio_at_t0 < 1e-20


def test_recenter_reduces_kernel_part():
    lat = Lattice(1, 12)
    ref = standard_structure(lat)
    s0 = generate_perturbation(ref, 1e-2, seed=0)
    traj = run(s0, FlowParams(dt=0.05), 2.0, record_every=2, reference=ref)
    rec = recenter(traj, 1.0)
    i = int(np.argmin(np.abs(traj.times - 1.0)))
    before = pi0_ratio(psi_of(traj.states[i].structure, ref, check=False))
    assert rec.pi0_ratio_at_t0 <= before
    assert rec.pi0_ratio_at_t0 < 1e-20
    with pytest.raises(HarnessError):
        recenter(traj, 0.33)


def test_sweep_zero_amplitude_and_limits():
    cfg = ExperimentConfig(points_per_axis=8)
    rep = start_close_stay_close([0.0, 0.01], T=0.5, config=cfg, threads=2)
    assert rep.amplitudes == [0.01, 0.0]
    assert rep.sup_norms[-1] == 0.0
    with pytest.raises(HarnessError):
        start_close_stay_close([0.1], config=cfg)


def test_run_experiment_static_and_failed():
    rep = run_experiment(ExperimentConfig(points_per_axis=8, amplitude=0.0, t_end=0.5))
    assert rep.status == "static"
    assert max(rep.trajectory.series("rho_l2")) == 0
    bad = run_experiment(ExperimentConfig(points_per_axis=8, amplitude=0.5, t_end=0.5))
    assert bad.status == "failed" and bad.errors


def test_run_experiment_is_deterministic():
    cfg = ExperimentConfig(points_per_axis=8, t_end=2.0, recenter_T=1.0, intervals=2)
    a = run_experiment(cfg).to_dict()
    b = run_experiment(cfg).to_dict()
    assert a == b
    assert a["status"] == "ok" and not a["errors"]
    assert a["spectrum"]["kernel_dimension"] == 3
