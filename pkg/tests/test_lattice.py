import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ahcf.lattice import (
    DOWN,
    UP,
    Lattice,
    LatticeError,
    LatticeField,
    constant_field,
    deriv,
    flat_metric,
    grad,
    hessian,
    integrate,
    norms,
    resolve,
    scalar,
    spectral_derivative,
)
from ahcf.linear import random_band_limited


def fd4(f, h, axis):
    return (-np.roll(f, -2, axis) + 8 * np.roll(f, -1, axis) - 8 * np.roll(f, 1, axis) + np.roll(f, 2, axis)) / (12 * h)


def test_lattice_validation():
    with pytest.raises(LatticeError):
        Lattice(3, 8)
    with pytest.raises(LatticeError):
        Lattice(1, 7)
    with pytest.raises(LatticeError):
        Lattice(1, 8, side_length=-1.0)


def test_field_shape_and_finiteness(lat2):
    with pytest.raises(LatticeError):
        LatticeField(lat2, (UP,), np.zeros((16, 16)))
    bad = np.zeros((16, 16))
    bad[3, 3] = np.nan
    with pytest.raises(LatticeError):
        scalar(lat2, bad)


def test_derivative_of_constant_is_zero(lat2):
    f = scalar(lat2, np.full(lat2.shape, 3.7))
    assert np.abs(spectral_derivative(f, 0).data).max() < 1e-14


def test_derivative_of_sine(lat2):
    x, y = lat2.coords
    f = scalar(lat2, np.sin(x))
    assert np.abs(spectral_derivative(f, 0).data - np.cos(x)).max() < 1e-10
    assert np.abs(spectral_derivative(f, 1).data).max() < 1e-12


def test_derivative_matches_fourth_order_fd():
    errs = []
    for N in (32, 64):
        lat = Lattice(1, N)
        f = random_band_limited(lat, np.random.default_rng(0), 0, kmax=3)
        errs.append(np.abs(deriv(lat, f, 1) - fd4(f, lat.spacing, 1)).max())
    order = np.log2(errs[0] / errs[1])
    assert order > 3.7


def test_nyquist_is_not_resolved():
    lat = Lattice(1, 8)
    x, _ = lat.coords
    f = np.cos(4 * x)
    assert np.abs(deriv(lat, f, 0)).max() < 1e-12
    assert np.abs(resolve(lat, f)).max() < 1e-12


def test_hessian_symmetric_and_matches_grad(lat2, rng):
    f = random_band_limited(lat2, rng, 0, kmax=4)
    H = hessian(lat2, f)
    assert np.abs(H - np.swapaxes(H, -1, -2)).max() < 1e-13
    assert np.abs(H - grad(lat2, grad(lat2, f))).max() < 1e-11


def test_integrate(lat2):
    x, _ = lat2.coords
    assert integrate(scalar(lat2, np.ones(lat2.shape))) == pytest.approx((2 * np.pi) ** 2, rel=1e-14)
    assert abs(integrate(scalar(lat2, np.sin(x)))) < 1e-12
    assert integrate(scalar(lat2, np.sin(x) ** 2)) == pytest.approx(0.5 * (2 * np.pi) ** 2, rel=1e-12)


def test_norms_trivial(lat2):
    g = flat_metric(lat2)
    zero = norms(LatticeField(lat2, (UP, DOWN), lat2.zeros(2)), g, 2)
    assert zero.l2 == 0 and all(v == 0 for v in zero.sup_by_order.values())
    ident = norms(constant_field(lat2, np.eye(2), (UP, DOWN)), g, 2)
    assert ident.sup_by_order[0] == pytest.approx(1.0, abs=1e-14)
    assert ident.sup_by_order[1] < 1e-14 and ident.sup_by_order[2] < 1e-14


def test_norms_single_mode(lat2):
    a = 0.37
    x, _ = lat2.coords
    rep = norms(scalar(lat2, a * np.sin(x)), flat_metric(lat2), 3)
    for j in range(4):
        assert rep.sup_by_order[j] == pytest.approx(a, rel=1e-10)
    assert rep.ck(2) == pytest.approx(3 * a, rel=1e-10)


def test_norms_frame_invariance(lat2, rng):
    # a constant metric rescaling by c^2 scales a (0,2)-tensor's norm by 1/c^2
    f = random_band_limited(lat2, rng, 2, kmax=2)
    r1 = norms(LatticeField(lat2, (DOWN, DOWN), f), flat_metric(lat2), 0)
    r2 = norms(LatticeField(lat2, (DOWN, DOWN), f), constant_field(lat2, 4 * np.eye(2), (DOWN, DOWN)), 0)
    assert r2.sup_by_order[0] == pytest.approx(r1.sup_by_order[0] / 4, rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), a=st.floats(-3, 3), b=st.floats(-3, 3), axis=st.integers(0, 1))
def test_derivative_linear_and_mean_free(seed, a, b, axis):
    lat = Lattice(1, 12)
    rng = np.random.default_rng(seed)
    f = random_band_limited(lat, rng, 0, kmax=5)
    g = random_band_limited(lat, rng, 0, kmax=5)
    lhs = deriv(lat, a * f + b * g, axis)
    rhs = a * deriv(lat, f, axis) + b * deriv(lat, g, axis)
    assert np.abs(lhs - rhs).max() < 1e-12 * (1 + abs(a) + abs(b))
    assert abs(lhs.mean()) < 1e-12 * (1 + abs(a) + abs(b))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_integration_by_parts(seed):
    lat = Lattice(1, 12)
    rng = np.random.default_rng(seed)
    f = random_band_limited(lat, rng, 0, kmax=5)
    g = random_band_limited(lat, rng, 0, kmax=5)
    lhs = np.sum(deriv(lat, f, 0) * g)
    rhs = -np.sum(f * deriv(lat, g, 0))
    assert abs(lhs - rhs) < 1e-10 * (1 + abs(lhs))
