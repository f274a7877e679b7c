import numpy as np
import pytest

from riskmpc.spline import CubicSegment, fit_hermite, sample_ref


def test_endpoint_interpolation():
    rng = np.random.default_rng(0)
    for _ in range(50):
        x0, u0, x2, u2 = rng.normal(size=(4, 3))
        T = float(rng.uniform(0.05, 3.0))
        seg = fit_hermite(x0, u0, x2, u2, T)
        np.testing.assert_allclose(seg.position(0.0), x0, atol=1e-12)
        np.testing.assert_allclose(seg.velocity(0.0), u0, atol=1e-12)
        np.testing.assert_allclose(seg.position(T), x2, atol=1e-10)
        np.testing.assert_allclose(seg.velocity(T), u2, atol=1e-10)


def test_reproduces_exact_cubic():
    # If the endpoints come from a cubic, the fit recovers its coefficients.
    a = np.array([1.0, -2.0, 0.5, 0.25])
    p = np.polynomial.Polynomial(a)
    d = p.deriv()
    T = 1.3
    seg = fit_hermite(p(0.0), d(0.0), p(T), d(T), T)
    np.testing.assert_allclose(
        [seg.a0[0], seg.a1[0], seg.a2[0], seg.a3[0]], a, atol=1e-12
    )


def test_velocity_is_position_derivative():
    seg = fit_hermite([0.0, 1.0], [1.0, 0.0], [2.0, -1.0], [0.0, 0.5], 0.8)
    t = np.linspace(0.0, 0.8, 17)
    h = 1e-6
    fd = (seg.position(t + h) - seg.position(t - h)) / (2.0 * h)
    np.testing.assert_allclose(seg.velocity(t), fd, atol=1e-7)


def test_straight_line_constant_velocity():
    seg = fit_hermite([0.0, 0.0], [1.5, 0.0], [0.3, 0.0], [1.5, 0.0], 0.2)
    pos, vel = sample_ref(seg, 0.005)
    np.testing.assert_allclose(vel, np.tile([1.5, 0.0], (len(vel), 1)), atol=1e-12)
    np.testing.assert_allclose(pos[:, 0], np.arange(len(pos)) * 0.005 * 1.5, atol=1e-12)


def test_sample_count_and_spacing():
    seg = fit_hermite(0.0, 1.0, 0.2, 1.0, 0.2)
    pos, vel = sample_ref(seg, 0.005)
    # 0.2 / 0.005 + 1 samples, endpoints included
    assert pos.shape == (41, 1)
    assert vel.shape == (41, 1)
    assert pos[0, 0] == pytest.approx(0.0)
    assert pos[-1, 0] == pytest.approx(0.2)


def test_sample_handles_inexact_division():
    seg = fit_hermite(0.0, 0.0, 1.0, 0.0, 0.3)
    pos, _ = sample_ref(seg, 0.1)
    assert len(pos) == 4  # t = 0, 0.1, 0.2, 0.3 despite float round-off


def test_invalid_arguments():
    with pytest.raises(ValueError):
        fit_hermite(0.0, 0.0, 1.0, 0.0, 0.0)
    seg = fit_hermite(0.0, 0.0, 1.0, 0.0, 0.1)
    with pytest.raises(ValueError):
        sample_ref(seg, 0.0)
    with pytest.raises(ValueError):
        sample_ref(seg, 0.2)
    with pytest.raises(ValueError):
        CubicSegment(np.zeros(1), np.zeros(1), np.zeros(1), np.zeros(1), -1.0)
