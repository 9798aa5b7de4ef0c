import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hmc_kappa.errors import InvalidConfig, Unstable
from hmc_kappa.integrator import (
    IntegrationTimeLaw,
    ModeDynamics,
    PhasePoint,
    hamiltonian,
    leapfrog_rotation_angle,
    leapfrog_step,
    leapfrog_trajectory,
    mode_energy_error,
    mode_energy_error_bound,
    mode_propagate,
    sin2_average,
)
from hmc_kappa.spectra import CovarianceModel


def unit_grad(x):
    return -x


UNIT = CovarianceModel.diagonal([1.0])


class TestLeapfrog:
    def test_single_step(self):
        p = leapfrog_step(PhasePoint([1.0], [0.0]), 1.0, unit_grad)
        assert p.x.tolist() == [0.5] and p.xi.tolist() == [-0.75]

    def test_zero_step(self):
        p = leapfrog_step(PhasePoint([0.3, -1.0], [2.0, 0.1]), 0.0, unit_grad)
        assert p.x.tolist() == [0.3, -1.0] and p.xi.tolist() == [2.0, 0.1]

    def test_flat_target_drifts(self):
        p = leapfrog_step(PhasePoint([1.0, 2.0], [0.5, -1.0]), 0.2, np.zeros_like)
        assert np.allclose(p.x, [1.1, 1.8]) and np.allclose(p.xi, [0.5, -1.0])

    def test_trajectory_zero_steps(self):
        start = PhasePoint([1.0], [2.0])
        end = leapfrog_trajectory(start, 0.5, 0, unit_grad)
        assert end.x.tolist() == [1.0] and end.xi.tolist() == [2.0]

    def test_trajectory_matches_closed_form(self):
        end = leapfrog_trajectory(PhasePoint([1.0], [0.0]), 0.1, 200, unit_grad)
        x, xi = mode_propagate(1.0, 0.1, 200, 1.0, 0.0)
        assert end.x[0] == pytest.approx(x, abs=1e-8) and end.xi[0] == pytest.approx(xi, abs=1e-8)

    def test_time_reversible(self):
        grad = CovarianceModel.diagonal([2.0, 0.7]).grad_log_density
        start = PhasePoint([0.4, -1.2], [1.0, 0.3])
        end = leapfrog_trajectory(start, 0.3, 17, grad)
        back = leapfrog_trajectory(end.flipped(), 0.3, 17, grad)
        assert np.allclose(back.x, start.x) and np.allclose(back.xi, -start.xi)

    def test_negative_steps(self):
        with pytest.raises(InvalidConfig):
            leapfrog_trajectory(PhasePoint([1.0], [0.0]), 0.1, -1, unit_grad)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidConfig):
            PhasePoint([1.0, 2.0], [1.0])


class TestHamiltonian:
    @pytest.mark.parametrize("x, xi, want", [(0.0, 0.0, 0.0), (1.0, 0.0, 0.5), (0.5, -0.75, 0.40625)])
    def test_unit(self, x, xi, want):
        assert hamiltonian(PhasePoint([x], [xi]), UNIT) == pytest.approx(want, abs=1e-15)


class TestModeDynamics:
    def test_theta(self):
        assert ModeDynamics(1.0, 1.0).theta == pytest.approx(math.pi / 3, abs=1e-15)
        assert leapfrog_rotation_angle(1.0, 1.0) == pytest.approx(math.acos(0.5), abs=1e-15)

    def test_one_step(self):
        x, xi = mode_propagate(1.0, 1.0, 1, 1.0, 0.0)
        assert (x, xi) == pytest.approx((0.5, -0.75), abs=1e-15)

    def test_zero_steps(self):
        assert mode_propagate(1.3, 0.4, 0, 0.2, -0.7) == pytest.approx((0.2, -0.7))

    def test_power_matches_matrix_power(self):
        m = ModeDynamics(1.7, 0.9)
        assert np.allclose(m.power(13), np.linalg.matrix_power(m.matrix(), 13), atol=1e-12)

    def test_gamma_is_lower_left_entry(self):
        m = ModeDynamics(2.0, 0.8)
        assert -m.power(1)[1, 0] / math.sin(m.theta) == pytest.approx(m.gamma, rel=1e-12)
        assert m.gamma == pytest.approx(math.sqrt(1 / 4 - 0.64 / 64), rel=1e-14)

    def test_eigenvalues_on_unit_circle(self):
        lam = ModeDynamics(1.0, 1.5).eigenvalues
        assert abs(lam[0]) == pytest.approx(1.0)
        assert np.allclose(sorted(np.linalg.eigvals(ModeDynamics(1.0, 1.5).matrix()), key=lambda z: -z.imag),
                           lam)

    @pytest.mark.parametrize("h", [2.0, 2.5])
    def test_unstable(self, h):
        with pytest.raises(Unstable):
            ModeDynamics(1.0, h)
        with pytest.raises(Unstable):
            mode_propagate(1.0, h, 3, 1.0, 0.0)

    @given(st.floats(0.1, 10), st.floats(0.01, 0.99), st.integers(0, 500),
           st.floats(-3, 3), st.floats(-3, 3))
    def test_energy_error_matches_hamiltonian(self, sigma, frac, ell, x0, xi0):
        h = 2 * sigma * frac
        x, xi = mode_propagate(sigma, h, ell, x0, xi0)
        direct = (x * x / sigma**2 + xi * xi - x0 * x0 / sigma**2 - xi0 * xi0) / 2
        scale = 1 + x0 * x0 / sigma**2 + xi0 * xi0
        assert mode_energy_error(sigma, h, ell, x0, xi0) == pytest.approx(direct, abs=1e-10 * scale)
        assert abs(mode_energy_error(sigma, h, ell, x0, xi0)) <= mode_energy_error_bound(sigma, h, x0, xi0) + 1e-12

    def test_energy_error_example(self):
        assert mode_energy_error(1.0, 1.0, 1, 1.0, 0.0) == pytest.approx(-0.09375, abs=1e-15)

    def test_energy_error_small_h(self):
        assert abs(mode_energy_error(1.0, 1e-6, 10, 1.0, 1.0)) < 1e-11


class TestTimeLaw:
    def test_steps(self):
        law = IntegrationTimeLaw(0.5, 1.5, sigma1=2.0)
        assert law.steps(np.array([0.5, 1.0, 1.01]), 0.5).tolist() == [2, 4, 5]

    def test_unresolved_scale(self):
        with pytest.raises(InvalidConfig):
            IntegrationTimeLaw().scale

    @pytest.mark.parametrize("lo, hi", [(1.0, 1.0), (-1.0, 1.0), (2.0, 1.0)])
    def test_invalid(self, lo, hi):
        with pytest.raises(InvalidConfig):
            IntegrationTimeLaw(lo, hi)

    def test_fourier_bound_below_one(self):
        c = IntegrationTimeLaw(0.5, 1.5).fourier_bound()
        assert 0 < c < 1
        assert c == pytest.approx(math.sin(1.0), rel=1e-12)  # attained at u = width = 1

    def test_characteristic_at_zero(self):
        assert IntegrationTimeLaw().characteristic(0.0) == 1.0


class TestSin2Average:
    def test_half_on_pi_support(self):
        law = IntegrationTimeLaw(0.0, math.pi, sigma1=1.0)
        assert sin2_average(1.0, law) == pytest.approx(0.5, abs=1e-15)

    def test_small_scales_average_out(self):
        law = IntegrationTimeLaw(0.5, 1.5, sigma1=1.0)
        assert sin2_average(1e-4, law) == pytest.approx(0.5, abs=1e-4)

    def test_matches_quadrature(self):
        law = IntegrationTimeLaw(0.5, 1.5, sigma1=3.0)
        t = np.linspace(1.5, 4.5, 200_001)
        for s in (0.3, 1.0, 3.0):
            assert sin2_average(s, law) == pytest.approx(np.trapezoid(np.sin(t / s) ** 2, t) / 3.0, abs=1e-9)

    def test_deviation_bounded_by_fourier_constant(self):
        law = IntegrationTimeLaw(0.5, 1.5, sigma1=1.0)
        s = np.linspace(0.01, 1.0, 500)
        assert np.all(np.abs(sin2_average(s, law) - 0.5) <= law.fourier_bound() / 2 + 1e-12)
