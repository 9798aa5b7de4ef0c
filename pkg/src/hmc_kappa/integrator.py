"""Leapfrog integration and its closed form on Gaussian targets.

For one coordinate with variance ``sigma**2`` a leapfrog step is the linear map

    U_h = [[1 - h^2/(2 sigma^2),              h                  ],
           [-(h/sigma^2 - h^3/(4 sigma^4)),   1 - h^2/(2 sigma^2)]]

and, while ``h < 2 sigma``, ``U_h**l`` is a rotation by ``l * theta`` in
suitably scaled coordinates.  :class:`ModeDynamics` exposes that closed form
so a whole trajectory costs O(1) per coordinate regardless of ``l``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np

from hmc_kappa.errors import InvalidConfig, Unstable

GradFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class PhasePoint:
    """Position ``x`` and momentum ``xi`` (unit mass)."""

    x: np.ndarray
    xi: np.ndarray

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.x, dtype=float))
        xi = np.atleast_1d(np.asarray(self.xi, dtype=float))
        if x.shape != xi.shape:
            raise InvalidConfig(f"x and xi differ in shape: {x.shape} vs {xi.shape}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "xi", xi)

    @property
    def dim(self) -> int:
        return self.x.shape[-1]

    def flipped(self) -> "PhasePoint":
        """Same position, negated momentum."""
        return PhasePoint(self.x, -self.xi)


def leapfrog_step(point: PhasePoint, h, grad_logp: GradFn) -> PhasePoint:
    """One half-kick / drift / half-kick step of size ``h``.

    ``h`` may be an array broadcasting against the coordinates (independent
    step sizes for independent coordinates).
    """
    xi_half = point.xi + 0.5 * h * grad_logp(point.x)
    x_new = point.x + h * xi_half
    xi_new = xi_half + 0.5 * h * grad_logp(x_new)
    return PhasePoint(x_new, xi_new)


def _leapfrog_arrays(x, xi, h, ell, grad_logp, g=None):
    # array version of leapfrog_trajectory; reuses the gradient between steps
    if ell == 0:
        return x, xi
    if g is None:
        g = grad_logp(x)
    for _ in range(ell):
        xi = xi + 0.5 * h * g
        x = x + h * xi
        g = grad_logp(x)
        xi = xi + 0.5 * h * g
    return x, xi


def leapfrog_trajectory(point: PhasePoint, h, ell: int, grad_logp: GradFn) -> PhasePoint:
    """``ell``-fold composition of :func:`leapfrog_step`."""
    if ell < 0:
        raise InvalidConfig(f"step count must be >= 0, got {ell}")
    x, xi = _leapfrog_arrays(point.x, point.xi, h, int(ell), grad_logp)
    return PhasePoint(x, xi)


def hamiltonian(point: PhasePoint, cov) -> float:
    """``x^T C^-1 x / 2 + |xi|^2 / 2`` for the centred Gaussian with covariance ``cov``.

    ``cov`` is a :class:`~hmc_kappa.spectra.CovarianceModel`.
    """
    x, xi = point.x, point.xi
    return float(0.5 * np.dot(x, cov.precision_apply(x)) + 0.5 * np.dot(xi, xi))


def leapfrog_rotation_angle(sigma, h):
    """``theta = arccos(1 - h^2/(2 sigma^2))``, evaluated as ``2 arcsin(h / (2 sigma))``."""
    return 2.0 * np.arcsin(np.asarray(h, dtype=float) / (2.0 * np.asarray(sigma, dtype=float)))


def _check_stable(sigma, h):
    ratio = np.asarray(h, dtype=float) / (2.0 * np.asarray(sigma, dtype=float))
    if np.any(ratio >= 1.0) or np.any(ratio < 0):
        worst = float(np.max(ratio))
        raise Unstable(f"leapfrog unstable: h / (2 sigma) = {worst:.6g} must be < 1")


@dataclass(frozen=True)
class ModeDynamics:
    """Closed-form leapfrog dynamics for one Gaussian coordinate of scale ``sigma``."""

    sigma: float
    h: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise InvalidConfig(f"sigma must be > 0, got {self.sigma}")
        _check_stable(self.sigma, self.h)

    @property
    def eps(self) -> float:
        """``h / (2 sigma)``."""
        return self.h / (2.0 * self.sigma)

    @cached_property
    def theta(self) -> float:
        return float(leapfrog_rotation_angle(self.sigma, self.h))

    @cached_property
    def gamma(self) -> float:
        """``sqrt(1/sigma^2 - h^2/(4 sigma^4))``: ``U_h^l[1, 0] = -gamma sin(l theta)``."""
        return math.sqrt(1.0 - self.eps**2) / self.sigma

    @cached_property
    def chi(self) -> float:
        e2 = self.eps**2
        return e2 * e2 / (1.0 - e2)

    @property
    def eigenvalues(self) -> tuple[complex, complex]:
        re = 1.0 - self.h**2 / (2.0 * self.sigma**2)
        im = (self.h / self.sigma) * math.sqrt(1.0 - self.eps**2)
        return complex(re, im), complex(re, -im)

    def matrix(self) -> np.ndarray:
        """The one-step map ``U_h`` acting on ``(x, xi)``."""
        h, s2 = self.h, self.sigma**2
        d = 1.0 - h * h / (2.0 * s2)
        return np.array([[d, h], [-(h / s2 - h**3 / (4.0 * s2 * s2)), d]])

    def power(self, ell: int) -> np.ndarray:
        """``U_h**ell`` in rotation form."""
        c, s = math.cos(ell * self.theta), math.sin(ell * self.theta)
        if self.h == 0:
            return np.eye(2)
        return np.array([[c, s / self.gamma], [-self.gamma * s, c]])


def mode_propagate(sigma, h, ell, x0, xi0):
    """Apply ``U_h**ell`` to ``(x0, xi0)``; all arguments broadcast.

    Raises:
        Unstable: if ``h >= 2 sigma`` anywhere.
    """
    sigma = np.asarray(sigma, dtype=float)
    _check_stable(sigma, h)
    theta = leapfrog_rotation_angle(sigma, h)
    eps = np.asarray(h, dtype=float) / (2.0 * sigma)
    gs = np.sqrt(1.0 - eps**2)  # gamma * sigma
    phase = np.asarray(ell) * theta
    c, s = np.cos(phase), np.sin(phase)
    x = c * x0 + (sigma / gs) * s * xi0
    xi = -(gs / sigma) * s * x0 + c * xi0
    return x, xi


def mode_energy_error(sigma, h, ell, x0, xi0):
    """Change of ``x^2/(2 sigma^2) + xi^2/2`` over ``ell`` leapfrog steps, in closed form.

    ``delta = sin^2(l theta)/2 (h/2sigma)^2 (xi0^2 - x0^2/sigma^2)
             + sin^2(l theta) chi xi0^2 / 2
             + cos(l theta) sin(l theta) sqrt(chi) x0 xi0 / sigma``
    """
    sigma = np.asarray(sigma, dtype=float)
    _check_stable(sigma, h)
    eps2 = (np.asarray(h, dtype=float) / (2.0 * sigma)) ** 2
    chi = eps2 * eps2 / (1.0 - eps2)
    phase = np.asarray(ell) * leapfrog_rotation_angle(sigma, h)
    s, c = np.sin(phase), np.cos(phase)
    return (
        0.5 * s * s * eps2 * (xi0**2 - (x0 / sigma) ** 2)
        + 0.5 * s * s * chi * xi0**2
        + c * s * np.sqrt(chi) * x0 * xi0 / sigma
    )


def mode_energy_error_bound(sigma, h, x0, xi0):
    """Upper bound on ``|delta|`` valid for every ``ell``."""
    sigma = np.asarray(sigma, dtype=float)
    eps2 = (np.asarray(h, dtype=float) / (2.0 * sigma)) ** 2
    chi = eps2 * eps2 / (1.0 - eps2)
    return 0.5 * eps2 * np.abs(xi0**2 - (x0 / sigma) ** 2) + 0.5 * chi * xi0**2 + np.sqrt(chi) * np.abs(x0 * xi0) / sigma


@dataclass(frozen=True)
class IntegrationTimeLaw:
    """Uniform law of the integration time ``T`` on ``[lo, hi]``.

    A trajectory runs for time ``sigma1 * T``.  ``sigma1=None`` means "use the
    largest scale of the target" (see :meth:`resolve`).
    """

    lo: float = 0.5
    hi: float = 1.5
    sigma1: float | None = None

    def __post_init__(self):
        if not (0 <= self.lo < self.hi):
            raise InvalidConfig(f"need 0 <= lo < hi, got [{self.lo}, {self.hi}]")
        if self.sigma1 is not None and not self.sigma1 > 0:
            raise InvalidConfig(f"sigma1 must be > 0, got {self.sigma1}")

    def resolve(self, sigma1: float) -> "IntegrationTimeLaw":
        """This law with ``sigma1`` filled in if it was left open."""
        if self.sigma1 is not None:
            return self
        return IntegrationTimeLaw(self.lo, self.hi, float(sigma1))

    @property
    def scale(self) -> float:
        if self.sigma1 is None:
            raise InvalidConfig("integration-time law has no sigma1; call resolve() first")
        return self.sigma1

    def characteristic(self, omega):
        """``|pi_hat(omega)|`` of the unscaled law of ``T``."""
        w = np.asarray(omega, dtype=float) * (self.hi - self.lo) / 2.0
        return np.abs(np.sinc(w / np.pi))

    def fourier_bound(self) -> float:
        """``C_pi = sup_{|omega| >= 2} |pi_hat(omega)|`` (< 1 for any uniform law)."""
        width = self.hi - self.lo
        # |pi_hat(w)| = |sin(u)/u| with u = w*width/2 >= width
        u0 = width
        u = np.linspace(u0, u0 + 4.0 * np.pi, 20001)
        return float(max(abs(math.sin(u0) / u0), np.max(np.abs(np.sin(u) / u))))

    def sample(self, rng: np.random.Generator, size=None):
        return rng.uniform(self.lo, self.hi, size=size)

    def steps(self, T, h):
        """Leapfrog step count ``ceil(sigma1 * T / h)``."""
        return np.ceil(self.scale * np.asarray(T) / h).astype(np.int64)


DEFAULT_LAW = IntegrationTimeLaw(0.5, 1.5)


def sin2_average(sigma_n, law: IntegrationTimeLaw):
    """Mean of ``sin^2(t / sigma_n)`` for ``t = sigma1 * T``, ``T ~ U[lo, hi]``.

    Closed form: ``1/2 - sigma_n / (4 sigma1 (hi - lo)) * [sin(2 sigma1 hi / sigma_n) - sin(2 sigma1 lo / sigma_n)]``.
    """
    s = np.asarray(sigma_n, dtype=float)
    s1, lo, hi = law.scale, law.lo, law.hi
    val = 0.5 - s / (4.0 * s1 * (hi - lo)) * (np.sin(2.0 * s1 * hi / s) - np.sin(2.0 * s1 * lo / s))
    return np.clip(val, 0.0, 1.0)
