"""Spectra, the HMC condition number, Schatten norms and SPD linear algebra.

A Gaussian target ``N(0, C)`` is described here by its *spectrum*: the scale
lengths ``sigma_1 >= ... >= sigma_N > 0``, i.e. the square roots of the
eigenvalues of ``C``.  The condition number

    kappa = (sum_n (sigma_1 / sigma_n)**4) ** (1/4)

is proportional to the number of leapfrog steps a well tuned HMC run needs, and
``nu = (sum_n sigma_n**-4) ** (1/4)`` is the inverse of the efficient step size
up to a constant, so that ``kappa = sigma_1 * nu``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from hmc_kappa.errors import (
    DegenerateRange,
    InvalidConfig,
    InvalidOrder,
    NoConvergence,
    NotPositiveDefinite,
)

SYMMETRY_RTOL = 1e-12
PD_RTOL = 1e-12

# Parameter grid used to draw random test spectra (minval is always 1).
GENERATOR_GRID = {
    "maxval": (5.0, 20.0),
    "cutoff": (0.25, 0.75),
    "power": (2.0, 6.0),
}


class Spectrum:
    """Positive scale lengths, stored in descending order.

    Ties keep their input order (stable sort).  The array is read-only.
    """

    __slots__ = ("_sigmas",)

    def __init__(self, sigmas: Sequence[float] | np.ndarray):
        s = np.array(sigmas, dtype=float).ravel()
        if s.size == 0:
            raise InvalidConfig("spectrum must contain at least one scale")
        if not np.all(np.isfinite(s)) or np.any(s <= 0):
            raise InvalidConfig("spectrum scales must be finite and > 0")
        s = s[np.argsort(-s, kind="stable")]
        s.setflags(write=False)
        self._sigmas = s

    @classmethod
    def from_eigenvalues(cls, eigenvalues) -> "Spectrum":
        """Spectrum of a covariance with the given eigenvalues (``sigma = sqrt(lambda)``)."""
        return cls(np.sqrt(np.asarray(eigenvalues, dtype=float)))

    @classmethod
    def from_json(cls, text: str) -> "Spectrum":
        return cls(json.loads(text))

    @property
    def sigmas(self) -> np.ndarray:
        return self._sigmas

    @property
    def dim(self) -> int:
        return self._sigmas.size

    @property
    def sigma1(self) -> float:
        return float(self._sigmas[0])

    @property
    def sigma_min(self) -> float:
        return float(self._sigmas[-1])

    def scaled(self, c: float) -> "Spectrum":
        return Spectrum(self._sigmas * c)

    def to_json(self) -> str:
        return json.dumps([float(v) for v in self._sigmas])

    def __len__(self) -> int:
        return self.dim

    def __repr__(self) -> str:
        return f"Spectrum(dim={self.dim}, sigma1={self.sigma1:.6g}, sigma_min={self.sigma_min:.6g})"


def _as_sigmas(spectrum) -> np.ndarray:
    if isinstance(spectrum, Spectrum):
        return spectrum.sigmas
    return Spectrum(spectrum).sigmas


def kappa(spectrum) -> float:
    """HMC condition number ``(sum (sigma_1/sigma_n)^4)^(1/4)``."""
    s = _as_sigmas(spectrum)
    return float(np.sum((s[0] / s) ** 4) ** 0.25)


def nu(spectrum) -> float:
    """``(sum sigma_n^-4)^(1/4)``; ``kappa == sigma_1 * nu``."""
    s = _as_sigmas(spectrum)
    # factor out sigma_min so the fourth powers cannot overflow
    smin = s[-1]
    return float(np.sum((smin / s) ** 4) ** 0.25 / smin)


def decay_assumption_ratio(spectrum) -> float:
    """``sigma_1 * sum(sigma^-7) * (sum sigma^-4)^(-3/2)``.

    Finite-N diagnostic for the spectral decay hypothesis of the normal limit
    theorem; it should be small.  For any spectrum it is at least ``N**-0.5``
    (equality for a flat spectrum).
    """
    s = _as_sigmas(spectrum)
    x = s[0] / s
    return float(np.sum(x**7) / np.sum(x**4) ** 1.5)


# --------------------------------------------------------------------------
# Spectrum generator


@dataclass(frozen=True)
class GeneratorParams:
    """Parameters of the random-spectrum generator: ``minval, maxval, cutoff, power``."""

    minval: float = 1.0
    maxval: float = 5.0
    cutoff: float = 0.25
    power: float = 2.0

    def __post_init__(self):
        if not (self.minval > 0 and self.maxval > self.minval):
            raise InvalidConfig(f"need 0 < minval < maxval, got {self.minval}, {self.maxval}")
        if not self.cutoff > 0:
            raise InvalidConfig(f"cutoff must be > 0, got {self.cutoff}")
        if not self.power > 0:
            raise InvalidConfig(f"power must be > 0, got {self.power}")


def decay_profile(points, cutoff: float, power: float) -> np.ndarray:
    """``g(y) = 1 / (1 + |y/cutoff|^power)``."""
    y = np.asarray(points, dtype=float)
    return 1.0 / (1.0 + np.abs(y / cutoff) ** power)


def generate_spectrum(points, params: GeneratorParams) -> Spectrum:
    """Rescale ``g(points)`` affinely onto ``[minval, maxval]``.

    The largest ``g`` maps to ``maxval`` and the smallest to ``minval``.
    """
    y = np.asarray(points, dtype=float).ravel()
    if y.size < 2:
        raise DegenerateRange("need at least two points to rescale")
    if not np.all(np.isfinite(y)):
        raise InvalidConfig("points must be finite")
    g = decay_profile(y, params.cutoff, params.power)
    lo, hi = g.min(), g.max()
    if not hi > lo:
        raise DegenerateRange("all g(y) are equal; rescale is undefined")
    s = (g - lo) / (hi - lo) * (params.maxval - params.minval) + params.minval
    # pin the endpoints exactly
    s[np.argmax(g)] = params.maxval
    s[np.argmin(g)] = params.minval
    return Spectrum(s)


def random_spectrum(dim: int, params: GeneratorParams, rng: np.random.Generator) -> Spectrum:
    """Generator applied to ``dim`` i.i.d. ``U(0, 1)`` points."""
    return generate_spectrum(rng.uniform(0.0, 1.0, size=dim), params)


# --------------------------------------------------------------------------
# SPD matrices


def jacobi_eigh(a, *, tol: float = 1e-12, max_sweeps: int = 100):
    """Cyclic Jacobi eigen-decomposition of a symmetric matrix.

    Sweeps rotate away every off-diagonal pair in row order until the
    off-diagonal Frobenius norm drops below ``tol * ||a||_F``.

    Returns:
        ``(eigenvalues, eigenvectors)`` with eigenvalues in descending order and
        eigenvectors as columns.

    Raises:
        NoConvergence: the tolerance was not met within ``max_sweeps`` sweeps.
    """
    A = np.array(a, dtype=float)
    n = A.shape[0]
    V = np.eye(n)
    target = tol * np.linalg.norm(A)
    for _ in range(max_sweeps):
        off = np.sqrt(2.0 * np.sum(np.triu(A, 1) ** 2))
        if off <= target:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = np.copysign(1.0, theta) / (abs(theta) + np.hypot(theta, 1.0))
                c = 1.0 / np.hypot(t, 1.0)
                s = t * c
                rp, rq = A[p, :].copy(), A[q, :].copy()
                A[p, :] = c * rp - s * rq
                A[q, :] = s * rp + c * rq
                cp, cq = A[:, p].copy(), A[:, q].copy()
                A[:, p] = c * cp - s * cq
                A[:, q] = s * cp + c * cq
                A[p, q] = A[q, p] = 0.0
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    else:
        off = np.sqrt(2.0 * np.sum(np.triu(A, 1) ** 2))
        if off > target:
            raise NoConvergence(f"Jacobi did not converge in {max_sweeps} sweeps (off={off:.3e})")
    w = np.diag(A).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], V[:, order]


def _check_square_symmetric(a: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidConfig(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidConfig("matrix has non-finite entries")
    scale = np.max(np.abs(a)) if a.size else 0.0
    if np.max(np.abs(a - a.T), initial=0.0) > SYMMETRY_RTOL * max(scale, 1e-300):
        raise InvalidConfig("matrix is not symmetric")
    return 0.5 * (a + a.T)


def symmetric_eigen(c, *, method: str = "lapack", max_sweeps: int = 100):
    """Eigenvalues (descending) and orthonormal eigenvectors of a symmetric matrix.

    ``method="lapack"`` calls ``numpy.linalg.eigh``; ``method="jacobi"`` uses
    :func:`jacobi_eigh`.
    """
    a = c.array if isinstance(c, SpdMatrix) else _check_square_symmetric(np.asarray(c, dtype=float))
    if method == "jacobi":
        return jacobi_eigh(a, max_sweeps=max_sweeps)
    if method != "lapack":
        raise InvalidConfig(f"unknown eigen method {method!r}")
    w, v = np.linalg.eigh(a)
    return w[::-1].copy(), v[:, ::-1].copy()


def cholesky(c) -> np.ndarray:
    """Lower-triangular ``L`` with positive diagonal and ``L @ L.T == C``."""
    a = c.array if isinstance(c, SpdMatrix) else _check_square_symmetric(np.asarray(c, dtype=float))
    try:
        L = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(f"Cholesky failed: {exc}") from None
    if not np.all(np.diag(L) > 0):
        raise NotPositiveDefinite("Cholesky produced a non-positive pivot")
    return L


class SpdMatrix:
    """Symmetric positive-definite matrix with lazily cached eigen and Cholesky factors.

    Construction checks symmetry (``1e-12`` relative) and, unless
    ``check=False``, that every eigenvalue exceeds ``1e-12 * lambda_max``.
    """

    def __init__(self, entries, *, check: bool = True):
        a = _check_square_symmetric(np.array(entries, dtype=float))
        a.setflags(write=False)
        self._a = a
        if check:
            self._check_pd()

    def _check_pd(self):
        w = self.eigenvalues
        if not (w[0] > 0 and w[-1] > PD_RTOL * w[0]):
            raise NotPositiveDefinite(
                f"smallest eigenvalue {w[-1]:.3e} not above {PD_RTOL:g} * largest {w[0]:.3e}"
            )

    @property
    def array(self) -> np.ndarray:
        return self._a

    @property
    def dim(self) -> int:
        return self._a.shape[0]

    @cached_property
    def _eigh(self):
        w, v = symmetric_eigen(self._a)
        w.setflags(write=False)
        v.setflags(write=False)
        return w, v

    @property
    def eigenvalues(self) -> np.ndarray:
        return self._eigh[0]

    @property
    def eigenvectors(self) -> np.ndarray:
        return self._eigh[1]

    @cached_property
    def cholesky_factor(self) -> np.ndarray:
        L = cholesky(self._a)
        L.setflags(write=False)
        return L

    def spectrum(self) -> Spectrum:
        return Spectrum.from_eigenvalues(self.eigenvalues)

    def __array__(self, dtype=None, copy=None):
        return self._a if dtype is None else self._a.astype(dtype)

    def __repr__(self) -> str:
        return f"SpdMatrix(dim={self.dim})"


def as_spd(c) -> SpdMatrix:
    return c if isinstance(c, SpdMatrix) else SpdMatrix(c)


def kappa_spd(c) -> float:
    """``kappa(C) = sqrt(||C||_2 ||C^-1||_{S^2})``: kappa of ``sqrt(eig(C))``."""
    w = as_spd(c).eigenvalues
    return float(np.sum((w[0] / w) ** 2) ** 0.25)


def schatten_norm(c, r: float) -> float:
    """Vector ``r``-norm of the singular values; ``r=inf`` gives the spectral norm."""
    if not (r >= 1):
        raise InvalidOrder(f"Schatten order must be >= 1 or inf, got {r}")
    if isinstance(c, SpdMatrix):
        sv = c.eigenvalues
    else:
        sv = np.linalg.svd(np.asarray(c, dtype=float), compute_uv=False)
    top = np.max(sv)
    if np.isinf(r) or top == 0:
        return float(top)
    return float(top * np.sum((sv / top) ** r) ** (1.0 / r))


def haar_orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed orthogonal matrix: QR of a Gaussian matrix, signs of ``diag(R)`` folded into Q."""
    z = rng.standard_normal((n, n))
    q, r = np.linalg.qr(z)
    return q * np.sign(np.diag(r))


# --------------------------------------------------------------------------
# Covariance models


class CovarianceModel:
    """Covariance of a centred Gaussian target.

    Either *diagonal* (variances stored in coordinate order) or *dense*
    (an :class:`SpdMatrix`).  Use the ``diagonal``, ``dense`` or ``from_scale``
    constructors.
    """

    def __init__(self, *, variances=None, matrix=None):
        if (variances is None) == (matrix is None):
            raise InvalidConfig("give exactly one of variances or matrix")
        if variances is not None:
            v = np.array(variances, dtype=float).ravel()
            if v.size == 0 or not np.all(np.isfinite(v)) or np.any(v <= 0):
                raise NotPositiveDefinite("variances must be finite and > 0")
            v.setflags(write=False)
            self._var = v
            self._spd = None
        else:
            self._var = None
            self._spd = as_spd(matrix)

    @classmethod
    def diagonal(cls, sigmas) -> "CovarianceModel":
        """Diagonal covariance ``diag(sigma**2)``; a Spectrum keeps its descending order."""
        s = sigmas.sigmas if isinstance(sigmas, Spectrum) else np.asarray(sigmas, dtype=float)
        return cls(variances=s**2)

    @classmethod
    def dense(cls, matrix) -> "CovarianceModel":
        return cls(matrix=matrix)

    @classmethod
    def from_scale(cls, a) -> "CovarianceModel":
        """Covariance ``A @ A.T`` of the scale matrix ``A``."""
        a = np.asarray(a, dtype=float)
        return cls(matrix=a @ a.T)

    @property
    def is_diagonal(self) -> bool:
        return self._var is not None

    @property
    def dim(self) -> int:
        return self._var.size if self.is_diagonal else self._spd.dim

    @cached_property
    def matrix(self) -> np.ndarray:
        return np.diag(self._var) if self.is_diagonal else self._spd.array

    @cached_property
    def spectrum(self) -> Spectrum:
        if self.is_diagonal:
            return Spectrum(np.sqrt(self._var))
        return self._spd.spectrum()

    @cached_property
    def factor(self) -> np.ndarray:
        """``sqrt(variances)`` for diagonal models, the Cholesky factor otherwise."""
        if self.is_diagonal:
            return np.sqrt(self._var)
        return self._spd.cholesky_factor

    @cached_property
    def precision(self) -> np.ndarray:
        """``C^-1`` (a vector of inverse variances for diagonal models)."""
        if self.is_diagonal:
            return 1.0 / self._var
        Linv = np.linalg.inv(self.factor)
        P = Linv.T @ Linv
        return 0.5 * (P + P.T)

    def precision_apply(self, x: np.ndarray) -> np.ndarray:
        """``C^-1 x`` for a vector or a stack of row vectors."""
        if self.is_diagonal:
            return x * self.precision
        return x @ self.precision

    def grad_log_density(self, x: np.ndarray) -> np.ndarray:
        return -self.precision_apply(x)

    def draw(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        """Samples ``L z`` with ``z`` standard normal; rows when ``size`` is given."""
        shape = (self.dim,) if size is None else (size, self.dim)
        z = rng.standard_normal(shape)
        if self.is_diagonal:
            return z * self.factor
        return z @ self.factor.T

    def __repr__(self) -> str:
        kind = "diagonal" if self.is_diagonal else "dense"
        return f"CovarianceModel({kind}, dim={self.dim})"
