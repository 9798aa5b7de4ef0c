"""Linear preconditioners and how they change kappa.

A nonsingular ``F`` maps ``X ~ N(0, C)`` to ``Z = F^-1 X ~ N(0, F^-1 C F^-T)``;
HMC then runs on ``Z``.  This module builds the preconditioners compared in
the experiments (do nothing, forward-KL and reverse-KL diagonals, sample
Cholesky factors, diagonal plus low rank) and evaluates the resulting kappa.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.linalg import solve_triangular

from hmc_kappa.errors import (
    InvalidConfig,
    NonFinite,
    NotPositiveDefinite,
    SingularPreconditioner,
)
from hmc_kappa.spectra import (
    GeneratorParams,
    Spectrum,
    as_spd,
    decay_profile,
    generate_spectrum,
    haar_orthogonal,
    kappa,
    kappa_spd,
)

KINDS = ("identity", "diagonal", "cholesky", "diag_plus_lowrank")


@dataclass(frozen=True, eq=False)
class PreconditionerSpec:
    """A linear preconditioner ``F``.

    ``diag`` holds ``D`` for the diagonal kinds, ``lower`` the factor for
    ``cholesky`` and ``lowrank`` the ``N x K`` matrix ``U`` of ``F = D + U U^T``.
    """

    kind: str
    dim: int
    diag: np.ndarray | None = None
    lower: np.ndarray | None = None
    lowrank: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidConfig(f"unknown preconditioner kind {self.kind!r}")
        if self.kind in ("diagonal", "diag_plus_lowrank"):
            d = np.asarray(self.diag, dtype=float)
            if d.shape != (self.dim,) or not np.all(d > 0):
                raise SingularPreconditioner("diagonal entries must be > 0")
        if self.kind == "cholesky":
            L = np.asarray(self.lower, dtype=float)
            if L.shape != (self.dim, self.dim) or np.any(np.triu(L, 1) != 0) or not np.all(np.diag(L) > 0):
                raise SingularPreconditioner("Cholesky factor must be lower triangular with positive diagonal")
        if self.kind == "diag_plus_lowrank":
            U = np.asarray(self.lowrank, dtype=float)
            if U.ndim != 2 or U.shape[0] != self.dim:
                raise InvalidConfig(f"low-rank factor must be {self.dim} x K")

    @classmethod
    def identity(cls, dim: int) -> "PreconditionerSpec":
        return cls("identity", dim)

    @classmethod
    def diagonal(cls, d) -> "PreconditionerSpec":
        d = np.asarray(d, dtype=float)
        return cls("diagonal", d.size, diag=d)

    @classmethod
    def cholesky(cls, L) -> "PreconditionerSpec":
        L = np.asarray(L, dtype=float)
        return cls("cholesky", L.shape[0], lower=L)

    @classmethod
    def diag_plus_lowrank(cls, d, U) -> "PreconditionerSpec":
        d = np.asarray(d, dtype=float)
        return cls("diag_plus_lowrank", d.size, diag=d, lowrank=np.asarray(U, dtype=float))

    @property
    def rank(self) -> int:
        return 0 if self.lowrank is None else self.lowrank.shape[1]

    def matrix(self) -> np.ndarray:
        if self.kind == "identity":
            return np.eye(self.dim)
        if self.kind == "diagonal":
            return np.diag(self.diag)
        if self.kind == "cholesky":
            return np.array(self.lower)
        return np.diag(self.diag) + self.lowrank @ self.lowrank.T

    def solve(self, B: np.ndarray) -> np.ndarray:
        """``F^-1 B``."""
        B = np.asarray(B, dtype=float)
        if self.kind == "identity":
            return B.copy()
        if self.kind == "diagonal":
            return B / (self.diag[:, None] if B.ndim == 2 else self.diag)
        if self.kind == "cholesky":
            return solve_triangular(self.lower, B, lower=True)
        F = self.matrix()
        if np.linalg.cond(F) > 1e14:
            raise SingularPreconditioner("F = D + U U^T is numerically singular")
        return np.linalg.solve(F, B)

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "dim": self.dim}
        for name in ("diag", "lower", "lowrank"):
            val = getattr(self, name)
            if val is not None:
                out[name] = np.asarray(val).tolist()
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "PreconditionerSpec":
        arrays = {k: np.asarray(d[k], dtype=float) for k in ("diag", "lower", "lowrank") if k in d}
        return cls(d["kind"], int(d["dim"]), **arrays)

    @classmethod
    def from_json(cls, text: str) -> "PreconditionerSpec":
        return cls.from_dict(json.loads(text))


def precondition_covariance(C, F: PreconditionerSpec) -> np.ndarray:
    """``F^-1 C F^-T``, symmetrised."""
    C = np.asarray(C, dtype=float)
    if F.dim != C.shape[0]:
        raise InvalidConfig(f"preconditioner dim {F.dim} != covariance dim {C.shape[0]}")
    M = F.solve(C)
    M = F.solve(M.T)
    return 0.5 * (M + M.T)


def preconditioned_kappa(C, F: PreconditionerSpec) -> float:
    return kappa_spd(precondition_covariance(C, F))


# --------------------------------------------------------------------------
# KL-optimal diagonals


def forward_kl_diagonal(C) -> PreconditionerSpec:
    """``D_ii = sqrt(C_ii)``: minimiser of ``KL(p || q)`` over ``q = N(0, D^2)``."""
    C = np.asarray(C, dtype=float)
    d = np.diag(C)
    if not np.all(d > 0):
        raise NotPositiveDefinite("covariance has a non-positive diagonal entry")
    return PreconditionerSpec.diagonal(np.sqrt(d))


def reverse_kl_diagonal(C) -> PreconditionerSpec:
    """``D_ii = 1 / sqrt((C^-1)_ii)``: minimiser of ``KL(q || p)`` over ``q = N(0, D^2)``."""
    spd = as_spd(C)
    Linv = solve_triangular(spd.cholesky_factor, np.eye(spd.dim), lower=True)
    prec_diag = np.sum(Linv * Linv, axis=0)  # diag(L^-T L^-1)
    return PreconditionerSpec.diagonal(1.0 / np.sqrt(prec_diag))


def kl_gaussian(lambdas) -> tuple[float, float]:
    """``(sum(l^2 - log l^2), sum(l^-2 - log l^-2))`` for the singular values ``l`` of ``W``.

    Forward and reverse KL between ``N(0, W W^T)`` and the standard normal, up to
    additive and multiplicative constants.  Both are ``>= N`` with equality iff
    every ``l == 1``.
    """
    l2 = np.asarray(lambdas, dtype=float) ** 2
    if np.any(l2 <= 0):
        raise InvalidConfig("singular values must be > 0")
    return float(np.sum(l2 - np.log(l2))), float(np.sum(1.0 / l2 + np.log(l2)))


def kl_direct(W) -> tuple[float, float]:
    """Same quantities from ``||W||_F^2 - log det(W W^T)`` and ``||W^-1||_F^2 - log det((W W^T)^-1)``."""
    W = np.asarray(W, dtype=float)
    logdet = 2.0 * np.linalg.slogdet(W)[1]
    Winv = np.linalg.inv(W)
    return float(np.sum(W * W) - logdet), float(np.sum(Winv * Winv) + logdet)


# --------------------------------------------------------------------------
# correlated 2x2 blocks


@dataclass(frozen=True, eq=False)
class BlockModel:
    """Block-diagonal covariance of blocks ``gamma_n^2 [[1, rho_n], [rho_n, 1]]``."""

    rhos: np.ndarray
    gammas: np.ndarray | None = None

    def __post_init__(self):
        r = np.atleast_1d(np.asarray(self.rhos, dtype=float))
        if r.size == 0 or np.any(r <= 0) or np.any(r >= 1):
            raise InvalidConfig("every rho must lie in (0, 1)")
        g = np.ones_like(r) if self.gammas is None else np.atleast_1d(np.asarray(self.gammas, dtype=float))
        if g.shape != r.shape or np.any(g <= 0):
            raise InvalidConfig("gammas must be positive and match rhos")
        object.__setattr__(self, "rhos", r)
        object.__setattr__(self, "gammas", g)

    @property
    def n_blocks(self) -> int:
        return self.rhos.size

    def covariance(self) -> np.ndarray:
        n = self.n_blocks
        C = np.zeros((2 * n, 2 * n))
        for i, (r, g) in enumerate(zip(self.rhos, self.gammas)):
            C[2 * i:2 * i + 2, 2 * i:2 * i + 2] = g * g * np.array([[1.0, r], [r, 1.0]])
        return C

    def eigenvalues(self) -> np.ndarray:
        g2 = self.gammas**2
        return np.concatenate([g2 * (1 + self.rhos), g2 * (1 - self.rhos)])


class BlockKappas(NamedTuple):
    fwd: float
    rev: float
    opt: float
    nothing: float


def block_kappas(model: BlockModel) -> BlockKappas:
    """Closed-form kappa for the forward-KL, reverse-KL and kappa-optimal block diagonals.

    The KL diagonals do not depend on ``gammas``; neither does the optimum
    (``d_n^2`` proportional to ``gamma_n^2 (1 + rho_n)``).
    """
    r = np.sort(model.rhos)[::-1]
    r1 = r[0]
    pair = ((1 + r1) / (1 + r)) ** 2 + ((1 + r1) / (1 - r)) ** 2
    k4_fwd = np.sum(pair)
    k4_rev = np.sum(((1 - r * r) / (1 - r1 * r1)) ** 2 * pair)
    k4_opt = np.sum(1.0 + ((1 + r) / (1 - r)) ** 2)
    return BlockKappas(
        fwd=float(k4_fwd**0.25),
        rev=float(k4_rev**0.25),
        opt=float(k4_opt**0.25),
        nothing=kappa(Spectrum.from_eigenvalues(model.eigenvalues())),
    )


def block_optimal_diagonal(model: BlockModel) -> PreconditionerSpec:
    d = np.repeat(model.gammas * np.sqrt(1 + model.rhos), 2)
    return PreconditionerSpec.diagonal(d)


# --------------------------------------------------------------------------
# Random ensembles and comparison


def rotated_scale_spectrum(N: int, pct: float, maxval: float = 5.0, power: float = 4.0) -> Spectrum:
    """Generator on ``{1..N}/N`` with ``cutoff = pct/100``: about ``pct`` % of scales sit near ``maxval``."""
    points = np.arange(1, N + 1) / N
    return generate_spectrum(points, GeneratorParams(1.0, maxval, pct / 100.0, power))


def table1_ensembles(kind: str, N: int, seed=0, pct: float | None = None) -> np.ndarray:
    """One random covariance of the comparison ensembles.

    ``wishart``: ``A A^T`` with ``A`` an ``N x 2N`` standard normal matrix.
    ``inv_wishart``: its inverse.  ``rotated_scale``: ``U diag(sigma^2) U^T``
    with ``sigma`` from :func:`rotated_scale_spectrum` and ``U`` Haar orthogonal.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.Generator(np.random.PCG64(seed))
    if kind in ("wishart", "inv_wishart"):
        A = rng.standard_normal((N, 2 * N))
        C = A @ A.T
        if kind == "inv_wishart":
            C = np.linalg.inv(C)
        return 0.5 * (C + C.T)
    if kind == "rotated_scale":
        if pct is None or not 0 < pct < 100:
            raise InvalidConfig(f"rotated_scale needs 0 < pct < 100, got {pct}")
        s = rotated_scale_spectrum(N, pct).sigmas
        U = haar_orthogonal(N, rng)
        C = (U * s**2) @ U.T
        return 0.5 * (C + C.T)
    raise InvalidConfig(f"unknown ensemble {kind!r}")


METHODS = ("nothing", "fwd_kl", "rev_kl")


@dataclass(frozen=True)
class Comparison:
    winner: str
    kappa_nothing: float
    kappa_fwd: float
    kappa_rev: float

    def kappas(self) -> dict:
        return {"nothing": self.kappa_nothing, "fwd_kl": self.kappa_fwd, "rev_kl": self.kappa_rev}


def compare_preconditioners(C) -> Comparison:
    """kappa with no, forward-KL and reverse-KL diagonal preconditioning.

    Ties go to the earlier of ``nothing, fwd_kl, rev_kl``.
    """
    C = np.asarray(C, dtype=float)
    ks = (
        kappa_spd(C),
        preconditioned_kappa(C, forward_kl_diagonal(C)),
        preconditioned_kappa(C, reverse_kl_diagonal(C)),
    )
    best = 0
    for i in (1, 2):
        if ks[i] < ks[best]:
            best = i
    return Comparison(METHODS[best], *ks)


# --------------------------------------------------------------------------
# Diagonal plus low rank


def circulant(first_row) -> np.ndarray:
    c = np.asarray(first_row, dtype=float)
    n = c.size
    idx = (np.arange(n)[None, :] - np.arange(n)[:, None]) % n
    return c[idx]


def circulant_eigenvalues(first_row) -> np.ndarray:
    """Eigenvalues of a circulant matrix with first row ``c``: the DFT of ``c`` (real part, symmetric case)."""
    return np.fft.fft(np.asarray(first_row, dtype=float)).real


def circulant_lowpass(N: int, n_large: int, maxval: float = 5.0, power: float = 8.0):
    """Symmetric circulant covariance ``L L^T`` whose scale profile is a low-pass filter.

    The scales of ``L`` are the generator applied to normalised frequencies
    ``2 min(k, N-k) / N`` with cutoff ``n_large / N``, so about ``n_large``
    low-frequency scales sit near ``maxval`` and the rest near 1.

    Returns ``(C, scales)`` with ``scales[k]`` the scale at frequency ``k``.
    """
    k = np.arange(N)
    y = 2.0 * np.minimum(k, N - k) / N
    g = decay_profile(y, n_large / N, power)
    scales = (g - g.min()) / (g.max() - g.min()) * (maxval - 1.0) + 1.0
    first_row = np.fft.ifft(scales**2).real
    return circulant(first_row), scales


@dataclass
class TrainOptions:
    """Optimizer settings for :func:`train_diag_lowrank`.

    ``mode="exact"`` minimises the closed-form Gaussian reverse KL;
    ``mode="monte_carlo"`` minimises the sample average of
    ``log q(F z) - log p(F z)`` over ``n_mc`` fixed draws ``z ~ N(0, I)``.
    """

    max_iter: int = 5000
    rtol: float = 1e-8
    mode: str = "exact"
    n_mc: int = 2000
    init_scale: float = 0.01
    step0: float = 1.0


@dataclass
class TrainResult:
    preconditioner: PreconditionerSpec
    initial_loss: float
    final_loss: float
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)


class ReverseKL:
    """Reverse KL of ``q = N(0, F F^T)``, ``F = diag(exp(logd)) + U U^T``, from ``p = N(0, C)``.

    ``value_and_grad(logd, U)`` returns the loss and its gradient in
    ``(logd, U)``.  The exact loss is
    ``(tr(C^-1 F F^T) - N - log det(C^-1 F F^T)) / 2``.
    """

    def __init__(self, C, mode: str = "exact", z: np.ndarray | None = None):
        spd = as_spd(C)
        self.dim = spd.dim
        Linv = solve_triangular(spd.cholesky_factor, np.eye(spd.dim), lower=True)
        self.precision = Linv.T @ Linv
        self.logdet_c = 2.0 * float(np.sum(np.log(np.diag(spd.cholesky_factor))))
        if mode not in ("exact", "monte_carlo"):
            raise InvalidConfig(f"unknown mode {mode!r}")
        if mode == "monte_carlo" and z is None:
            raise InvalidConfig("monte_carlo mode needs samples z")
        self.mode = mode
        if z is not None:
            z = np.asarray(z, dtype=float)
            self.second_moment = z.T @ z / z.shape[0]
            self.mean_sq = float(np.trace(self.second_moment))

    def _F(self, logd, U):
        return np.diag(np.exp(logd)) + U @ U.T

    def value_and_grad(self, logd, U):
        F = self._F(logd, U)
        sign, logdet_f = np.linalg.slogdet(F)
        if sign <= 0 or not np.isfinite(logdet_f):
            return math.inf, None, None
        PF = self.precision @ F
        Finv_T = np.linalg.inv(F).T
        if self.mode == "exact":
            value = 0.5 * (np.sum(F * PF) - self.dim + self.logdet_c) - logdet_f
            G = PF - Finv_T
        else:
            M = self.second_moment
            value = 0.5 * (np.sum((F.T @ PF) * M) - self.mean_sq + self.logdet_c) - logdet_f
            G = PF @ M - Finv_T
        grad_logd = np.diag(G) * np.exp(logd)
        grad_U = (G + G.T) @ U
        return float(value), grad_logd, grad_U

    def value(self, logd, U) -> float:
        return self.value_and_grad(logd, U)[0]


def train_diag_lowrank(C_target, rank: int, opt: TrainOptions | None = None, seed=0) -> TrainResult:
    """Fit ``F = D + U U^T`` by minimising ``KL(q || p)`` with ``q`` the pushforward of ``N(0, I)``.

    Gradient descent with backtracking (Armijo) line search; ``D`` is
    parameterised by its logarithm and starts at the reverse-KL diagonal, ``U``
    starts small and random.  Stops when the relative decrease drops below
    ``opt.rtol`` or after ``opt.max_iter`` iterations.

    Raises:
        NonFinite: the objective became non-finite (``exc.trace`` has the losses).
    """
    opt = opt or TrainOptions()
    spd = as_spd(C_target)
    N = spd.dim
    if not 0 <= rank <= N:
        raise InvalidConfig(f"rank must lie in [0, {N}], got {rank}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.Generator(np.random.PCG64(seed))
    z = rng.standard_normal((opt.n_mc, N)) if opt.mode == "monte_carlo" else None
    obj = ReverseKL(spd, opt.mode, z)

    logd = np.log(reverse_kl_diagonal(spd).diag)
    U = opt.init_scale * rng.standard_normal((N, rank))
    loss, gd, gu = obj.value_and_grad(logd, U)
    if not math.isfinite(loss):
        raise NonFinite("initial objective is not finite", [loss])
    initial = loss
    trace = [loss]
    step = opt.step0
    converged = False
    it = 0
    for it in range(1, opt.max_iter + 1):
        g2 = float(np.sum(gd * gd) + np.sum(gu * gu))
        if g2 == 0.0:
            converged = True
            break
        while True:
            nd, nu_ = logd - step * gd, U - step * gu
            new, ngd, ngu = obj.value_and_grad(nd, nu_)
            if math.isfinite(new) and new <= loss - 0.5 * step * g2:
                break
            step *= 0.5
            if step < 1e-20:
                raise NonFinite("line search failed to decrease the objective", trace)
        rel = (loss - new) / max(abs(loss), 1e-300)
        logd, U, loss, gd, gu = nd, nu_, new, ngd, ngu
        trace.append(loss)
        step *= 2.0
        if not math.isfinite(loss):
            raise NonFinite("objective diverged", trace)
        if rel < opt.rtol:
            converged = True
            break
    spec = PreconditionerSpec.diag_plus_lowrank(np.exp(logd), U)
    return TrainResult(spec, initial, loss, it, converged, trace)
