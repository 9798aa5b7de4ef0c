"""Wishart ensembles, the Marcenko-Pastur law and sample-covariance preconditioning.

``Wishart(N, S)`` is the law of ``(1/S) sum_s X_s X_s^T`` for ``S`` standard
normal N-vectors.  With oversampling ratio ``omega = S/N > 1`` the condition
number of an inverse-Wishart matrix satisfies

    kappa / N^(1/4)  ->  (1 + 1/omega)^(1/4) / (1 - omega^(-1/2))

which drives the burn-in planner below.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from hmc_kappa.errors import InvalidConfig, NoRoot, NotPositiveDefinite, OmegaTooSmall, SingularDraw
from hmc_kappa.spectra import CovarianceModel, as_spd, cholesky, kappa_spd

MAX_DRAW_RETRIES = 10


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))


def wishart_sample(N: int, S: int, seed=0) -> np.ndarray:
    """One draw of ``(1/S) sum X X^T``.  Singular (not an error) when ``S < N``."""
    if N < 1 or S < 1:
        raise InvalidConfig(f"need N >= 1 and S >= 1, got N={N}, S={S}")
    X = _rng(seed).standard_normal((S, N))
    W = X.T @ X / S
    return 0.5 * (W + W.T)


def mp_edges(omega: float) -> tuple[float, float]:
    """Support ``[(1 - omega^-1/2)^2, (1 + omega^-1/2)^2]``."""
    r = omega**-0.5
    return (1.0 - r) ** 2, (1.0 + r) ** 2


def mp_density(x, omega: float):
    """Marcenko-Pastur density ``omega/(2 pi x) sqrt((b - x)(x - a))`` on ``[a, b]``, else 0."""
    if not omega > 1:
        raise OmegaTooSmall(f"omega must be > 1, got {omega}")
    a, b = mp_edges(omega)
    x = np.asarray(x, dtype=float)
    inside = (x >= a) & (x <= b)
    safe = np.where(inside, x, 1.0)
    val = omega / (2.0 * np.pi * safe) * np.sqrt(np.clip((b - safe) * (safe - a), 0.0, None))
    out = np.where(inside, val, 0.0)
    return float(out) if out.ndim == 0 else out


def asymptotic_kappa(N: int, omega: float) -> float:
    """``N^(1/4) (1 + 1/omega)^(1/4) / (1 - omega^(-1/2))``."""
    if not omega > 1:
        raise OmegaTooSmall(f"omega must be > 1, got {omega}")
    return N**0.25 * (1.0 + 1.0 / omega) ** 0.25 / (1.0 - omega**-0.5)


def _kappa_of_inverse(eigs: np.ndarray) -> float:
    # kappa(W^-1)^4 = sum(e^2) / e_min^2, W = Wishart with eigenvalues e
    e = np.sort(eigs)
    return float((np.sum((e / e[0]) ** 2)) ** 0.25)


def inverse_wishart_kappa_samples(N: int, S: int, n_draws: int, seed=0) -> np.ndarray:
    """kappa of ``n_draws`` inverse-Wishart(N, S) matrices, from Wishart eigenvalues.

    The inverse is never formed.  Draws whose smallest eigenvalue is not above
    ``1e-12`` times the largest are redrawn (at most 10 times in a row).
    """
    if not S > N:
        raise OmegaTooSmall(f"need S > N, got S={S}, N={N}")
    rng = _rng(seed)
    out = np.empty(n_draws)
    for i in range(n_draws):
        for _ in range(MAX_DRAW_RETRIES):
            e = np.linalg.eigvalsh(wishart_sample(N, S, rng))
            if e[0] > 1e-12 * e[-1]:
                out[i] = _kappa_of_inverse(e)
                break
        else:
            raise SingularDraw(f"{MAX_DRAW_RETRIES} singular Wishart draws in a row")
    return out


def g_N(N: int, S: float) -> float:
    """Asymptotic kappa after preconditioning with ``S`` samples in dimension ``N``."""
    return asymptotic_kappa(N, S / N)


def burn_in_U(omega):
    """``U(w) = 4 (sqrt(w) - 1)^2 (w^2 + w)^(3/4) / (2w + sqrt(w) + 1)``.

    Equals ``-1 / G'(w)`` for ``G(w) = (1 + 1/w)^(1/4) / (1 - w^-1/2)``.
    """
    w = np.asarray(omega, dtype=float)
    r = np.sqrt(w)
    return 4.0 * (r - 1.0) ** 2 * (w * w + w) ** 0.75 / (2.0 * w + r + 1.0)


@dataclass(frozen=True)
class BurnInPlan:
    kappa0: float
    N: int
    Sf: float
    omega_star: float
    S_star: int
    speedup: float

    def to_dict(self) -> dict:
        return asdict(self)


OMEGA_BRACKET = (1.0 + 1e-6, 1e6)


def solve_burn_in_ratio(rhs: float, rtol: float = 1e-10) -> float:
    """Root of ``U(omega) = rhs`` by bisection on ``[1 + 1e-6, 1e6]``."""
    lo, hi = OMEGA_BRACKET
    if not rhs > 0:
        raise NoRoot(f"right-hand side must be > 0, got {rhs}")
    if not (burn_in_U(lo) < rhs < burn_in_U(hi)):
        raise NoRoot(f"U(omega) = {rhs:.6g} has no root in [{lo}, {hi:g}]")
    while hi - lo > rtol * lo:
        mid = 0.5 * (lo + hi)
        if burn_in_U(mid) < rhs:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def speedup(kappa0: float, N: int, S: float, Sf: float) -> float:
    """``Sf kappa0 / (S kappa0 + Sf g_N(S))``."""
    return Sf * kappa0 / (S * kappa0 + Sf * g_N(N, S))


def burn_in_plan(kappa0: float, N: int, Sf: float) -> BurnInPlan:
    """Burn-in size balancing burn-in cost against the faster preconditioned sampling.

    Solves ``U(S/N) = (N^(1/4) / kappa0) (Sf / N)`` and rounds ``S* = ceil(omega* N)``.

    Raises:
        NoRoot: no solution; ``exc.s_star == 0`` (skip preconditioning).
    """
    if N < 1:
        raise InvalidConfig(f"N must be >= 1, got {N}")
    if not Sf > 0:
        raise InvalidConfig(f"Sf must be > 0, got {Sf}")
    if not kappa0 >= N**0.25 * (1 - 1e-12):
        raise InvalidConfig(f"kappa0={kappa0} is below the flat minimum N^(1/4)={N**0.25:.6g}")
    rhs = N**0.25 / kappa0 * (Sf / N)
    omega = solve_burn_in_ratio(rhs)
    s_star = int(math.ceil(omega * N))
    if s_star <= N:
        s_star = N + 1
    return BurnInPlan(kappa0, N, Sf, omega, s_star, speedup(kappa0, N, s_star, Sf))


def preconditioned_kappa_law_check(C_true, S: int, n_trials: int, seed=0):
    """kappa after sample-covariance Cholesky preconditioning vs inverse-Wishart kappa.

    Returns ``(A, B)``: ``A[i]`` is kappa of ``Lhat^-1 C Lhat^-T`` where
    ``Lhat`` is the Cholesky factor of the covariance of ``S`` fresh draws
    from ``N(0, C_true)``; ``B`` holds ``n_trials`` direct inverse-Wishart
    kappa draws.  Both sets should follow the same law.
    """
    cov = C_true if isinstance(C_true, CovarianceModel) else CovarianceModel.dense(C_true)
    C = as_spd(cov.matrix).array
    N = cov.dim
    if not S > N:
        raise OmegaTooSmall(f"need S > N, got S={S}, N={N}")
    seq = np.random.SeedSequence(seed)
    rng_a, rng_b = (np.random.Generator(np.random.PCG64(s)) for s in seq.spawn(2))
    A = np.empty(n_trials)
    for i in range(n_trials):
        for _ in range(MAX_DRAW_RETRIES):
            X = cov.draw(rng_a, S)
            Chat = X.T @ X / S
            try:
                L = cholesky(0.5 * (Chat + Chat.T))
            except NotPositiveDefinite:
                continue
            M = np.linalg.solve(L, C)
            M = np.linalg.solve(L, M.T)
            A[i] = kappa_spd(0.5 * (M + M.T))
            break
        else:
            raise SingularDraw(f"{MAX_DRAW_RETRIES} singular sample covariances in a row")
    B = inverse_wishart_kappa_samples(N, S, n_trials, rng_b)
    return A, B
