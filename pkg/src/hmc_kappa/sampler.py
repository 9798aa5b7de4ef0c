"""HMC on Gaussian targets: step-size laws, chains, tuning and kappa inference.

Two chain implementations share one random stream layout, so for a diagonal
target and equal seeds they produce the same chain:

* :func:`run_chain` integrates with explicit leapfrog steps on any covariance;
* :func:`run_chain_exact_gaussian` uses the per-coordinate closed form and
  costs O(N) per proposal whatever the trajectory length.

Per chain the generator (``numpy.random.PCG64``) is consumed as: initial
standard normal vector (N), then per proposal ``T`` (uniform), momentum (N
standard normals), Metropolis uniform.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

from hmc_kappa.errors import (
    BudgetExhausted,
    InvalidConfig,
    OutOfRange,
    RankDeficient,
    NotPositiveDefinite,
    Unstable,
)
from hmc_kappa.integrator import (
    DEFAULT_LAW,
    IntegrationTimeLaw,
    _leapfrog_arrays,
    leapfrog_rotation_angle,
    sin2_average,
)
from hmc_kappa.spectra import CovarianceModel, Spectrum, SpdMatrix, kappa_spd, nu

RNG_NAME = "PCG64"


def make_rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


# --------------------------------------------------------------------------
# acceptance <-> alpha


def normal_quantile(p):
    """Standard normal quantile ``Phi^-1(p)``."""
    return ndtri(p)


def alpha_for_acceptance(abar: float) -> float:
    """``alpha = 4 Phi^-1(1 - abar/2)^2``: the Delta-variance giving mean acceptance ``abar``."""
    if not (0.0 < abar < 1.0):
        raise OutOfRange(f"target acceptance must lie in (0, 1), got {abar}")
    return float(4.0 * ndtri(1.0 - abar / 2.0) ** 2)


def acceptance_for_alpha(alpha: float) -> float:
    """``E[min(1, exp(-D))] = 2 Phi(-sqrt(alpha)/2)`` for ``D ~ N(alpha/2, alpha)``."""
    if not alpha >= 0:
        raise OutOfRange(f"alpha must be >= 0, got {alpha}")
    return float(2.0 * ndtr(-math.sqrt(alpha) / 2.0))


# --------------------------------------------------------------------------
# step sizes


def _spectrum(obj) -> Spectrum:
    if isinstance(obj, Spectrum):
        return obj
    if isinstance(obj, CovarianceModel):
        return obj.spectrum
    return Spectrum(obj)


def step_size_simple(spectrum, alpha: float) -> float:
    """``((1/alpha) sum (2 sigma_n)^-4 / 2)^(-1/4)``, which equals ``(32 alpha)^(1/4) / nu``."""
    if not alpha > 0:
        raise OutOfRange(f"alpha must be > 0, got {alpha}")
    return float((32.0 * alpha) ** 0.25 / nu(_spectrum(spectrum)))


def step_size_exact(spectrum, alpha: float, law: IntegrationTimeLaw = DEFAULT_LAW) -> float:
    """Step size whose sin^2 weights are averaged over the integration-time law."""
    if not alpha > 0:
        raise OutOfRange(f"alpha must be > 0, got {alpha}")
    spec = _spectrum(spectrum)
    s = spec.sigmas
    law = law.resolve(spec.sigma1)
    w = sin2_average(s, law)
    smin = s[-1]
    # (2 sigma)^-4 scaled by (2 sigma_min)^4 to stay in range
    total = np.sum((smin / s) ** 4 * w)
    return float(2.0 * smin * (alpha / total) ** 0.25)


@dataclass(frozen=True)
class StepSizePlan:
    alpha: float
    h_exact: float
    h_simple: float
    target_accept: float
    fourier_bound: float

    def sandwich(self) -> tuple[float, float]:
        """Bounds on ``h_exact`` implied by the Fourier bound of the time law."""
        c = self.fourier_bound
        return (1.0 + c) ** -0.25 * self.h_simple, (1.0 - c) ** -0.25 * self.h_simple


def plan_step_size(spectrum, target_accept: float, law: IntegrationTimeLaw = DEFAULT_LAW) -> StepSizePlan:
    alpha = alpha_for_acceptance(target_accept)
    return StepSizePlan(
        alpha=alpha,
        h_exact=step_size_exact(spectrum, alpha, law),
        h_simple=step_size_simple(spectrum, alpha),
        target_accept=target_accept,
        fourier_bound=law.fourier_bound(),
    )


# --------------------------------------------------------------------------
# chains


@dataclass
class ChainResult:
    """Output of one HMC chain.

    ``samples[i]`` is the state after proposal ``i``.  ``accept_probs`` holds
    ``min(1, exp(-delta))`` per proposal; ``accept_rate`` is the fraction of
    proposals actually accepted.
    """

    samples: np.ndarray | None
    delta_samples: np.ndarray
    accepted: np.ndarray
    accept_probs: np.ndarray
    steps: np.ndarray
    h: float
    seed: int
    rng_name: str = RNG_NAME
    meta: dict = field(default_factory=dict)

    @property
    def n_proposals(self) -> int:
        return self.delta_samples.size

    @property
    def accept_rate(self) -> float:
        return float(np.mean(self.accepted))

    @property
    def mean_accept_prob(self) -> float:
        return float(np.mean(self.accept_probs))

    @property
    def leapfrog_steps_total(self) -> int:
        return int(np.sum(self.steps))

    def to_dict(self, include_samples: bool = False) -> dict:
        out = {
            "seed": self.seed,
            "rng": self.rng_name,
            "h": self.h,
            "n_proposals": self.n_proposals,
            "accept_rate": self.accept_rate,
            "mean_accept_prob": self.mean_accept_prob,
            "leapfrog_steps_total": self.leapfrog_steps_total,
            "delta_samples": self.delta_samples.tolist(),
            "accepted": self.accepted.astype(int).tolist(),
            "steps": self.steps.tolist(),
            **self.meta,
        }
        if include_samples and self.samples is not None:
            out["samples"] = self.samples.tolist()
        return out

    def to_json(self, include_samples: bool = False) -> str:
        return json.dumps(self.to_dict(include_samples))

    def write_delta_csv(self, path) -> None:
        """Columns ``proposal_index, delta, accepted``."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["proposal_index", "delta", "accepted"])
            for i, (d, a) in enumerate(zip(self.delta_samples, self.accepted)):
                w.writerow([i, f"{d:.17g}", int(a)])


def _check_chain_args(h, n_samples, sigma_min):
    if not h > 0:
        raise InvalidConfig(f"step size must be > 0, got {h}")
    if n_samples < 1:
        raise InvalidConfig(f"n_samples must be >= 1, got {n_samples}")
    if h >= 2.0 * sigma_min:
        raise Unstable(f"h={h:.6g} >= 2*sigma_min={2 * sigma_min:.6g}")


def run_chain(cov: CovarianceModel, h: float, law: IntegrationTimeLaw | None = None,
              n_samples: int = 1000, seed: int = 0, keep_samples: bool = True) -> ChainResult:
    """Metropolis-corrected HMC on ``N(0, C)`` with explicit leapfrog integration.

    The chain starts in equilibrium, refreshes the momentum every proposal and
    integrates for ``ceil(sigma1 T / h)`` steps with ``T`` drawn from ``law``.
    """
    if not isinstance(cov, CovarianceModel):
        cov = CovarianceModel.dense(cov)
    spec = cov.spectrum
    _check_chain_args(h, n_samples, spec.sigma_min)
    law = (law or DEFAULT_LAW).resolve(spec.sigma1)
    rng = make_rng(seed)
    n = cov.dim
    grad = cov.grad_log_density

    x = cov.draw(rng)
    g = grad(x)
    pot = -0.5 * float(np.dot(x, g))

    samples = np.empty((n_samples, n)) if keep_samples else None
    deltas = np.empty(n_samples)
    accepted = np.zeros(n_samples, dtype=bool)
    probs = np.empty(n_samples)
    steps = np.empty(n_samples, dtype=np.int64)
    for i in range(n_samples):
        ell = int(law.steps(law.sample(rng), h))
        xi = rng.standard_normal(n)
        u = rng.uniform()
        x1, xi1 = _leapfrog_arrays(x, xi, h, ell, grad, g)
        g1 = grad(x1)
        pot1 = -0.5 * float(np.dot(x1, g1))
        delta = (pot1 + 0.5 * float(np.dot(xi1, xi1))) - (pot + 0.5 * float(np.dot(xi, xi)))
        deltas[i] = delta
        steps[i] = ell
        probs[i] = math.exp(-delta) if delta > 0 else 1.0
        if u < probs[i]:
            accepted[i] = True
            x, g, pot = x1, g1, pot1
        if keep_samples:
            samples[i] = x
    return ChainResult(samples, deltas, accepted, probs, steps, float(h), seed,
                       meta={"integrator": "leapfrog", "law": [law.lo, law.hi, law.sigma1]})


def run_chain_exact_gaussian(spectrum, h: float, law: IntegrationTimeLaw | None = None,
                             n_samples: int = 1000, seed: int = 0,
                             keep_samples: bool = True) -> ChainResult:
    """Same chain as :func:`run_chain` on ``diag(sigma^2)``, via the closed form."""
    spec = _spectrum(spectrum)
    s = spec.sigmas
    _check_chain_args(h, n_samples, spec.sigma_min)
    law = (law or DEFAULT_LAW).resolve(spec.sigma1)
    rng = make_rng(seed)
    n = s.size

    theta = leapfrog_rotation_angle(s, h)
    eps2 = (h / (2.0 * s)) ** 2
    gs = np.sqrt(1.0 - eps2)
    chi = eps2 * eps2 / (1.0 - eps2)
    sqchi_over_s = np.sqrt(chi) / s
    kin_coef = 0.5 * (eps2 + chi)
    pot_coef = 0.5 * eps2 / s**2
    a12 = s / gs

    x = s * rng.standard_normal(n)
    samples = np.empty((n_samples, n)) if keep_samples else None
    deltas = np.empty(n_samples)
    accepted = np.zeros(n_samples, dtype=bool)
    probs = np.empty(n_samples)
    steps = np.empty(n_samples, dtype=np.int64)
    for i in range(n_samples):
        ell = int(law.steps(law.sample(rng), h))
        xi = rng.standard_normal(n)
        u = rng.uniform()
        phase = ell * theta
        sn, cs = np.sin(phase), np.cos(phase)
        s2 = sn * sn
        delta = float(np.sum(s2 * (kin_coef * xi * xi - pot_coef * x * x) + cs * sn * sqchi_over_s * x * xi))
        deltas[i] = delta
        steps[i] = ell
        probs[i] = math.exp(-delta) if delta > 0 else 1.0
        if u < probs[i]:
            accepted[i] = True
            x = cs * x + a12 * sn * xi
        if keep_samples:
            samples[i] = x
    return ChainResult(samples, deltas, accepted, probs, steps, float(h), seed,
                       meta={"integrator": "closed_form", "law": [law.lo, law.hi, law.sigma1]})


def acceptance_probe(spectrum, h: float, law: IntegrationTimeLaw | None = None,
                     n_proposals: int = 4000, seed: int = 0) -> np.ndarray:
    """Energy errors of independent proposals started in equilibrium.

    Each row draws a fresh ``x ~ N(0, diag(sigma^2))``, momentum and ``T``; the
    law of each ``delta`` equals that of a single proposal of a stationary chain.
    Vectorised over proposals, so it is the cheap pilot used for tuning.
    """
    spec = _spectrum(spectrum)
    s = spec.sigmas
    _check_chain_args(h, n_proposals, spec.sigma_min)
    law = (law or DEFAULT_LAW).resolve(spec.sigma1)
    rng = make_rng(seed)
    theta = leapfrog_rotation_angle(s, h)
    eps2 = (h / (2.0 * s)) ** 2
    chi = eps2 * eps2 / (1.0 - eps2)
    out = np.empty(n_proposals)
    chunk = max(1, 2_000_000 // s.size)
    for start in range(0, n_proposals, chunk):
        m = min(chunk, n_proposals - start)
        ell = law.steps(law.sample(rng, m), h)
        u = rng.standard_normal((m, s.size))  # x / sigma
        v = rng.standard_normal((m, s.size))  # momentum
        phase = ell[:, None] * theta
        sn, cs = np.sin(phase), np.cos(phase)
        d = 0.5 * sn * sn * (eps2 * (v * v - u * u) + chi * v * v) + cs * sn * np.sqrt(chi) * u * v
        out[start:start + m] = d.sum(axis=1)
    return out


def mean_acceptance(deltas) -> float:
    """Average of ``min(1, exp(-delta))``."""
    d = np.asarray(deltas, dtype=float)
    return float(np.mean(np.exp(-np.maximum(d, 0.0))))


def delta_moments(spectrum, h: float, law: IntegrationTimeLaw | None = None) -> dict:
    """Exact mean, variance and skewness of the energy error of one stationary proposal.

    Given the step count ``l`` each coordinate contributes a quadratic form in
    two independent standard normals, so conditional cumulants are available
    in closed form; the law of ``l = ceil(sigma1 T / h)`` is discrete with
    explicit probabilities, and the result is the exact mixture.
    """
    spec = _spectrum(spectrum)
    s = spec.sigmas
    if not (0 < h < 2.0 * spec.sigma_min):
        raise Unstable(f"h={h:.6g} outside (0, 2*sigma_min)")
    law = (law or DEFAULT_LAW).resolve(spec.sigma1)
    a = law.scale * law.lo / h
    b = law.scale * law.hi / h
    ks = np.arange(int(math.ceil(a)), int(math.ceil(b)) + 1)
    p = (np.minimum(ks, b) - np.maximum(ks - 1, a)) / (b - a)
    keep = p > 0
    ks, p = ks[keep], p[keep]

    theta = leapfrog_rotation_angle(s, h)
    eps2 = (h / (2.0 * s)) ** 2
    chi = eps2 * eps2 / (1.0 - eps2)
    phase = ks[:, None] * theta
    sn, cs = np.sin(phase), np.cos(phase)
    A = 0.5 * sn * sn * (eps2 + chi)  # coefficient of xi^2
    B = -0.5 * sn * sn * eps2  # coefficient of (x/sigma)^2
    C = cs * sn * np.sqrt(chi)  # coefficient of (x/sigma) xi
    tr = A + B
    det = A * B - 0.25 * C * C
    m = tr.sum(axis=1)
    v = (2.0 * (A * A + B * B) + C * C).sum(axis=1)
    k3 = (8.0 * (tr**3 - 3.0 * tr * det)).sum(axis=1)
    mean = float(np.sum(p * m))
    dm = m - mean
    var = float(np.sum(p * (v + dm * dm)))
    mu3 = float(np.sum(p * (k3 + 3.0 * v * dm + dm**3)))
    return {"mean": mean, "var": var, "skew": mu3 / var**1.5,
            "steps": ks.tolist(), "step_probs": p.tolist()}


# --------------------------------------------------------------------------
# tuning


@dataclass
class TuneResult:
    h: float
    accept: float
    converged: bool
    evaluations: int
    history: list = field(default_factory=list)


def tune_step_size(target, target_abar: float, law: IntegrationTimeLaw | None = None,
                   budget: int = 30, seed: int = 0, n_pilot: int = 4000,
                   tol: float = 0.01, strict: bool = False) -> TuneResult:
    """Bisect ``log h`` until pilot acceptance is within ``tol`` of ``target_abar``.

    The bracket is ``[h_bar/8, 8 h_bar]`` around the theory step size (clipped
    below the stability limit).  Every pilot reuses ``seed`` so the estimated
    acceptance is a smooth function of ``h``.  Pilots for diagonal targets use
    :func:`acceptance_probe`; dense targets run :func:`run_chain`.

    ``budget`` caps the number of pilot evaluations.  When it runs out the best
    step seen is returned with ``converged=False``, or
    :class:`~hmc_kappa.errors.BudgetExhausted` is raised if ``strict``.
    """
    if not (0.0 < target_abar < 1.0):
        raise OutOfRange(f"target acceptance must lie in (0, 1), got {target_abar}")
    if budget < 1:
        raise InvalidConfig("budget must be >= 1")
    if isinstance(target, CovarianceModel):
        cov = target
    else:
        cov = CovarianceModel.diagonal(_spectrum(target))
    spec = cov.spectrum
    law = (law or DEFAULT_LAW).resolve(spec.sigma1)

    if cov.is_diagonal:
        def pilot(h):
            return mean_acceptance(acceptance_probe(spec, h, law, n_pilot, seed))
    else:
        def pilot(h):
            return run_chain(cov, h, law, n_pilot, seed, keep_samples=False).mean_accept_prob

    h_bar = step_size_simple(spec, alpha_for_acceptance(target_abar))
    h_max = 2.0 * spec.sigma_min * (1.0 - 1e-9)
    hi = min(8.0 * h_bar, h_max)
    lo = min(h_bar / 8.0, hi / 64.0)
    history = []
    best = None
    for k in range(budget):
        h = math.sqrt(lo * hi)
        acc = pilot(h)
        history.append((h, acc))
        if best is None or abs(acc - target_abar) < abs(best[1] - target_abar):
            best = (h, acc)
        if abs(acc - target_abar) <= tol:
            return TuneResult(h, acc, True, k + 1, history)
        if acc > target_abar:
            lo = h
        else:
            hi = h
    if strict:
        raise BudgetExhausted(f"no step size within {tol} of {target_abar} after {budget} pilots",
                              best[0], best[1])
    return TuneResult(best[0], best[1], False, budget, history)


# --------------------------------------------------------------------------
# kappa inference


def infer_kappa(sigma1_hat: float, h: float, abar_hat: float) -> float:
    """``kappa ~ (sigma1/h) 2^(7/4) sqrt(Phi^-1(1 - abar/2))``."""
    if not (sigma1_hat > 0 and h > 0):
        raise OutOfRange("sigma1_hat and h must be > 0")
    if not (0.0 < abar_hat < 1.0):
        raise OutOfRange(f"observed acceptance must lie in (0, 1), got {abar_hat}")
    return float(sigma1_hat / h * 2.0**1.75 * math.sqrt(ndtri(1.0 - abar_hat / 2.0)))


def sample_covariance(samples, center: bool = False) -> SpdMatrix:
    """``(1/S) sum X X^T``; with ``center=True`` the mean is removed and ``S-1`` used."""
    X = np.asarray(samples, dtype=float)
    if X.ndim != 2:
        raise InvalidConfig("samples must be a 2-d array (S, N)")
    S, N = X.shape
    if S < 2 or S < N:
        raise RankDeficient(f"need S >= max(2, N) samples, got S={S}, N={N}")
    if center:
        X = X - X.mean(axis=0)
        C = X.T @ X / (S - 1)
    else:
        C = X.T @ X / S
    try:
        return SpdMatrix(C)
    except NotPositiveDefinite as exc:
        raise RankDeficient(f"sample covariance is singular: {exc}") from None


def plug_in_kappa(samples, center: bool = False) -> float:
    """kappa of the sample covariance."""
    return kappa_spd(sample_covariance(samples, center))


def estimate_sigma1(samples, center: bool = False) -> float:
    """Square root of the largest eigenvalue of the sample covariance."""
    return float(math.sqrt(sample_covariance(samples, center).eigenvalues[0]))
