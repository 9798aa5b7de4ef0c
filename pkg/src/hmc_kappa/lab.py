"""Seeded experiment driver: trials, summaries and CSV/JSON output.

Every experiment takes an :class:`ExperimentConfig`, runs independent trials
(optionally on a process pool) and returns an :class:`ExperimentRecord` with
one row per trial plus summary statistics.  Trial ``i`` of a run with seed
``s`` draws its random numbers from ``PCG64(SeedSequence([s, i]))``, so rows
do not depend on the number of workers or on completion order.

Files written by :meth:`ExperimentRecord.write`:

* ``<experiment>.csv``: header row, one row per trial, floats with 17
  significant digits.  Byte-identical for identical config and seed.
* ``<experiment>.manifest.json``: config, config hash, seed, summary, library
  versions and the (only) timestamp.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np
import scipy

from hmc_kappa.errors import InvalidConfig, ZeroVariance
from hmc_kappa.integrator import IntegrationTimeLaw
from hmc_kappa.precond import (
    BlockModel,
    TrainOptions,
    block_kappas,
    circulant_lowpass,
    compare_preconditioners,
    preconditioned_kappa,
    table1_ensembles,
    train_diag_lowrank,
)
from hmc_kappa.randmat import asymptotic_kappa, burn_in_plan, inverse_wishart_kappa_samples
from hmc_kappa.sampler import (
    estimate_sigma1,
    infer_kappa,
    plug_in_kappa,
    run_chain_exact_gaussian,
    tune_step_size,
)
from hmc_kappa.spectra import GENERATOR_GRID, GeneratorParams, kappa, kappa_spd, random_spectrum

OUT_ENV = "HMC_KAPPA_OUT"
DEFAULT_OUT = "hmc_kappa_out"

# Published winners of the preconditioner comparison, keyed by ensemble label.
TABLE1_WINNERS = {
    "wishart": "fwd_kl",
    "inv_wishart": "fwd_kl",
    "rs5": "fwd_kl",
    "rs10": "rev_kl",
    "rs20": "nothing",
}


def default_out_dir() -> Path:
    return Path(os.environ.get(OUT_ENV, DEFAULT_OUT))


def child_seed(seed: int, index: int) -> int:
    """Seed of trial ``index``: first 64-bit word of ``SeedSequence([seed, index])``."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0])


def trial_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(child_seed(seed, index)))


# --------------------------------------------------------------------------
# config and record


@dataclass
class ExperimentConfig:
    """Inputs of one experiment.  ``params`` holds experiment-specific extras."""

    experiment: str
    dims: tuple = (256,)
    omegas: tuple = (4.0, 6.0, 8.0, 12.0, 16.0, 32.0)
    targets: tuple = (0.8,)
    grid: dict = field(default_factory=lambda: {k: list(v) for k, v in GENERATOR_GRID.items()})
    trials: int = 100
    seed: int = 0
    out_dir: str | None = None
    workers: int = 1
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.omegas = tuple(float(w) for w in self.omegas)
        self.targets = tuple(float(t) for t in self.targets)
        if self.trials < 1 or not self.dims or min(self.dims) < 1 or self.workers < 1:
            raise InvalidConfig("trial counts, dimensions and workers must be >= 1")
        if not self.omegas or not self.targets:
            raise InvalidConfig("need at least one oversampling ratio and one acceptance target")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("out_dir")
        d.pop("workers")
        return d

    def config_hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, default=float)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class ExperimentRecord:
    experiment: str
    config_hash: str
    seed: int
    rows: list
    summary: dict
    config: dict = field(default_factory=dict)

    @property
    def errors(self) -> list:
        return [r for r in self.rows if r.get("error")]

    def column(self, name: str, ok_only: bool = True) -> np.ndarray:
        rows = [r for r in self.rows if not (ok_only and r.get("error"))]
        return np.array([r[name] for r in rows], dtype=float)

    def csv_text(self) -> str:
        return rows_to_csv(self.rows)

    def manifest(self) -> dict:
        return {
            "experiment": self.experiment,
            "config": self.config,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "summary": self.summary,
            "versions": versions(),
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        }

    def write(self, out_dir=None) -> tuple[Path, Path]:
        out = Path(out_dir) if out_dir is not None else default_out_dir()
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / f"{self.experiment}.csv"
        man_path = out / f"{self.experiment}.manifest.json"
        csv_path.write_text(self.csv_text())
        man_path.write_text(json.dumps(self.manifest(), indent=2, default=_json_default) + "\n")
        return csv_path, man_path


def versions() -> dict:
    from hmc_kappa import __version__

    return {"hmc_kappa": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def rows_to_csv(rows: list) -> str:
    """CSV with the union of row keys (first-seen order) as header."""
    cols: list = []
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([format_value(r.get(c)) for c in cols])
    return buf.getvalue()


# --------------------------------------------------------------------------
# statistics


class RSquared(NamedTuple):
    identity: float  # 1 - SS_res/SS_tot against y = x
    fit: float  # R^2 of the least-squares line of y_pred on y_true
    slope: float
    intercept: float


def r_squared(y_true, y_pred) -> RSquared:
    """Coefficient of determination of ``y_pred`` against ``y_true``.

    Raises:
        ZeroVariance: ``y_true`` is constant.
    """
    t = np.asarray(y_true, dtype=float)
    p = np.asarray(y_pred, dtype=float)
    if t.shape != p.shape or t.ndim != 1 or t.size < 2:
        raise InvalidConfig("need two equal-length 1-d arrays with at least 2 entries")
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    if ss_tot == 0.0:
        raise ZeroVariance("y_true has zero variance")
    ident = 1.0 - float(np.sum((p - t) ** 2)) / ss_tot
    slope, intercept = np.polyfit(t, p, 1)
    fit = 1.0 - float(np.sum((p - (slope * t + intercept)) ** 2)) / float(np.sum((p - p.mean()) ** 2)) \
        if np.ptp(p) > 0 else 0.0
    return RSquared(ident, fit, float(slope), float(intercept))


# --------------------------------------------------------------------------
# trial runner


def _run_one(fn, index, seed, kwargs):
    row = {"trial": index, "seed": seed}
    try:
        row.update(fn(trial_rng(seed, index), **kwargs))
        row["error"] = ""
    except Exception as exc:  # recorded per trial, batch continues
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def run_trials(fn: Callable, kwargs_list: list, seed: int, workers: int = 1) -> list:
    """Run ``fn(rng, **kwargs_list[i])`` for every ``i``; rows come back in trial order.

    ``fn`` must be a module-level function when ``workers > 1``.  Exceptions are
    caught and stored in the row's ``error`` column.
    """
    if workers <= 1:
        return [_run_one(fn, i, seed, kw) for i, kw in enumerate(kwargs_list)]
    n = len(kwargs_list)
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one, [fn] * n, range(n), [seed] * n, kwargs_list))


def _record(config: ExperimentConfig, rows: list, summary: dict) -> ExperimentRecord:
    return ExperimentRecord(config.experiment, config.config_hash(), config.seed, rows, summary,
                            config.to_dict())


def _safe_r2(t, p) -> dict:
    try:
        r = r_squared(t, p)
        return {"identity": r.identity, "fit": r.fit}
    except (ZeroVariance, InvalidConfig):
        return {"identity": math.nan, "fit": math.nan}


# --------------------------------------------------------------------------
# kappa inference


def _kappa_trial(rng, N, params, omega, target, law, n_pilot):
    spec = random_spectrum(N, GeneratorParams(1.0, *params), rng)
    chain_seed = int(rng.integers(2**63))
    tune = tune_step_size(spec, target, law, seed=chain_seed, n_pilot=n_pilot)
    S = int(math.ceil(omega * N))
    chain = run_chain_exact_gaussian(spec, tune.h, law, n_samples=S, seed=chain_seed)
    abar = chain.mean_accept_prob
    s1_hat = estimate_sigma1(chain.samples)
    return {
        "N": N, "maxval": params[0], "cutoff": params[1], "power": params[2],
        "omega": omega, "target_accept": target, "h": tune.h, "tune_converged": tune.converged,
        "accept_rate": chain.accept_rate, "mean_accept_prob": abar,
        "kappa_true": kappa(spec), "sigma1": spec.sigma1, "sigma1_hat": s1_hat,
        "kappa_plugin": plug_in_kappa(chain.samples),
        "kappa_inferred_est": infer_kappa(s1_hat, tune.h, abar),
        "kappa_inferred_known": infer_kappa(spec.sigma1, tune.h, abar),
    }


ESTIMATORS = ("kappa_plugin", "kappa_inferred_est", "kappa_inferred_known")


def experiment_kappa_inference(config: ExperimentConfig) -> ExperimentRecord:
    """Tune, sample and estimate kappa three ways on random generator spectra.

    ``config.trials`` spectra are drawn per dimension; generator parameters,
    oversampling ratio and target acceptance are drawn uniformly from their
    grids per trial.  The chain length is ``S = ceil(omega N)``.
    Summary ``r2`` holds identity and best-fit R^2 on raw and log kappa, per
    estimator, overall and per dimension.
    """
    p = config.params
    law = IntegrationTimeLaw(p.get("t_lo", 0.5), p.get("t_hi", 1.5))
    rng = np.random.Generator(np.random.PCG64(config.seed))
    kw = []
    for N in config.dims:
        for _ in range(config.trials):
            params = tuple(float(rng.choice(config.grid[k])) for k in ("maxval", "cutoff", "power"))
            kw.append({"N": N, "params": params, "omega": float(rng.choice(config.omegas)),
                       "target": float(rng.choice(config.targets)), "law": law,
                       "n_pilot": int(p.get("n_pilot", 4000))})
    rows = run_trials(_kappa_trial, kw, config.seed, config.workers)
    ok = [r for r in rows if not r["error"]]

    def r2_block(sel):
        out = {}
        t = np.array([r["kappa_true"] for r in sel])
        for est in ESTIMATORS:
            e = np.array([r[est] for r in sel])
            out[est] = {"raw": _safe_r2(t, e), "log": _safe_r2(np.log(t), np.log(e)),
                        "mean_rel_bias": float(np.mean(e / t - 1.0)) if len(sel) else math.nan}
        return out

    summary = {"n_ok": len(ok), "n_failed": len(rows) - len(ok), "r2": r2_block(ok),
               "by_dim": {str(N): r2_block([r for r in ok if r["N"] == N]) for N in config.dims}}
    return _record(config, rows, summary)


# --------------------------------------------------------------------------
# preconditioner comparison


ENSEMBLES = {
    "wishart": ("wishart", None),
    "inv_wishart": ("inv_wishart", None),
    "rs5": ("rotated_scale", 5.0),
    "rs10": ("rotated_scale", 10.0),
    "rs20": ("rotated_scale", 20.0),
}


def _table1_trial(rng, ensemble, N):
    kind, pct = ENSEMBLES[ensemble]
    C = table1_ensembles(kind, N, rng, pct)
    c = compare_preconditioners(C)
    return {"kind": ensemble, "N": N, "kappa_nothing": c.kappa_nothing, "kappa_fwd": c.kappa_fwd,
            "kappa_rev": c.kappa_rev, "winner": c.winner}


def experiment_table1(config: ExperimentConfig) -> ExperimentRecord:
    """Win counts of no / forward-KL / reverse-KL diagonal preconditioning per ensemble.

    ``config.params["ensembles"]`` selects ensembles (default: all five);
    ``config.dims[0]`` is the dimension.
    """
    ensembles = config.params.get("ensembles", list(ENSEMBLES))
    unknown = set(ensembles) - set(ENSEMBLES)
    if unknown:
        raise InvalidConfig(f"unknown ensembles {sorted(unknown)}")
    N = config.dims[0]
    kw = [{"ensemble": e, "N": N} for e in ensembles for _ in range(config.trials)]
    rows = run_trials(_table1_trial, kw, config.seed, config.workers)
    summary = {}
    for e in ensembles:
        sel = [r for r in rows if not r["error"] and r["kind"] == e]
        counts = {m: sum(r["winner"] == m for r in sel) for m in ("nothing", "fwd_kl", "rev_kl")}
        winner = max(counts, key=lambda m: counts[m]) if sel else None
        summary[e] = {
            "win_pct": {m: 100.0 * c / max(len(sel), 1) for m, c in counts.items()},
            "majority": winner,
            "expected": TABLE1_WINNERS[e],
            "matches": winner == TABLE1_WINNERS[e],
            "mean_best_ratio": float(np.mean([
                min(r["kappa_nothing"], r["kappa_fwd"], r["kappa_rev"]) /
                max(r["kappa_nothing"], r["kappa_fwd"], r["kappa_rev"]) for r in sel])) if sel else math.nan,
        }
    return _record(config, rows, summary)


# --------------------------------------------------------------------------
# inverse Wishart, burn-in, blocks, low rank


def _wishart_trial(rng, N, omega, draws):
    S = int(round(omega * N))
    k = inverse_wishart_kappa_samples(N, S, draws, rng)
    pred = asymptotic_kappa(N, S / N)
    return {"N": N, "S": S, "omega": S / N, "kappa_mean": float(k.mean()), "kappa_sd": float(k.std(ddof=1)),
            "kappa_asymptotic": pred, "rel_error": float(k.mean() / pred - 1.0)}


def experiment_wishart(config: ExperimentConfig) -> ExperimentRecord:
    """Mean inverse-Wishart kappa against the asymptotic formula on a (N, omega) grid."""
    kw = [{"N": N, "omega": w, "draws": config.trials} for N in config.dims for w in config.omegas]
    rows = run_trials(_wishart_trial, kw, config.seed, config.workers)
    errs = [abs(r["rel_error"]) for r in rows if not r["error"]]
    return _record(config, rows, {"max_abs_rel_error": max(errs) if errs else math.nan})


def experiment_burnin(config: ExperimentConfig) -> ExperimentRecord:
    """Burn-in plans for ``params["kappa0_ratios"]`` x ``dims`` x ``params["final_ratios"]``.

    Deterministic; ``kappa0 = ratio * N^(1/4)`` and ``Sf = final_ratio * N``.
    """
    p = config.params
    rows = []
    i = 0
    for ratio in p.get("kappa0_ratios", [10.0]):
        for N in config.dims:
            for fr in p.get("final_ratios", [40.0]):
                row = {"trial": i, "kappa0_ratio": float(ratio), "N": N, "final_ratio": float(fr)}
                try:
                    plan = burn_in_plan(ratio * N**0.25, N, fr * N)
                    row.update(omega_star=plan.omega_star, S_star=plan.S_star, speedup=plan.speedup, error="")
                except Exception as exc:
                    row.update(omega_star=None, S_star=getattr(exc, "s_star", None), speedup=None,
                               error=f"{type(exc).__name__}: {exc}")
                rows.append(row)
                i += 1
    return _record(config, rows, {"n_plans": len(rows)})


def _block_trial(rng, n_blocks, rho_max):
    rhos = rng.uniform(0.0, rho_max, n_blocks)
    k = block_kappas(BlockModel(rhos))
    return {"n_blocks": n_blocks, "rho_1": float(rhos.max()), "rho_mean": float(rhos.mean()),
            "kappa_fwd": k.fwd, "kappa_rev": k.rev, "kappa_opt": k.opt, "kappa_nothing": k.nothing}


def experiment_blocks(config: ExperimentConfig) -> ExperimentRecord:
    """Block-model kappas for random correlation vectors of ``dims[0] // 2`` blocks."""
    n_blocks = max(1, config.dims[0] // 2)
    rho_max = float(config.params.get("rho_max", 0.99))
    rows = run_trials(_block_trial, [{"n_blocks": n_blocks, "rho_max": rho_max}] * config.trials,
                      config.seed, config.workers)
    ok = [r for r in rows if not r["error"]]
    summary = {"ordering_holds": all(r["kappa_opt"] <= r["kappa_fwd"] * (1 + 1e-12) and
                                     r["kappa_fwd"] <= r["kappa_rev"] * (1 + 1e-12) for r in ok)}
    return _record(config, rows, summary)


def _lowrank_trial(rng, N, n_large, rank, mode, max_iter):
    C, _ = circulant_lowpass(N, n_large)
    res = train_diag_lowrank(C, rank, TrainOptions(max_iter=max_iter, mode=mode), rng)
    k0 = kappa_spd(C)
    k1 = preconditioned_kappa(C, res.preconditioner)
    return {"N": N, "n_large": n_large, "rank": rank, "mode": mode, "kappa_before": k0, "kappa_after": k1,
            "reduction": k0 / k1, "initial_loss": res.initial_loss, "final_loss": res.final_loss,
            "iterations": res.iterations, "converged": res.converged}


def experiment_lowrank(config: ExperimentConfig) -> ExperimentRecord:
    """Diagonal plus rank-K training on circulant low-pass targets.

    ``params``: ``n_large`` (list), ``rank``, ``mode``, ``max_iter``; ``dims[0]`` is N.
    """
    p = config.params
    kw = [{"N": config.dims[0], "n_large": int(n), "rank": int(p.get("rank", 20)),
           "mode": p.get("mode", "exact"), "max_iter": int(p.get("max_iter", 5000))}
          for n in p.get("n_large", [10, 40])]
    rows = run_trials(_lowrank_trial, kw, config.seed, config.workers)
    return _record(config, rows, {"reductions": {str(r["n_large"]): r.get("reduction") for r in rows}})


EXPERIMENTS = {
    "kappa_inference": experiment_kappa_inference,
    "table1": experiment_table1,
    "wishart": experiment_wishart,
    "burnin": experiment_burnin,
    "blocks": experiment_blocks,
    "lowrank": experiment_lowrank,
}


def run_experiment(config: ExperimentConfig) -> ExperimentRecord:
    try:
        fn = EXPERIMENTS[config.experiment]
    except KeyError:
        raise InvalidConfig(f"unknown experiment {config.experiment!r}") from None
    return fn(config)
