"""Command-line interface: ``hmc-kappa <command> ...``.

Exit codes: 0 success, 1 runtime error (one line ``error: <Type>: <message>``
on stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from hmc_kappa.errors import InvalidConfig, KappaError
from hmc_kappa.integrator import IntegrationTimeLaw
from hmc_kappa.lab import (
    ExperimentConfig,
    ExperimentRecord,
    default_out_dir,
    run_experiment,
    versions,
)
from hmc_kappa.randmat import burn_in_plan
from hmc_kappa.sampler import plan_step_size, run_chain, run_chain_exact_gaussian
from hmc_kappa.spectra import (
    CovarianceModel,
    GeneratorParams,
    Spectrum,
    as_spd,
    generate_spectrum,
    kappa,
    nu,
    random_spectrum,
)


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _load_matrix(path: str) -> np.ndarray:
    """JSON nested list, ``.npy`` or whitespace/comma separated text."""
    p = Path(path)
    if p.suffix == ".npy":
        return np.load(p)
    text = p.read_text()
    if text.lstrip().startswith("["):
        return np.array(json.loads(text), dtype=float)
    return np.loadtxt(text.splitlines(), delimiter="," if "," in text else None, ndmin=2)


def _out_dir(args) -> Path:
    return Path(args.out) if args.out else default_out_dir()


def _write_simple(args, name: str, rows: list, config: dict, seed=None) -> None:
    rec = ExperimentRecord(name, "", seed if seed is not None else 0, rows, {}, config)
    rec.config_hash = _hash(config)
    csv_path, _ = rec.write(_out_dir(args))
    print(f"wrote {csv_path}", file=sys.stderr)


def _hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def _experiment(args, config: ExperimentConfig) -> ExperimentRecord:
    rec = run_experiment(config)
    csv_path, man_path = rec.write(_out_dir(args))
    print(json.dumps(rec.summary, indent=2, default=float))
    print(f"wrote {csv_path} and {man_path}", file=sys.stderr)
    return rec


# --------------------------------------------------------------------------
# commands


def cmd_kappa(args) -> int:
    if args.kappa_cmd == "infer":
        return cmd_kappa_infer(args)
    if (args.sigmas is None) == (args.matrix is None):
        raise InvalidConfig("give exactly one of --sigmas or --matrix")
    spec = Spectrum(args.sigmas) if args.sigmas is not None else as_spd(_load_matrix(args.matrix)).spectrum()
    k, n = kappa(spec), nu(spec)
    print(f"kappa={k:.6g} nu={n:.6g}")
    if args.out:
        _write_simple(args, "kappa", [{"N": spec.dim, "kappa": k, "nu": n}], {"command": "kappa", "dim": spec.dim})
    return 0


def cmd_kappa_infer(args) -> int:
    cfg = ExperimentConfig("kappa_inference", dims=args.dims, omegas=args.omegas, targets=args.targets,
                           trials=args.trials, seed=args.seed, workers=args.workers)
    if args.full_grid:
        cfg.trials = max(cfg.trials, 4790 // len(cfg.dims) + 1)
    _experiment(args, cfg)
    return 0


def cmd_spectrum_gen(args) -> int:
    params = GeneratorParams(args.minval, args.maxval, args.cutoff, args.power)
    if args.uniform:
        spec = generate_spectrum(np.arange(1, args.dim + 1) / args.dim, params)
    else:
        spec = random_spectrum(args.dim, params, np.random.Generator(np.random.PCG64(args.seed)))
    print(spec.to_json())
    rows = [{"n": i, "sigma": float(s)} for i, s in enumerate(spec.sigmas)]
    _write_simple(args, "spectrum", rows, {"command": "spectrum gen", **vars_json(args)}, args.seed)
    return 0


def cmd_hmc_run(args) -> int:
    if args.sigmas is not None:
        cov = CovarianceModel.diagonal(Spectrum(args.sigmas))
    elif args.matrix is not None:
        cov = CovarianceModel.dense(_load_matrix(args.matrix))
    else:
        raise InvalidConfig("give --sigmas or --matrix")
    law = IntegrationTimeLaw(args.t_lo, args.t_hi)
    h = args.h if args.h is not None else plan_step_size(cov.spectrum, args.accept, law).h_exact
    if cov.is_diagonal and not args.leapfrog:
        res = run_chain_exact_gaussian(cov.spectrum, h, law, args.samples, args.seed, keep_samples=False)
    else:
        res = run_chain(cov, h, law, args.samples, args.seed, keep_samples=False)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    res.write_delta_csv(out / "hmc_run.csv")
    manifest = {"experiment": "hmc_run", "config": vars_json(args), "seed": args.seed, "rng": res.rng_name,
                "h": h, "accept_rate": res.accept_rate, "mean_accept_prob": res.mean_accept_prob,
                "versions": versions()}
    (out / "hmc_run.manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(json.dumps({"h": h, "accept_rate": res.accept_rate, "mean_accept_prob": res.mean_accept_prob,
                      "leapfrog_steps_total": res.leapfrog_steps_total}))
    return 0


def cmd_wishart_kappa(args) -> int:
    cfg = ExperimentConfig("wishart", dims=args.dims, omegas=args.omegas, trials=args.draws, seed=args.seed,
                           workers=args.workers)
    _experiment(args, cfg)
    return 0


def cmd_burnin_plan(args) -> int:
    N = args.dim
    plan = burn_in_plan(args.kappa0_ratio * N**0.25, N, args.final_ratio * N)
    d = plan.to_dict()
    print(json.dumps(d))
    _write_simple(args, "burnin", [d], {"command": "burnin plan", **vars_json(args)})
    return 0


def cmd_precond_compare(args) -> int:
    params = {"ensembles": args.ensembles} if args.ensembles else {}
    cfg = ExperimentConfig("table1", dims=(args.dim,), trials=args.trials, seed=args.seed, workers=args.workers,
                           params=params)
    _experiment(args, cfg)
    return 0


def cmd_precond_blocks(args) -> int:
    cfg = ExperimentConfig("blocks", dims=(2 * args.blocks,), trials=args.trials, seed=args.seed,
                           params={"rho_max": args.rho_max})
    _experiment(args, cfg)
    return 0


def cmd_lowrank_train(args) -> int:
    cfg = ExperimentConfig("lowrank", dims=(args.dim,), trials=1, seed=args.seed, workers=args.workers,
                           params={"n_large": args.n_large, "rank": args.rank, "mode": args.mode,
                                   "max_iter": args.max_iter})
    _experiment(args, cfg)
    return 0


def vars_json(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func", "out") and not callable(v)}


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output directory (default: $HMC_KAPPA_OUT or ./hmc_kappa_out)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--workers", type=int, default=1)

    p = argparse.ArgumentParser(prog="hmc-kappa", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    k = sub.add_parser("kappa", parents=[common], help="kappa and nu of a spectrum or covariance matrix")
    k.add_argument("--sigmas", type=_floats)
    k.add_argument("--matrix", help="covariance file (.json, .npy or text)")
    k.set_defaults(func=cmd_kappa, kappa_cmd=None)
    ksub = k.add_subparsers(dest="kappa_cmd")
    ki = ksub.add_parser("infer", parents=[common], help="kappa inference experiment")
    ki.add_argument("--dims", type=_ints, default=[256])
    ki.add_argument("--omegas", type=_floats, default=[4, 6, 8, 12, 16, 32])
    ki.add_argument("--targets", type=_floats, default=[0.8])
    ki.add_argument("--trials", type=int, default=100, help="spectra per dimension")
    ki.add_argument("--full-grid", action="store_true", help="run at least 4790 spectra in total")

    sp = sub.add_parser("spectrum", help="spectrum tools")
    spsub = sp.add_subparsers(dest="spectrum_cmd", required=True)
    g = spsub.add_parser("gen", parents=[common], help="generate a spectrum")
    g.add_argument("--dim", type=int, required=True)
    g.add_argument("--minval", type=float, default=1.0)
    g.add_argument("--maxval", type=float, default=5.0)
    g.add_argument("--cutoff", type=float, default=0.25)
    g.add_argument("--power", type=float, default=2.0)
    g.add_argument("--uniform", action="store_true", help="points k/N instead of uniform random draws")
    g.set_defaults(func=cmd_spectrum_gen)

    hp = sub.add_parser("hmc", help="HMC chains")
    hsub = hp.add_subparsers(dest="hmc_cmd", required=True)
    r = hsub.add_parser("run", parents=[common], help="run one chain and write its energy errors")
    r.add_argument("--sigmas", type=_floats)
    r.add_argument("--matrix")
    r.add_argument("--h", type=float, help="step size (default: from --accept)")
    r.add_argument("--accept", type=float, default=0.8)
    r.add_argument("--samples", type=int, default=1000)
    r.add_argument("--t-lo", type=float, default=0.5)
    r.add_argument("--t-hi", type=float, default=1.5)
    r.add_argument("--leapfrog", action="store_true", help="explicit leapfrog even for diagonal targets")
    r.set_defaults(func=cmd_hmc_run)

    wp = sub.add_parser("wishart", help="inverse-Wishart kappa")
    wsub = wp.add_subparsers(dest="wishart_cmd", required=True)
    w = wsub.add_parser("kappa", parents=[common], help="mean kappa vs asymptotics")
    w.add_argument("--dims", type=_ints, default=[16, 64, 256])
    w.add_argument("--omegas", type=_floats, default=[2, 4, 8, 16])
    w.add_argument("--draws", type=int, default=200)
    w.set_defaults(func=cmd_wishart_kappa)

    bp = sub.add_parser("burnin", help="burn-in planning")
    bsub = bp.add_subparsers(dest="burnin_cmd", required=True)
    b = bsub.add_parser("plan", parents=[common], help="recommended burn-in size")
    b.add_argument("--kappa0-ratio", type=float, required=True, help="kappa0 / N^(1/4)")
    b.add_argument("--dim", type=int, required=True)
    b.add_argument("--final-ratio", type=float, required=True, help="Sf / N")
    b.set_defaults(func=cmd_burnin_plan)

    pp = sub.add_parser("precond", help="diagonal preconditioners")
    psub = pp.add_subparsers(dest="precond_cmd", required=True)
    c = psub.add_parser("compare", parents=[common], help="win counts per random ensemble")
    c.add_argument("--dim", type=int, default=100)
    c.add_argument("--trials", type=int, default=200)
    c.add_argument("--ensembles", type=lambda s: s.split(","), default=None,
                   help="subset of wishart,inv_wishart,rs5,rs10,rs20")
    c.set_defaults(func=cmd_precond_compare)
    bl = psub.add_parser("blocks", parents=[common], help="kappas of random 2x2 block models")
    bl.add_argument("--blocks", type=int, default=10)
    bl.add_argument("--trials", type=int, default=1000)
    bl.add_argument("--rho-max", type=float, default=0.99)
    bl.set_defaults(func=cmd_precond_blocks)

    lp = sub.add_parser("lowrank", help="diagonal plus low-rank preconditioning")
    lsub = lp.add_subparsers(dest="lowrank_cmd", required=True)
    lt = lsub.add_parser("train", parents=[common], help="train on circulant low-pass targets")
    lt.add_argument("--dim", type=int, default=128)
    lt.add_argument("--n-large", type=_ints, default=[10, 40])
    lt.add_argument("--rank", type=int, default=20)
    lt.add_argument("--mode", choices=("exact", "monte_carlo"), default="exact")
    lt.add_argument("--max-iter", type=int, default=5000)
    lt.set_defaults(func=cmd_lowrank_train)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (KappaError, ValueError, OSError, ArithmeticError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
