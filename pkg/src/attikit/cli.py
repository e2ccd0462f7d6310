"""Command-line front end: ``simulate``, ``riccati``, ``verify``, ``montecarlo``.

Exit codes: 0 success, 1 property failure, 2 configuration error, 3 filter
divergence, 4 no convergence of the steady-state covariance.
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys
import time

import numpy as np
import scipy

from . import __version__, checks
from . import config as cfgmod
from . import filters as flt
from .errors import (
    CovarianceNotPD,
    DegenerateEigenvalues,
    DivergenceDetected,
    GainNotPositiveDefinite,
    NoConvergence,
)
from .sensors import NOISE_ALGORITHM, ObservationModel
from .sim import monte_carlo, run_scenario

EXIT_OK, EXIT_PROPERTY, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_NO_CONVERGENCE = 0, 1, 2, 3, 4


def _versions():
    return {
        "attikit": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }


def _out_dir(args, cfg):
    out = args.out or cfg.get("out_dir")
    if not out:
        raise cfgmod.ConfigError("no output directory: pass --out or set 'out_dir'")
    os.makedirs(out, exist_ok=True)
    return out


def _fmt(x):
    return repr(float(x))


def _build(args):
    cfg = cfgmod.load(args.config)
    try:
        sc = cfgmod.scenario(cfg, seed=args.seed)
    except (DegenerateEigenvalues, GainNotPositiveDefinite) as exc:
        raise cfgmod.ConfigError(str(exc)) from None
    return cfg, sc


def cmd_simulate(args):
    cfg, sc = _build(args)
    out = _out_dir(args, cfg)
    try:
        rec = run_scenario(sc)
    except DegenerateEigenvalues as exc:
        raise cfgmod.ConfigError(f"config key 'observations': {exc}") from None
    echo = dict(cfg)
    echo["seed"] = sc.seed
    meta = dict(rec.meta)
    meta.update(config=echo, versions=_versions(), columns=list(rec.columns), rows=len(rec.t))
    rec.to_csv(os.path.join(out, "run.csv"))
    with open(os.path.join(out, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"rows={len(rec.t)}")
    print(f"final_err_angle={_fmt(rec['err_angle'][-1])}")
    b = np.array([rec["bx"][-1], rec["by"][-1], rec["bz"][-1]])
    print(f"final_bias_error={_fmt(np.linalg.norm(b))}")
    print(f"out={out}")
    return EXIT_OK


def _matrix_line(name, m):
    return f"{name}=" + ",".join(_fmt(x) for x in np.asarray(m).ravel())


def cmd_riccati(args):
    cfg = cfgmod.load(args.config)
    model = cfgmod.observation_model(cfg)
    noise = cfgmod.noise_params(cfg)
    if np.any(model.sigmas <= 0):
        raise cfgmod.ConfigError("config key 'observations.*.sigma' must be positive")
    try:
        model.require_observable()
    except DegenerateEigenvalues as exc:
        raise cfgmod.ConfigError(f"config key 'observations': {exc}") from None
    if noise.sigma_omega <= 0 or noise.sigma_b <= 0:
        raise cfgmod.ConfigError("config keys 'filter.noise.*' must be positive for the steady state")
    mekf = ObservationModel.mekf_weighted(model.vectors, model.sigmas)
    ss = flt.riccati_steady_state(mekf, noise)
    res = flt.steady_state_residuals(ss, flt.information_matrix(mekf), noise)
    lines = [_matrix_line("p_a", ss.p_a), _matrix_line("p_c", ss.p_c), _matrix_line("p_b", ss.p_b)]
    for key in ("pa", "pb", "pc", "pc_relation"):
        lines.append(f"residual_{key}={res[key]:.6e}")
    for name, m in (("p_a", ss.p_a), ("p_c", 0.5 * (ss.p_c + ss.p_c.T)), ("p_b", ss.p_b)):
        lam = np.linalg.eigvalsh(m)
        lines.append(f"{name}_eig_min={_fmt(lam[0])}")
        lines.append(f"{name}_eig_max={_fmt(lam[-1])}")
    lines.append(f"p_c_negative_definite={str(bool(np.linalg.eigvalsh(0.5 * (ss.p_c + ss.p_c.T))[-1] < 0)).lower()}")
    print("\n".join(lines))
    return EXIT_OK


def cmd_verify(args):
    t0 = time.perf_counter()
    res = checks.run_suite(args.suite, n=args.n, seed=args.seed or 0)
    print("\n".join(res.lines()))
    print(f"elapsed_s={time.perf_counter() - t0:.3f}")
    return EXIT_OK if res.ok else EXIT_PROPERTY


def cmd_montecarlo(args):
    if args.runs is not None and args.runs < 1:
        raise cfgmod.ConfigError(f"--runs must be at least 1, got {args.runs}")
    cfg, sc = _build(args)
    n, sampler, bias_tol = cfgmod.montecarlo_settings(cfg, args.runs)
    out = _out_dir(args, cfg)
    t0 = time.perf_counter()
    try:
        summary = monte_carlo(sc, n, sampler, bias_tol=bias_tol)
    except DegenerateEigenvalues as exc:
        raise cfgmod.ConfigError(f"config key 'observations': {exc}") from None
    with open(os.path.join(out, "mc_summary.csv"), "w", newline="") as fh:
        fh.write(summary.csv_text())
    med, p95 = summary.settling_stats()
    print(f"runs={summary.n_runs}")
    print(f"convergence_fraction={summary.convergence_fraction:.3f}")
    print(f"settling_median_s={med:.6g}")
    print(f"settling_p95_s={p95:.6g}")
    print(f"median_steady_angle_rad={np.median(summary.steady_angle):.6e}")
    print(f"elapsed_s={time.perf_counter() - t0:.3f}")
    print(f"out={out}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="attikit", description="Attitude filter simulation and verification.")
    p.add_argument("--version", action="version", version=f"attikit {__version__} ({NOISE_ALGORITHM})")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run one scenario, write run.csv and meta.json")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("riccati", help="steady-state MEKF covariance for a config")
    r.add_argument("--config", required=True)
    r.set_defaults(func=cmd_riccati)

    v = sub.add_parser("verify", help="run a seeded property suite")
    v.add_argument("--suite", required=True, choices=sorted(checks.SUITES))
    v.add_argument("--n", type=int)
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_verify)

    m = sub.add_parser("montecarlo", help="seeded batch of runs with random initial errors")
    m.add_argument("--config", required=True)
    m.add_argument("--runs", type=int)
    m.add_argument("--out")
    m.add_argument("--seed", type=int)
    m.set_defaults(func=cmd_montecarlo)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except cfgmod.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceDetected, CovarianceNotPD) as exc:
        print(f"error: filter diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except NoConvergence as exc:
        print(f"error: no convergence: {exc}", file=sys.stderr)
        return EXIT_NO_CONVERGENCE


if __name__ == "__main__":
    sys.exit(main())
