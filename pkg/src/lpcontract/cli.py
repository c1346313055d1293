"""Command-line entry point: ``lpcontract <subcommand> --config FILE``.

Exit status is 0 on success, 2 for configuration errors and 3 when a
numerical routine failed to converge (partial artifacts are still written).
"""

from __future__ import annotations

import argparse
import dataclasses
import math
import sys
import time
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .config import AUTO, OPERATIONS, ConfigError, ExperimentConfig, as_plain, load_config
from .io import CSV_SCHEMAS, fmt_extended, write_csv, write_json

__all__ = ["main", "run", "build_parser", "build_model"]

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGED = 0, 2, 3


class _Outcome:
    def __init__(self):
        self.artifacts: list[Path] = []
        self.status = EXIT_OK
        self.notes: list[str] = []

    def add(self, path: Path) -> None:
        self.artifacts.append(Path(path))

    def fail(self, note: str) -> None:
        self.status = EXIT_NONCONVERGED
        self.notes.append(note)


def build_model(cfg: ExperimentConfig):
    from . import models

    m, prm = cfg.model, cfg.params
    kind = m["kind"]
    if kind == "overdamped1d":
        return models.overdamped1d(m["potential"], m["theta"], prm)
    if kind == "ornstein_uhlenbeck":
        return models.ornstein_uhlenbeck(m["rate"], m["d"], m["theta"])
    if kind == "linear":
        return models.linear_model(m["A"], None if m["sigma"] == AUTO else m["sigma"])
    if kind == "kinetic_langevin":
        return models.kinetic_langevin(m["potential"], m["gamma"], m["theta"], m["d"], prm)
    if kind == "colored_noise":
        return models.colored_noise(m["potential"], m["A"], m["sigma0"],
                                    None if m["eta_cv"] == AUTO else m["eta_cv"], prm)
    raise ConfigError(f"model kind {kind!r} does not define a diffusion", None, "model", "kind")


def _search_spec(cfg: ExperimentConfig, dim: int):
    from .contraction import SupSearchSpec

    lo, hi, step = cfg.numeric["grid"]
    if dim == 1:
        return SupSearchSpec.grid_1d(lo, hi, step)
    axis = lo + step * np.arange(int(round((hi - lo) / step)) + 1)
    mesh = np.stack(np.meshgrid(*([axis] * dim), indexing="ij"), axis=-1).reshape(-1, dim)
    return SupSearchSpec(points=mesh)


def _linspace(spec) -> np.ndarray:
    lo, hi, n = spec
    return np.linspace(lo, hi, int(n))


# -- operations ------------------------------------------------------------------


def _op_fk_eig(cfg, out: Path, threads: int, res: _Outcome):
    from .fk import NonConvergenceError, build_operator, leading_eigenvalue
    from .models import overdamped1d

    nm = cfg.numeric
    rows = []
    for p in nm["p"]:
        for t2 in nm["theta2"]:
            model = overdamped1d(cfg.model["potential"], math.sqrt(t2), cfg.params)
            op = build_operator(model, p, nm["domain"], nm["dx"], nm["boundary"])
            try:
                r = leading_eigenvalue(op, nm["tol"], nm["method"])
                rows.append((p, t2, r.value, r.value / p, r.converged, r.method, r.residual))
                if not r.converged:
                    res.fail(f"p={p:g} theta2={t2:g}: eigenvalue not finite")
            except NonConvergenceError as exc:
                rows.append((p, t2, math.nan, math.nan, False, nm["method"], exc.residual))
                res.fail(f"p={p:g} theta2={t2:g}: {exc}")
    res.add(write_csv(out / "fk-eig.csv", CSV_SCHEMAS["fk-eig"], rows))
    for r in rows:
        print(f"p={r[0]:g} theta2={r[1]:g} J/p={r[3]:.10g}")


def _op_fk_sweep(cfg, out: Path, threads: int, res: _Outcome):
    from .fk import sweep
    from .heatmap import render_heatmap

    nm = cfg.numeric
    result = sweep(cfg.model["potential"], _linspace(nm["p_range"]), _linspace(nm["theta2_range"]),
                   nm["domain"], nm["dx"], nm["boundary"], nm["tol"], cfg.params, threads)
    res.add(write_csv(out / "fk-sweep.csv", CSV_SCHEMAS["fk-sweep"], list(result.rows())))
    if cfg.output["svg"]:
        res.add(render_heatmap(result, out / "fk-sweep.svg", nm["color_range"],
                               title=f"J(p eta)/p for U = {cfg.model['potential']}"))
    if cfg.output["png"]:
        from .plotting import plot_sweep

        res.add(plot_sweep(result, out / "fk-sweep.png", nm["color_range"]))
    bad = int((~result.converged).sum())
    if bad:
        res.fail(f"{bad} sweep cells did not converge")
    print(f"{result.values.size} cells, min {np.nanmin(result.values):.6g}, max {np.nanmax(result.values):.6g}")


def _op_kappa(cfg, out: Path, threads: int, res: _Outcome):
    from .contraction import estimate_kappa_curve

    nm = cfg.numeric
    model = build_model(cfg)
    curve = estimate_kappa_curve(model, nm["p"], nm["t"], _search_spec(cfg, model.dim), nm["N"], nm["dt"],
                                 nm["seed"], threads, nm["scheme"])
    rows = []
    for (p, t), k in sorted(curve.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        e = k.estimate
        rows.append((t, p, e.value, e.stderr, e.n, e.excluded, k.argmax_x, k.argmax_v, k.edge_warning))
        print(f"t={t:g} p={p:g} kappa={e.value:.6g} +/- {e.stderr:.2g}")
    res.add(write_csv(out / "kappa.csv", CSV_SCHEMAS["kappa"], rows))
    if cfg.output["png"]:
        from .plotting import plot_kappa

        times = sorted({r[0] for r in rows})
        curves = {p: ([curve[(p, t)].estimate.value for t in times], [curve[(p, t)].estimate.stderr for t in times])
                  for p in {r[1] for r in rows}}
        res.add(plot_kappa(times, curves, out / "kappa.png"))


def _op_gp(cfg, out: Path, threads: int, res: _Outcome):
    from .contraction import estimate_Gp

    nm = cfg.numeric
    model = build_model(cfg)
    x = np.asarray(nm["x"], dtype=float)
    if x.size != model.dim:
        raise ConfigError(f"x has {x.size} coordinates, model has {model.dim}", None, "numeric", "x")
    e = estimate_Gp(model, nm["p"], x, nm["t"], nm["N"], nm["dt"], nm["seed"], threads)
    rate = math.log(e.value) / nm["t"] if e.value > 0 else -math.inf
    res.add(write_csv(out / "gp.csv", CSV_SCHEMAS["gp"],
                      [(nm["p"], nm["t"], x, e.value, e.stderr, e.n, e.excluded, e.saturated, rate)]))
    print(f"G_p={e.value:.6g} +/- {e.stderr:.2g}  (1/t) ln G_p={rate:.6g}")


def _op_lyapunov(cfg, out: Path, threads: int, res: _Outcome):
    from .contraction import estimate_lyapunov

    nm = cfg.numeric
    model = build_model(cfg)
    rows = []
    for p in nm["p"]:
        r = estimate_lyapunov(model, p, nm["T"], _search_spec(cfg, model.dim), nm["N"], nm["dt"], nm["seed"],
                              nm["n_checkpoints"], threads)
        e = r.estimate
        rows.append((p, e.value, e.stderr, nm["T"], e.n, e.excluded, r.inconsistent))
        print(f"p={p:g} Lambda={e.value:.6g} +/- {e.stderr:.2g}")
    res.add(write_csv(out / "lyapunov.csv", CSV_SCHEMAS["lyapunov"], rows))


def _coupling_params(cfg, p: float):
    from .coupling import CouplingParams

    m = cfg.model
    if m["kind"] == "coupling_params":
        Q = np.asarray(m["Q"], dtype=float)
        if Q.shape[0] != Q.shape[1]:
            raise ConfigError("Q must be square", None, "model", "Q")
        return CouplingParams.simple(m["rho1"], m["L1"], m["L2"], m["L3"], m["theta"], Q, m["rho2"],
                                     m["S_star"], p, m["n"])
    model = build_model(cfg)
    return CouplingParams.from_model(model.base, p)


def _constants_record(c) -> dict:
    from .coupling import CONSTANT_NAMES

    return {
        "constants": {k: getattr(c, k) for k in CONSTANT_NAMES},
        "extended": {k: fmt_extended(c.extended[k]) for k in CONSTANT_NAMES},
    }


def _op_constants(cfg, out: Path, threads: int, res: _Outcome):
    from .coupling import compute_constants

    nm = cfg.numeric
    params = _coupling_params(cfg, nm["p"])
    c = compute_constants(params, nm["variant"], nm["full_q_norm"], nm["xi"])
    doc = {"variant": c.variant, "xi": c.xi, "p": c.p, **_constants_record(c),
           "invariant_violations": c.check_invariants()}
    res.add(write_json(out / "constants.json", doc))
    print(f"lambda_p={fmt_extended(c.extended['lambdap'])} C_p={fmt_extended(c.extended['Cp'])}")


def _op_couple(cfg, out: Path, threads: int, res: _Outcome):
    from .coupling import fit_decay, simulate_coupling
    from .sde import num_steps

    nm = cfg.numeric
    model = build_model(cfg)
    n = num_steps(nm["T"], nm["dt"])
    k = max(2, nm["n_checkpoints"])
    steps = sorted({int(round(i * n / (k - 1))) for i in range(k)})
    checkpoints = [s * nm["dt"] for s in steps]
    trace = simulate_coupling(model, nm["x0"], nm["x0p"], nm["T"], nm["dt"], nm["N"], nm["seed"], p=nm["p"],
                              xi=nm["xi"], checkpoints=checkpoints, threads=threads)
    rows = [(t, a, b, w, sa, sb, sw) for t, a, b, w, sa, sb, sw in
            zip(trace.times, trace.mean_f_R, trace.mean_g_S, trace.mean_omega, trace.se_f_R, trace.se_g_S,
                trace.se_omega)]
    res.add(write_csv(out / "couple.csv", CSV_SCHEMAS["couple"], rows))
    fit = fit_decay(trace)
    c = trace.constants
    doc = {
        "decay_rate": fit.rate if math.isfinite(fit.rate) else None,
        "decay_rate_stderr": fit.stderr,
        "extinct": fit.extinct,
        "lambda_p": c.lambdap,
        "lambda_p_extended": fmt_extended(c.extended["lambdap"]),
        "rate_minus_lambda_over_se": (fit.rate - c.lambdap) / fit.stderr if fit.stderr > 0 else None,
        "orthogonality_error": trace.orthogonality_error,
        "fallback_steps": trace.fallback_steps,
        "excluded": trace.excluded,
        "n": trace.n,
        **_constants_record(c),
        "xi_sensitivity": _xi_sensitivity(model, nm["p"], nm["xi"]),
    }
    res.add(write_json(out / "couple.json", doc))
    if cfg.output["png"]:
        from .plotting import plot_coupling

        res.add(plot_coupling(trace, out / "couple.png"))
    print(f"decay rate {fit.rate:.6g} +/- {fit.stderr:.2g}; lambda_p = {fmt_extended(c.extended['lambdap'])}")


def _xi_sensitivity(model, p: float, xi: float) -> dict:
    """lambda_p and C_p from the regularized constants at xi and 2 xi."""
    from .coupling import CouplingParams, compute_constants

    params = CouplingParams.from_model(model.base, p)
    out = {}
    for x in (xi, min(2 * xi, 1.0)):
        c = compute_constants(params, xi=x)
        out[_xi_key(x)] = {"lambdap": fmt_extended(c.extended["lambdap"]), "Cp": fmt_extended(c.extended["Cp"])}
    return out


def _xi_key(x: float) -> str:
    return "xi=" + format(x, ".17g")


def _ergodic_averages(model, nm, threads):
    """Means of eta and |x| under the law at time T started from 0, with standard errors."""
    from .sde import simulate_ensemble

    ens = simulate_ensemble(model, np.zeros((1, model.dim)), nm["T"], nm["dt"], nm["N"], nm["seed"],
                            store_x=True, threads=threads)
    x = ens.x[-1, 0][ens.alive[0]]
    eta = np.asarray(model.eta(x), dtype=float)
    ab = np.linalg.norm(x, axis=1)
    se = lambda v: float(v.std(ddof=1) / math.sqrt(v.size))  # noqa: E731
    return float(eta.mean()), se(eta), float(ab.mean()), se(ab)


def _eta_lipschitz(model) -> float:
    """Largest difference quotient of eta along the first coordinate axis of the scan grid."""
    from .models import SCAN_GRID

    pts = np.zeros((SCAN_GRID.size, model.dim))
    pts[:, 0] = SCAN_GRID
    v = np.asarray(model.eta(pts), dtype=float)
    return float(np.max(np.abs(np.diff(v)) / np.diff(SCAN_GRID)))


def _op_certify(cfg, out: Path, threads: int, res: _Outcome):
    from .certificates import certify_rho_prime
    from .coupling import compute_constants

    nm = cfg.numeric
    doc: dict = {}
    C1, lam1 = nm["C1"], nm["lambda1"]
    if AUTO in (C1, lam1):
        if cfg.model["kind"] == "overdamped1d":
            raise ConfigError("C1 and lambda1 must be given for models without a block decomposition",
                              None, "numeric", "C1")
        c = compute_constants(_coupling_params(cfg, 1.0))
        C1 = c.extended["Cp"] if C1 == AUTO else C1
        lam1 = c.extended["lambdap"] if lam1 == AUTO else lam1
    doc["C1"] = fmt_extended(C1)
    doc["lambda1"] = fmt_extended(lam1)
    needs_model = AUTO in (nm["mu_eta"], nm["mu_abs_moment"], nm["L_eta"], nm["sigma_norm"])
    model = build_model(cfg) if needs_model else None
    mu, mu_se, ab, ab_se = (nm["mu_eta"], None, nm["mu_abs_moment"], None)
    if AUTO in (mu, ab):
        m_mu, m_se, m_ab, m_abse = _ergodic_averages(model, nm, threads)
        if mu == AUTO:
            mu, mu_se = m_mu, m_se
        if ab == AUTO:
            ab, ab_se = m_ab, m_abse
    L_eta = _eta_lipschitz(model) if nm["L_eta"] == AUTO else nm["L_eta"]
    sig = float(np.linalg.norm(model.sigma, 2)) if nm["sigma_norm"] == AUTO else nm["sigma_norm"]
    rho = None if nm["rho"] == AUTO else nm["rho"]
    cert = certify_rho_prime(nm["p"], mu, L_eta, C1, lam1, sig, nm["R"], ab, rho)
    doc.update({
        "p": nm["p"], "mu_eta": mu, "mu_eta_stderr": mu_se, "mu_abs_moment": ab, "mu_abs_moment_stderr": ab_se,
        "L_eta": L_eta, "sigma_norm": sig, "R": nm["R"], "rho": rho,
        "A": cert.A, "A_extended": fmt_extended(cert.A_extended),
        "rho_prime": cert.rho_prime, "rho_prime_extended": fmt_extended(cert.rho_prime_extended),
        "contracts": cert.contracts, "rate": cert.rate,
    })
    res.add(write_json(out / "certify.json", doc))
    print(f"rho' = {fmt_extended(cert.rho_prime_extended)}  A = {fmt_extended(cert.A_extended)}  "
          f"contracts = {cert.contracts}")


def _op_kinetic_rate(cfg, out: Path, threads: int, res: _Outcome):
    from .certificates import kinetic_kappa_inf_rate

    nm = cfg.numeric
    rate = kinetic_kappa_inf_rate(nm["gamma"], nm["xi0"])
    res.add(write_json(out / "kinetic-rate.json", {"gamma": nm["gamma"], "xi0": nm["xi0"], "rate": rate}))
    print(f"rate = {rate:.17g}")


def _op_mass_bound(cfg, out: Path, threads: int, res: _Outcome):
    from .certificates import elliptic_mass_bound

    nm = cfg.numeric
    try:
        mb = elliptic_mass_bound(nm["K"], nm["R"], nm["R2"], nm["theta"], nm["d"])
    except ValueError as exc:
        raise ConfigError(str(exc), None, "numeric", "R2") from None
    inputs = {k: nm[k] for k in ("K", "R", "R2", "theta", "d")}
    res.add(write_json(out / "mass-bound.json", {**inputs, "C": mb.C, "eps": mb.eps, "q_bar": mb.q_bar}))
    print(f"C = {mb.C:.17g}  eps = {mb.eps:.17g}  q_bar = {mb.q_bar:.17g}")


RUNNERS: dict[str, Callable] = {
    "fk-eig": _op_fk_eig,
    "fk-sweep": _op_fk_sweep,
    "kappa": _op_kappa,
    "gp": _op_gp,
    "lyapunov": _op_lyapunov,
    "couple": _op_couple,
    "constants": _op_constants,
    "certify": _op_certify,
    "kinetic-rate": _op_kinetic_rate,
    "mass-bound": _op_mass_bound,
}


def run(cfg: ExperimentConfig, out_dir: Path | None = None, threads: int | None = None) -> int:
    """Execute one configured operation, write its artifacts and the manifest; return the exit status."""
    from .fk import NonConvergenceError
    from .parallel import resolve_threads

    out = Path(out_dir if out_dir is not None else cfg.output["dir"])
    cfg = dataclasses.replace(cfg, output={**cfg.output, "dir": str(out)})
    out.mkdir(parents=True, exist_ok=True)
    nthreads = resolve_threads(threads)
    res = _Outcome()
    t0 = time.perf_counter()
    try:
        RUNNERS[cfg.operation](cfg, out, nthreads, res)
    except NonConvergenceError as exc:
        res.fail(str(exc))
    manifest = {
        "tool": "lpcontract",
        "version": __version__,
        "operation": cfg.operation,
        "status": res.status,
        "notes": res.notes,
        "artifacts": [p.name for p in res.artifacts],
        "config": as_plain(cfg),
        "wall_time": round(time.perf_counter() - t0, 3),
    }
    write_json(out / "manifest.json", manifest)
    for note in res.notes:
        print(f"warning: {note}", file=sys.stderr)
    return res.status


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lpcontract", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="operation", required=True, metavar="SUBCOMMAND")
    for op in OPERATIONS:
        p = sub.add_parser(op, help=f"run the {op} operation")
        p.add_argument("--config", required=True, help="INI configuration file")
        p.add_argument("--out", help="output directory (overrides [output] dir)")
        p.add_argument("--seed", type=int, help="random seed (overrides [numeric] seed)")
        p.add_argument("--threads", type=int, help="worker threads (default: LPCONTRACT_THREADS, TOOL_THREADS or 1)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.operation, args.seed)
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        return run(cfg, Path(args.out) if args.out else None, args.threads)
    except ConfigError as exc:
        print(f"{args.config}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        # invalid combinations that only the model builders can detect
        print(f"{args.config}: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
