"""Command-line entry point: ``dissrabi <command> [--config FILE] [flags]``.

Every run writes its artifacts plus ``manifest.json`` (full config, version, wall time)
into the output directory.  Exit codes: 0 success, 2 invalid input, 3 solver failure,
4 resource budget exceeded.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, cumulant, liouville, meanfield, metastable, persist, phasespace, scaling, trajectory
from .config import COMMANDS, ConfigError, RunConfig, load
from .errors import ResourceError, SolverError, StepSizeError
from .hilbert import (DOWN, UP, HilbertSpace, meanfield_displacement, number, parity, quadratures,
                      spin_ops, tail_population)

log = logging.getLogger("dissrabi")

EXIT_OK, EXIT_INVALID, EXIT_SOLVER, EXIT_RESOURCE = 0, 2, 3, 4


class _Result:
    def __init__(self, artifacts=None, summary=None, status=EXIT_OK):
        self.artifacts = artifacts or []
        self.summary = summary or {}
        self.status = status


def _opt(cfg: RunConfig, key: str, conv, default):
    raw = cfg.options.get(key)
    if raw is None:
        return default
    try:
        return conv(raw)
    except (TypeError, ValueError):
        raise ConfigError(key, f"invalid value {raw!r}") from None


def _positive(conv):
    def f(v):
        x = conv(v)
        if not x > 0:
            raise ValueError
        return x
    return f


def _floats(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).replace(";", ",").split(",") if v.strip()]


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    t = str(v).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(v)


def _finite(x):
    if isinstance(x, dict):
        return {k: _finite(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_finite(v) for v in x]
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def _cplx(z) -> list:
    return [float(np.real(z)), float(np.imag(z))]


# --- shared steps --------------------------------------------------------------

def _steady(cfg: RunConfig):
    """(space, Liouvillian, steady state, tail population)."""
    if cfg.fock_cutoff is None:
        res = liouville.converged_cutoff(cfg.params)
        return res.space, res.liouvillian, res.steady, res.tail
    space = HilbertSpace(cfg.fock_cutoff)
    L = liouville.build(cfg.params, space)
    rho = liouville.steady_state(L)
    return space, L, rho, tail_population(rho, space)


def _out(cfg: RunConfig, name: str) -> Path:
    return cfg.output_dir / name


# --- commands ------------------------------------------------------------------

def cmd_steady(cfg: RunConfig) -> _Result:
    space, L, rho, tail = _steady(cfg)
    s = spin_ops(space)
    x, p = quadratures(space)
    n = number(space)
    obs = {
        "sz": float(np.real(s["sz"].expect(rho))),
        "x": float(np.real(x.expect(rho))),
        "x2": float(np.real((x @ x).expect(rho))),
        "n": float(np.real(n.expect(rho))),
        "parity": float(np.real(parity(space).expect(rho))),
        "purity": float(np.real(np.trace(rho @ rho))),
    }
    resid = float(np.linalg.norm(L.generator @ liouville.vec(rho)))
    phys = liouville.check_physical(rho)
    np.save(_out(cfg, "steady_state.npy"), rho)
    rho_b = phasespace.partial_trace_mode(rho, space.fock_cutoff)
    a1 = persist.write_csv(_out(cfg, "photon_distribution.csv"), ["n", "probability"],
                           [(k, float(np.real(rho_b[k, k]))) for k in range(space.fock_cutoff)])
    summary = {"fock_cutoff": space.fock_cutoff, "tail_population": tail, "residual": resid,
               "observables": obs, "physical": phys}
    a2 = persist.write_json(_out(cfg, "steady.json"), summary)
    return _Result([_out(cfg, "steady_state.npy"), a1, a2], summary)


def _space_and_L(cfg: RunConfig):
    if cfg.fock_cutoff is None:
        res = liouville.converged_cutoff(cfg.params)
        return res.space, res.liouvillian
    space = HilbertSpace(cfg.fock_cutoff)
    return space, liouville.build(cfg.params, space)


def _eigenvalues(cfg: RunConfig, k: int, method: str):
    space, L = _space_and_L(cfg)
    key = persist.cache_key(cfg.params, space.fock_cutoff, k, method=method)
    cache = persist.SpectrumCache(cfg.cache_dir) if cfg.cache_dir else None
    if cache is not None:
        hit = cache.load(key)
        if hit is not None:
            return space, hit[0], True
    vals = liouville.slow_eigenvalues(L, k=k, method=method)
    if cache is not None:
        cache.store(key, vals, {"params": cfg.params.as_dict(), "N": space.fock_cutoff, "k": k})
    return space, vals, False


def cmd_gap(cfg: RunConfig) -> _Result:
    k = _opt(cfg, "k", _positive(int), 6)
    method = _opt(cfg, "method", str, "auto")
    space, vals, cached = _eigenvalues(cfg, k, method)
    g = liouville.gap_from_spectrum(vals, _opt(cfg, "ratio_threshold", float, 0.2))
    summary = {"delta": g.delta, "lifetime": g.lifetime, "lambda1": _cplx(g.lambda1),
               "metastable_dim": g.metastable_dim, "ratios": g.ratios, "warning": g.warning,
               "fock_cutoff": space.fock_cutoff, "cached": cached}
    a = persist.write_json(_out(cfg, "gap.json"), _finite(summary))
    return _Result([a], summary)


def cmd_spectrum(cfg: RunConfig) -> _Result:
    k = _opt(cfg, "k", _positive(int), 10)
    method = _opt(cfg, "method", str, "auto")
    space, vals, cached = _eigenvalues(cfg, k, method)
    p = cfg.params
    a = persist.write_csv(_out(cfg, "spectrum.csv"),
                          ["lambda_ratio", "Omega_ratio", "gamma", "index", "Re_lambda_i", "Im_lambda_i"],
                          [(p.lambda_ratio, p.Omega / p.omega0, p.gamma, i, v.real, v.imag)
                           for i, v in enumerate(vals)])
    summary = {"fock_cutoff": space.fock_cutoff, "count": len(vals), "cached": cached,
               "eigenvalues": [_cplx(v) for v in vals]}
    return _Result([a], summary)


def cmd_qfunc(cfg: RunConfig) -> _Result:
    space, _, rho, _ = _steady(cfg)
    rho_b = phasespace.partial_trace_mode(rho, space.fock_cutoff)
    xbar = meanfield_displacement(cfg.params)
    h = _opt(cfg, "halfwidth", _positive(float), phasespace.auto_halfwidth(xbar))
    n_grid = _opt(cfg, "grid", _positive(int), 201)
    thr = _opt(cfg, "rel_threshold", float, 0.2)
    grid = phasespace.husimi_q(rho_b, (-h, h), (-h, h), n_grid, n_grid)
    peaks = phasespace.find_peaks(grid, thr)
    arts = list(grid.export(_out(cfg, "qfunc")))
    if _opt(cfg, "log", _bool, False):
        arts += grid.export(_out(cfg, "qfunc_log10"), log=True)
    summary = {"fock_cutoff": space.fock_cutoff, "total": grid.total(), "warnings": grid.warnings,
               "rel_threshold": thr,
               "peaks": [{"x": pk.x, "p": pk.p, "height": pk.height, "plateau": pk.plateau} for pk in peaks]}
    arts.append(persist.write_json(_out(cfg, "qfunc_peaks.json"), summary))
    return _Result(arts, summary)


def _fp_dict(fp: meanfield.FixedPoint) -> dict:
    return {"branch": fp.branch, "physical": fp.physical, "stability": fp.stability,
            "state": dict(zip(("x", "p", "sx", "sy", "sz"), fp.state.array().tolist())),
            "eigenvalues": [_cplx(e) for e in fp.eigenvalues] if fp.physical else None}


def cmd_meanfield(cfg: RunConfig) -> _Result:
    fps = meanfield.fixed_points(cfg.params)
    summary = {"critical_coupling": meanfield.critical_coupling(cfg.params),
               "fixed_points": _finite([_fp_dict(f) for f in fps])}
    arts = [persist.write_csv(_out(cfg, "fixed_points.csv"),
                              ["branch", "physical", "stability", "x", "p", "sx", "sy", "sz", "max_re_eig"],
                              [(f.branch, f.physical, f.stability, *f.state.array(),
                                float(np.max(f.eigenvalues.real)) if f.physical else math.nan) for f in fps])]
    quench = _opt(cfg, "quench", str, None)
    if quench:
        theta = _opt(cfg, "theta", float, math.pi / 7)
        t_max = _opt(cfg, "t_max", _positive(float), 100.0)
        if quench == "np":
            s0 = meanfield.quench_np(cfg.params, _opt(cfg, "r", float, 10.0), theta)
            targets = fps[:1]
        elif quench == "smp":
            if not fps[1].physical:
                raise ConfigError("quench", "smp quench needs lambda above the critical coupling")
            s0 = meanfield.quench_smp(cfg.params, fps[1], theta)
            targets = fps[1:]
        else:
            raise ConfigError("quench", "expected 'np' or 'smp'")
        traj = meanfield.integrate(cfg.params, s0, t_max, tol=_opt(cfg, "tol", _positive(float), 1e-9))
        arts.append(persist.write_csv(_out(cfg, "meanfield_trajectory.csv"), ["t", "x", "p", "sx", "sy", "sz"],
                                      (np.r_[t, y] for t, y in zip(traj.t, traj.y))))
        end = meanfield.settle(traj, targets)
        summary["quench"] = {"kind": quench, "theta": theta, "t_max": t_max,
                             "settled_to": end.branch if end else "unresolved"}
    arts.append(persist.write_json(_out(cfg, "meanfield.json"), summary))
    return _Result(arts, summary)


def cmd_cumulant(cfg: RunConfig) -> _Result:
    order = _opt(cfg, "order", int, 2)
    branch = _opt(cfg, "branch", str, "np")
    fps = meanfield.fixed_points(cfg.params, with_stability=False)
    if branch == "np":
        seed = fps[0].state.array()
    elif branch == "smp":
        if len(fps) < 2 or not fps[1].physical:
            raise ConfigError("branch", "smp branch needs lambda above the critical coupling")
        seed = fps[1].state.array()
    else:
        raise ConfigError("branch", "expected 'np' or 'smp'")
    system = cumulant.build_system(cfg.params, order)
    sol = cumulant.steady_solve(system, seed, raise_on_failure=False)
    summary = {"order": order, "branch": branch, "converged": sol.converged, "residual": sol.residual,
               "iterations": sol.iterations,
               "x_cumulants": sol.x_cumulants(order).tolist(),
               "cumulants": {cumulant.cumulant_name(w): v for w, v in sol.values.items()}}
    eq_path = _out(cfg, "cumulant_system.txt")
    eq_path.write_text(system.to_text() + "\n")
    xc = sol.x_cumulants(order)
    a1 = persist.write_csv(_out(cfg, "x_cumulants.csv"), ["n", "value", "magnitude"],
                           [(n + 1, v, abs(v)) for n, v in enumerate(xc)])
    a2 = persist.write_json(_out(cfg, "cumulants.json"), _finite(summary))
    return _Result([eq_path, a1, a2], summary, EXIT_OK if sol.converged else EXIT_SOLVER)


def cmd_pca(cfg: RunConfig) -> _Result:
    space, L, rho, _ = _steady(cfg)
    dec = metastable.decompose(rho, _opt(cfg, "rank_tolerance", float, 1e-6))
    graph = metastable.similarity_graph(metastable.features(dec, space), _opt(cfg, "threshold", float, 0.3))
    comps = metastable.detect_components(graph, dec, space)
    summary = {"fock_cutoff": space.fock_cutoff, "probabilities": dec.probabilities.tolist(),
               "components": [{"label": c.label, "trace": c.trace, "members": c.members,
                               "mean_x": c.mean_x, "mean_sz": c.mean_sz} for c in comps.components],
               "notes": comps.notes}
    try:
        est = metastable.lifetime_estimate(comps, cfg.params.gamma)
        summary["lifetime_estimate"] = est.t_m
    except ValueError as exc:
        summary["lifetime_estimate"] = None
        summary["notes"].append(str(exc))
    g = liouville.gap(L)
    summary["gap"] = g.delta
    summary["gap_lifetime"] = g.lifetime
    arts = [persist.write_csv(_out(cfg, "p_spectrum.csv"), ["index", "probability"],
                              enumerate(dec.probabilities))]
    if _opt(cfg, "qgrids", _bool, True):
        h = phasespace.auto_halfwidth(meanfield_displacement(cfg.params))
        for i, (c, op) in enumerate(zip(comps.components, comps.operators)):
            rho_b = phasespace.partial_trace_mode(op / c.trace, space.fock_cutoff)
            grid = phasespace.husimi_q(rho_b, (-h, h), (-h, h), 101, 101, coverage_tol=1.0)
            arts += grid.export(_out(cfg, f"component_{i}_{c.label}_q"))
    arts.append(persist.write_json(_out(cfg, "pca.json"), _finite(summary)))
    return _Result(arts, summary)


def cmd_trajectory(cfg: RunConfig) -> _Result:
    space = HilbertSpace(cfg.fock_cutoff or liouville.converged_cutoff(cfg.params).space.fock_cutoff)
    dt = _opt(cfg, "dt", _positive(float), trajectory.default_dt(cfg.params))
    tc = trajectory.TrajectoryConfig(dt=dt, t_max=_opt(cfg, "t_max", _positive(float), 10.0), seed=cfg.seed,
                                     record_stride=_opt(cfg, "stride", _positive(int), 10))
    alpha = _opt(cfg, "alpha", complex, 0j)
    spin = {"down": DOWN, "up": UP}.get(_opt(cfg, "spin", str, "down"))
    if spin is None:
        raise ConfigError("spin", "expected 'up' or 'down'")
    psi0 = phasespace.coherent_state(alpha, space, spin=spin)
    n_traj = _opt(cfg, "n_traj", _positive(int), 1)
    if n_traj == 1:
        rec = trajectory.run(tc, psi0, cfg.params, space)
        a1 = _out(cfg, "trajectory.csv")
        a1.parent.mkdir(parents=True, exist_ok=True)
        rec.to_csv(a1)
        a2 = _out(cfg, "jumps.json")
        a2.write_text(rec.jump_log_json() + "\n")
        summary = {"fock_cutoff": space.fock_cutoff, "dt": dt, "jumps": len(rec.jump_log),
                   "spin_jumps": sum(c == trajectory.SPIN for _, c in rec.jump_log)}
        return _Result([a1, a2], summary)
    ens = trajectory.ensemble(tc, psi0, cfg.params, space, n_traj, threads=cfg.threads)
    a = _out(cfg, "ensemble.csv")
    a.parent.mkdir(parents=True, exist_ok=True)
    ens.to_csv(a)
    return _Result([a], {"fock_cutoff": space.fock_cutoff, "dt": dt, "n_trajectories": n_traj})


def cmd_scan(cfg: RunConfig) -> _Result:
    omegas = _opt(cfg, "omegas", _floats, [20.0, 40.0, 80.0])
    if not omegas or any(o <= 0 for o in omegas):
        raise ConfigError("omegas", "need positive values")
    k = _opt(cfg, "k", _positive(int), 6)
    series = scaling.scan_gap(cfg.params, omegas, lambda_ratio=cfg.params.lambda_ratio, k=k,
                              cache_dir=cfg.cache_dir, threads=cfg.threads)
    rows = [(r, m["Omega"], m["N"], d) for (r, d), m in zip(series.points, series.meta)]
    a1 = persist.write_csv(_out(cfg, "scan.csv"), ["ratio", "Omega", "fock_cutoff", "delta"], rows)
    summary = {"fixed": series.fixed, "points": series.points, "meta": series.meta}
    a2 = persist.write_json(_out(cfg, "scan.json"), summary)
    return _Result([a1, a2], summary)


def cmd_fit(cfg: RunConfig) -> _Result:
    path = _opt(cfg, "input", Path, None)
    if path is None or not path.is_file():
        raise ConfigError("input", "need an existing CSV with 'ratio' and 'delta' columns")
    header, rows = persist.read_csv(path)
    try:
        ir, idl = header.index("ratio"), header.index("delta")
        pts = [(float(r[ir]), float(r[idl])) for r in rows]
    except ValueError:
        raise ConfigError("input", "CSV needs numeric 'ratio' and 'delta' columns") from None
    min_points = _opt(cfg, "min_points", _positive(int), 4)
    if min_points < 3:
        raise ConfigError("min_points", "a quadratic needs at least 3 points")
    fit = scaling.polyfit2(scaling.ScalingSeries(pts), min_points=min_points)
    summary = fit.as_dict()
    if _opt(cfg, "variable", str, "size") == "gamma":
        summary["phase"] = scaling.classify(fit.a, float(fit.stderr[0]), _opt(cfg, "zero_factor", float, 10.0))
    a = persist.write_json(_out(cfg, "fit.json"), _finite(summary))
    return _Result([a], summary)


HANDLERS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}


# --- argument parsing ----------------------------------------------------------

_COMMAND_FLAGS = {
    "gap": [("k", int), ("method", str), ("ratio_threshold", float)],
    "spectrum": [("k", int), ("method", str)],
    "qfunc": [("grid", int), ("halfwidth", float), ("rel_threshold", float), ("log", str)],
    "meanfield": [("quench", str), ("theta", float), ("r", float), ("t_max", float), ("tol", float)],
    "cumulant": [("order", int), ("branch", str)],
    "pca": [("threshold", float), ("rank_tolerance", float), ("qgrids", str)],
    "trajectory": [("dt", float), ("t_max", float), ("stride", int), ("n_traj", int), ("alpha", str),
                   ("spin", str)],
    "scan": [("omegas", str), ("k", int)],
    "fit": [("input", str), ("min_points", int), ("variable", str), ("zero_factor", float)],
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dissrabi", description="Dissipative quantum Rabi model toolkit")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI file with [system], [run] and [<command>] sections")
        g = p.add_argument_group("system")
        for key in ("omega0", "Omega", "lambda_ratio", "kappa", "gamma"):
            g.add_argument(f"--{key.replace('_', '-')}", dest=key, type=str)
        g.add_argument("--fock-cutoff", dest="fock_cutoff", type=str, help="integer or 'auto'")
        r = p.add_argument_group("run")
        r.add_argument("--output-dir", dest="output_dir")
        r.add_argument("--seed", type=str)
        r.add_argument("--cache-dir", dest="cache_dir")
        r.add_argument("--threads", type=str)
        r.add_argument("-v", "--verbose", action="store_true")
        c = p.add_argument_group(name)
        for key, _ in _COMMAND_FLAGS.get(name, []):
            c.add_argument(f"--{key.replace('_', '-')}", dest=key, type=str)
    return ap


def dispatch(cfg: RunConfig) -> int:
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    res = HANDLERS[cfg.command](cfg)
    wall = time.perf_counter() - t0
    man = persist.manifest(cfg.command, cfg.as_dict(), res.artifacts, wall, res.status,
                           {"config_ini": cfg.to_ini(), "summary": _finite(res.summary)})
    persist.write_json(cfg.output_dir / "manifest.json", man)
    return res.status


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    try:
        cfg = load(args.command, args.config, overrides)
        return dispatch(cfg)
    except (ConfigError, StepSizeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SolverError as exc:
        print(f"solver failed: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ResourceError as exc:
        print(f"resource budget exceeded: {exc}", file=sys.stderr)
        return EXIT_RESOURCE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
