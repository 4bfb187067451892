"""Command-line experiment runner.

Every subcommand reads an INI config, writes CSV tables and binary array
dumps under ``--out`` (default ``$LEVIRENORM_OUT`` or ``./runs``) and
finishes with ``manifest.json`` recording the resolved configuration, the
seeds, the artifact hashes and the wall-clock times.

Exit codes: 0 ok, 1 a hard check failed, 2 the configuration is invalid.
"""

from __future__ import annotations

import argparse
import configparser
import datetime as _dt
import json
import os
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from levirenorm import __version__
from levirenorm.coefficients import builtin_field, constant_field, evaluate_frozen
from levirenorm.errors import ConfigError, LeviRenormError
from levirenorm.io import file_hash, text_hash, write_array, write_csv

OUT_ENV = "LEVIRENORM_OUT"
EXIT_OK, EXIT_CHECK, EXIT_CONFIG = 0, 1, 2

# Every recognised key with its default; the manifest snapshot materialises them all.
DEFAULTS: Dict[str, Dict[str, str]] = {
    "run": {"seed": "0", "threads": "1"},
    "field": {"name": "identity", "d": "2", "params": "{}"},
    "kernel": {"n": "64", "N": "2", "lags": "0.01, 0.02, 0.04", "composition_tol": "5e-3", "richardson_min": "1.8",
               "adjoint_tol": "1e-6", "layer_variation": "3.0"},
    "counterterm": {"tags": "gPAM-Xi2, gPAM-d2, phi4_2, phi4_3-cherry, KPZ-cherry",
                    "eps_ladder": "0.2, 0.1, 0.05, 0.025", "points": "0.25", "scheme": "heat",
                    "r2_min": "0.99"},
    "probe": {"tag": "phi4_2", "eps": "0.05", "n": "64", "n_samples": "2000", "scheme": "heat",
              "t": "0.0"},
    "equation": {"equation": "phi4_2", "n": "64", "dt": "0.0009765625", "T": "0.25", "eps": "0.1",
                 "scheme": "heat", "counterterm": "on", "u0": "0.0", "g0": "1.0", "g1": "1.0",
                 "guard": "1e6", "save_every": "4"},
    "sweep": {"eps_ladder": "0.2, 0.1, 0.05", "seeds": "0-9", "norm": "sup", "scale": "0.1",
              "min_success": "8"},
    "compare": {"schemes": "heat, covariant", "eps_ladder": "0.2, 0.1, 0.05", "seeds": "0-9",
                "norm": "sup", "scale": "0.1", "min_success": "8"},
}


# ---------------------------------------------------------------------------
# config parsing

def load_config(path: Optional[str]) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp.read_dict(DEFAULTS)
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"config file {path!r} not found", "config")
        cp.read(path)
    for sec in cp.sections():
        if sec not in DEFAULTS:
            raise ConfigError(f"unknown section [{sec}]", sec)
        for key in cp[sec]:
            if key not in DEFAULTS[sec]:
                raise ConfigError(f"unknown key {key!r}", f"{sec}.{key}")
    return cp


def _get(cp, sec, key, conv=str):
    raw = cp[sec][key]
    try:
        return conv(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"cannot parse {raw!r}: {exc}", f"{sec}.{key}") from None


def _floats(s: str) -> List[float]:
    return [float(v) for v in s.replace(";", ",").split(",") if v.strip()]


def _strs(s: str) -> List[str]:
    return [v.strip() for v in s.split(",") if v.strip()]


def _seeds(s: str) -> List[int]:
    out = []
    for part in _strs(s):
        if "-" in part:
            lo, hi = part.split("-")
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return out


def _positive(vals: Sequence[float], field: str) -> List[float]:
    vals = list(vals)
    if not vals or any(not v > 0 for v in vals):
        raise ConfigError("values must be positive", field)
    return vals


def _eps_ladder(vals: Sequence[float], field: str) -> List[float]:
    vals = _positive(vals, field)
    if any(v >= 0.5 for v in vals):
        raise ConfigError("eps must lie in (0, 1/2)", field)
    return vals


# dimension each counterterm tag lives in
TAG_DIMENSION = {"gPAM-Xi2": 2, "gPAM-d2": 2, "phi4_2": 2, "phi4_3-cherry": 3, "phi4_3-sunset": 3,
                 "KPZ-cherry": 1, "KPZ-log": 1}


def make_field(cp, d: Optional[int] = None):
    name = _get(cp, "field", "name")
    d = _get(cp, "field", "d", int) if d is None else d
    params = _get(cp, "field", "params", json.loads)
    try:
        return builtin_field(name, d=d, **params)
    except KeyError as exc:
        raise ConfigError(str(exc), "field.name") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), "field.params") from None


def apply_flags(cp, args) -> None:
    """Command-line flags override the matching config keys."""
    if args.seed is not None:
        cp["run"]["seed"] = str(args.seed)
        cp["sweep"]["seeds"] = cp["compare"]["seeds"] = str(args.seed)
    if args.threads is not None:
        cp["run"]["threads"] = str(args.threads)
    if args.eps_ladder is not None:
        for sec in ("counterterm", "sweep", "compare"):
            cp[sec]["eps_ladder"] = args.eps_ladder
    if args.scheme is not None:
        for sec in ("counterterm", "probe", "equation"):
            cp[sec]["scheme"] = args.scheme


def snapshot(cp) -> dict:
    return {sec: dict(cp[sec]) for sec in cp.sections()}


# ---------------------------------------------------------------------------
# subcommands; each returns (artifact paths, list of failed checks)

def _lags(cp) -> np.ndarray:
    return np.asarray(_positive(_get(cp, "kernel", "lags", _floats), "kernel.lags"))


def cmd_kernel_build(cp, out: Path):
    from levirenorm.parametrix import build_levi, gamma_truncated

    fld = make_field(cp)
    n, N = _get(cp, "kernel", "n", int), _get(cp, "kernel", "N", int)
    lags = _lags(cp)
    st = build_levi(fld, n, lags, N=N)
    K = gamma_truncated(st, N)
    paths, failed, rows = [], [], []
    for k, (dims, vals) in enumerate(K.factors):
        p = out / f"gamma_factor{k}.bin"
        write_array(p, vals, {"dims": list(dims), "lags": lags.tolist(), "n": n, "N": N, "field": fld.name})
        paths.append(p)
    for p, lag in enumerate(lags):
        row = {"lag": float(lag), "sup": K.sup(p), "exact_rel_err": ""}
        if fld.constant and not fld.has_drift and not fld.has_potential:
            from levirenorm.parametrix import frozen_gaussian, grid_points

            fr = evaluate_frozen(fld, np.zeros(fld.d + 1))
            pts = grid_points(fld.d, n)
            rng = np.random.default_rng(0)
            xi = rng.integers(0, n**fld.d, 64)
            zi = rng.integers(0, n**fld.d, 64)
            got = K.value(lag, 0.0, xi[:, None], zi[None, :])
            ref = frozen_gaussian(fr, pts[xi][:, None, :], lag, pts[zi][None, :, :], 0.0)
            err = float(np.abs(got - ref).max() / np.abs(ref).max())
            row["exact_rel_err"] = err
            if err > 1e-10:
                failed.append(f"constant-coefficient exactness at lag {lag:g}: {err:.3g}")
        rows.append(row)
    p = out / "kernel_build.csv"
    write_csv(p, rows, ["lag", "sup", "exact_rel_err"])
    return paths + [p], failed


def cmd_kernel_verify(cp, out: Path):
    from levirenorm.parametrix import adjoint_budget, adjoint_gamma, adjoint_mismatch, build_levi, \
        composition_order, composition_residual, fit_layer_bounds, gamma_truncated

    fld = make_field(cp)
    n, N = _get(cp, "kernel", "n", int), _get(cp, "kernel", "N", int)
    lags = _lags(cp)
    if lags.size < 2:
        raise ConfigError("need at least two lags", "kernel.lags")
    # times 0 < s1 < s2 < ... so that every (t, sigma, tau) triple is stored
    times = np.concatenate([[0.0], np.cumsum(lags)])
    pairs = np.array([(t, s) for i, t in enumerate(times) for s in times[:i]])
    st = build_levi(fld, n, pairs, N=N)
    K = gamma_truncated(st, N)
    rows, failed = [], []
    tol = _get(cp, "kernel", "composition_tol", float)
    for i in range(2, times.size):
        for j in range(1, i):
            r = composition_residual(K, times[i], times[j], 0.0)
            rows.append({"check": "composition", "t": times[i], "sigma": times[j], "tau": 0.0, "value": r,
                         "tolerance": tol, "ok": r < tol})
    # grid-refinement control: diagonal of the coefficients frozen at the origin (factorises per axis),
    # at lags the coarse grid under-resolves
    fr = evaluate_frozen(fld, np.zeros(fld.d + 1))
    ctrl = constant_field(np.diag(np.diag(fr.A)))
    _, orders = composition_order(ctrl, (16, 32), np.array([(1e-3, 0.0), (2e-3, 0.0), (2e-3, 1e-3)]),
                                  2e-3, 1e-3, 0.0)
    omin = _get(cp, "kernel", "richardson_min", float)
    rows.append({"check": "richardson-order", "t": 2e-3, "sigma": 1e-3, "tau": 0.0, "value": float(orders[0]),
                 "tolerance": omin, "ok": bool(orders[0] >= omin)})
    adj = gamma_truncated(adjoint_gamma(fld, n, pairs, N=N), N)
    mism = adjoint_mismatch(K, adj)
    # exact for constant coefficients; otherwise judged against the truncation + quadrature budget
    if fld.constant:
        atol = np.full(mism.shape, _get(cp, "kernel", "adjoint_tol", float))
    else:
        atol = adjoint_budget(K, adj, _get(cp, "kernel", "composition_tol", float))
    for (t, s), m, tol_p in zip(pairs, mism, atol):
        rows.append({"check": "adjoint", "t": t, "sigma": "", "tau": s, "value": float(m), "tolerance": tol_p,
                     "ok": bool(m < tol_p)})
    if N >= 2 and all(st.Z[nu].sup() > 0 for nu in range(1, N + 1)):
        _, _, norm = fit_layer_bounds(st)
        vals = np.array(list(norm.values()))
        var = float(vals.max() / vals.min())
        vtol = _get(cp, "kernel", "layer_variation", float)
        rows.append({"check": "layer-bound-variation", "t": "", "sigma": "", "tau": "", "value": var,
                     "tolerance": vtol, "ok": var < vtol})
    for r in rows:
        if not r["ok"]:
            failed.append(f"{r['check']} value {r['value']:.3g} outside tolerance {r['tolerance']:g}")
    p = out / "kernel_verify.csv"
    write_csv(p, rows, ["check", "t", "sigma", "tau", "value", "tolerance", "ok"])
    return [p], failed


def _points(cp, d: int) -> np.ndarray:
    xs = _get(cp, "counterterm", "points", _floats)
    return np.array([[x] * d for x in xs])


def cmd_counterterm_table(cp, out: Path):
    from levirenorm.renorm import CountertermFunction

    ladder = _eps_ladder(_get(cp, "counterterm", "eps_ladder", _floats), "counterterm.eps_ladder")
    if len(ladder) < 2:
        raise ConfigError("need at least two rungs", "counterterm.eps_ladder")
    scheme = _get(cp, "counterterm", "scheme")
    r2_min = _get(cp, "counterterm", "r2_min", float)
    rows, failed = [], []
    for tag in _get(cp, "counterterm", "tags", _strs):
        if tag not in TAG_DIMENSION:
            raise ConfigError(f"unknown tag {tag!r}", "counterterm.tags")
        fld = make_field(cp, TAG_DIMENSION[tag])
        try:
            cf = CountertermFunction(tag, fld, scheme=scheme)
        except ValueError as exc:
            raise ConfigError(str(exc), "counterterm.tags") from None
        for x in _points(cp, fld.d):
            vals, fit = cf.ladder(x, 0.0, ladder)
            for e, v in zip(ladder, vals):
                rows.append({"tag": tag, "scheme": scheme, "x": " ".join(f"{c:g}" for c in x), "eps": e,
                             "value": v.total, "slope": fit.slope, "intercept": fit.intercept,
                             "fit_R2": fit.r2, "coordinate": fit.coordinate,
                             "C": evaluate_frozen(fld, np.append(x, 0.0)).C})
            if np.isfinite(fit.r2) and fit.r2 <= r2_min:
                failed.append(f"{tag} at x={x.tolist()}: R2 {fit.r2:.4f} <= {r2_min}")
    p = out / "counterterm_table.csv"
    write_csv(p, rows, ["tag", "scheme", "x", "eps", "value", "slope", "intercept", "fit_R2", "coordinate", "C"])
    return [p], failed


def cmd_probe(cp, out: Path):
    from levirenorm.renorm import mc_variance_probe

    fld = make_field(cp)
    eps = _eps_ladder([_get(cp, "probe", "eps", float)], "probe.eps")[0]
    tab = mc_variance_probe(_get(cp, "probe", "tag"), eps, fld, scheme=_get(cp, "probe", "scheme"),
                            n_samples=_get(cp, "probe", "n_samples", int), n=_get(cp, "probe", "n", int),
                            seed=_get(cp, "run", "seed", int), t=_get(cp, "probe", "t", float))
    ref = np.broadcast_to(np.nan if tab.reference is None else tab.reference, tab.estimate.shape)
    rows = [{"tag": tab.tag, "eps": tab.eps, "x": " ".join(f"{c:g}" for c in pt), "estimate": float(est),
             "stderr": float(se), "C": float(c), "reference": float(r),
             "n_samples": tab.n_samples}
            for pt, est, se, c, r in zip(tab.points, tab.estimate, tab.stderr, tab.C, ref)]
    p = out / "probe.csv"
    write_csv(p, rows, ["tag", "eps", "x", "estimate", "stderr", "C", "reference", "n_samples"])
    return [p], []


def make_equation(cp):
    from levirenorm.simulate import EquationConfig

    sec = "equation"
    ct = _get(cp, sec, "counterterm")
    if ct not in ("on", "off"):
        try:
            ct = {k: float(v) for k, v in json.loads(ct).items()}
        except (ValueError, AttributeError):
            raise ConfigError("must be 'on', 'off' or a JSON object of constants", "equation.counterterm") from None
    kw = dict(equation=_get(cp, sec, "equation"), field=make_field(cp), n=_get(cp, sec, "n", int),
              dt=_get(cp, sec, "dt", float), T=_get(cp, sec, "T", float), eps=_get(cp, sec, "eps", float),
              scheme=_get(cp, sec, "scheme"), counterterm=ct, seed=_get(cp, "run", "seed", int),
              u0=_get(cp, sec, "u0", float), g0=_get(cp, sec, "g0", float), g1=_get(cp, sec, "g1", float),
              guard=_get(cp, sec, "guard", float), save_every=_get(cp, sec, "save_every", int))
    try:
        return EquationConfig(**kw)
    except ConfigError as exc:
        raise ConfigError(str(exc).split(": ", 1)[-1], f"equation.{exc.field}") from None


def cmd_simulate(cp, out: Path):
    from levirenorm.simulate import solve

    cfg = make_equation(cp)
    tr = solve(cfg)
    p1 = out / "trajectory.bin"
    write_array(p1, tr.u, {"times": tr.times.tolist(), "config": cfg.snapshot(), "blowup": tr.blowup})
    rows = [{"t": float(t), "sup": float(s), "energy": float(e)} for t, s, e in zip(tr.times, tr.sup, tr.energy)]
    p2 = out / "diagnostics.csv"
    write_csv(p2, rows, ["t", "sup", "energy"])
    failed = [f"blow-up at t = {tr.blowup_time:g}"] if tr.blowup else []
    return [p1, p2], failed


def cmd_sweep(cp, out: Path):
    from levirenorm.simulate import epsilon_sweep

    cfg = make_equation(cp)
    ladder = _eps_ladder(_get(cp, "sweep", "eps_ladder", _floats), "sweep.eps_ladder")
    tab = epsilon_sweep(cfg, ladder, _get(cp, "sweep", "seeds", _seeds), norm=_get(cp, "sweep", "norm"),
                        scale=_get(cp, "sweep", "scale", float), workers=_get(cp, "run", "threads", int))
    p = out / "cauchy_table.csv"
    write_csv(p, tab.rows(), ["seed", "eps_coarse", "eps_fine", "distance", "norm", "decreasing"])
    need = _get(cp, "sweep", "min_success", int)
    failed = [] if tab.n_success >= need else [f"{tab.n_success} of {len(tab.seeds)} seeds decreasing"]
    return [p], failed


def cmd_compare(cp, out: Path):
    from levirenorm.simulate import mollifier_comparison

    cfg = make_equation(cp)
    ladder = _eps_ladder(_get(cp, "compare", "eps_ladder", _floats), "compare.eps_ladder")
    schemes = _get(cp, "compare", "schemes", _strs)
    if len(schemes) != 2:
        raise ConfigError("list exactly two schemes", "compare.schemes")
    tab = mollifier_comparison(cfg, schemes, ladder, _get(cp, "compare", "seeds", _seeds),
                               norm=_get(cp, "compare", "norm"), scale=_get(cp, "compare", "scale", float),
                               workers=_get(cp, "run", "threads", int))
    p = out / "comparison_table.csv"
    write_csv(p, tab.rows(), ["seed", "eps", "scheme_a", "scheme_b", "distance", "norm", "decreasing"])
    need = _get(cp, "compare", "min_success", int)
    failed = [] if tab.n_success >= need else [f"{tab.n_success} of {len(tab.seeds)} seeds decreasing"]
    return [p], failed


COMMANDS = {
    "kernel-build": cmd_kernel_build,
    "kernel-verify": cmd_kernel_verify,
    "counterterm-table": cmd_counterterm_table,
    "probe": cmd_probe,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "compare": cmd_compare,
}


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="levirenorm", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI config file")
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command> or ./runs/<command>)")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--eps-ladder", help="comma-separated eps values")
        p.add_argument("--scheme", choices=("heat", "covariant", "flat"))
    return ap


def _out_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, "runs")) / args.command


def run(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    t0 = time.perf_counter()
    try:
        cp = load_config(args.config)
        apply_flags(cp, args)
        threads = _get(cp, "run", "threads", int)
        if threads < 1:
            raise ConfigError("must be >= 1", "run.threads")
        out = _out_dir(args)
        out.mkdir(parents=True, exist_ok=True)
        paths, failed = COMMANDS[args.command](cp, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except LeviRenormError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CHECK
    snap = snapshot(cp)
    manifest = {
        "command": args.command,
        "config_path": args.config,
        "config": snap,
        "config_hash": text_hash(json.dumps(snap, sort_keys=True)),
        "seeds": _seeds(cp["sweep"]["seeds"]) if args.command == "sweep" else
        _seeds(cp["compare"]["seeds"]) if args.command == "compare" else [int(cp["run"]["seed"])],
        "output_dir": str(out),
        "version": __version__,
        "started": started,
        "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "wall_time": time.perf_counter() - t0,
        "artifacts": {Path(p).name: file_hash(p) for p in paths},
        "failed_checks": failed,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    for f in failed:
        print(f"FAILED: {f}", file=sys.stderr)
    print(f"{args.command}: {len(paths)} artifacts in {out}" + (f", {len(failed)} failed checks" if failed else ""))
    return EXIT_CHECK if failed else EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
