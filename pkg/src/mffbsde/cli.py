"""Command-line front end.

Exit codes: 0 success, 1 error or bad usage, 2 iteration did not converge,
3 an assumption probe failed.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, scenarios
from .coefficients import ProbeSpec, validate_assumptions
from .exceptions import MFFBSDEError
from .picard import iterate, multi_start
from .solvers import solve_equilibrium
from .mfg import verify_equilibrium

EXIT_OK, EXIT_ERROR, EXIT_NOT_CONVERGED, EXIT_ASSUMPTION = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    return obj


def _encode(obj):
    if obj is None:
        return "null"
    if obj is True:
        return "true"
    if obj is False:
        return "false"
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        if not math.isfinite(obj):
            return "null"
        text = format(obj, ".17g")
        return text if any(c in text for c in ".en") else text + ".0"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, list):
        return "[" + ",".join(_encode(v) for v in obj) + "]"
    if isinstance(obj, dict):
        return "{" + ",".join(json.dumps(k) + ":" + _encode(obj[k]) for k in sorted(obj)) + "}"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def canonical_json(obj):
    """Sorted keys, 17 significant digits, non-finite floats as null."""
    return _encode(_plain(obj)) + "\n"


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load(args):
    if args.scenario and args.config:
        raise UsageError("give either --scenario or --config, not both")
    ref = args.scenario or args.config
    if not ref:
        raise UsageError("a scenario is required (--scenario NAME or --config PATH)")
    scn = scenarios.load(ref)
    config = scenarios.apply_overrides(scn.to_dict(), args.set or [])
    seed = args.seed
    if seed is None and os.environ.get("MFFBSDE_SEED"):
        try:
            seed = int(os.environ["MFFBSDE_SEED"])
        except ValueError:
            raise UsageError("MFFBSDE_SEED must be an integer") from None
    if seed is not None:
        config.setdefault("solver", {})["seed"] = seed
    if getattr(args, "mode", None):
        config.setdefault("solver", {})["mode"] = args.mode
    return scenarios.scenario_custom(config)


def _write(out, name, text, artifacts):
    path = out / name
    path.write_text(text)
    artifacts[name] = path


def _manifest(out, scn, artifacts, timings, command):
    config_text = canonical_json(scn.config)
    manifest = {
        "command": command,
        "scenario": scn.name,
        "config_hash": hashlib.sha256(config_text.encode()).hexdigest(),
        "seed": scn.solver.seed,
        "version": __version__,
        "timings": timings,
        "artifacts": {name: {"path": name, "sha256": _sha256(p)} for name, p in sorted(artifacts.items())},
    }
    (out / "manifest.json").write_text(canonical_json(manifest))


def observed_quantities(scn, report=None, multistart=None, verification=None):
    """Observed values for the quantities named in expected-outcome records."""
    obs = {}
    if report is not None:
        mean = report.flow.mean_path(0)[:, 0]
        obs["iterations_at_most"] = report.n_iter
        obs["terminal_mean"] = float(mean[-1])
        init = scn.config["init"]
        if init["kind"] == "dirac_sine":
            dev = mean - init["value"] * np.sin(scn.grid.points)
            # amplitude plus the signed worst deviation: |obs - value| is the sup error
            obs["mean_sine_amplitude"] = float(init["value"] + dev[np.argmax(np.abs(dev))])
        if report.solutions is not None:
            sol = report.solutions[0]
            y0 = sol.y[:, 0, 0]
            obs["y0_mean"] = float(y0.mean())
            obs["adjoint_range"] = [float(sol.y.min()), float(sol.y.max())]
    if multistart is not None:
        obs["n_clusters"] = len(multistart.clusters) if multistart.verdict != "inconclusive" else -1
    if verification is not None:
        obs["nash_verification"] = "PASS" if verification.passed else "FAIL"
    return obs


def expectation_checks(scn, observed):
    out = []
    for rec in scn.expected:
        if rec["quantity"] in observed:
            o = observed[rec["quantity"]]
            out.append({**rec, "observed": o, "passed": bool(scenarios.check_expected(rec, o))})
    return out


def cmd_run(args):
    scn = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = scn.psi_config(n_threads=args.threads)
    artifacts, timings = {}, {}
    t0 = time.perf_counter()
    mu0 = scn.init_flow(n_threads=args.threads)
    verification = None
    if scn.kind == "game":
        eq = solve_equilibrium(scn.game, mu0, cfg)
        report = eq.report
        timings["solve"] = time.perf_counter() - t0
        v = scn.config["game"]["verify"]
        t1 = time.perf_counter()
        verification = verify_equilibrium(scn.game, eq.flow, eq.controls, v["n_perturbations"], v["magnitude"],
                                          cfg.seed, v["n_particles"], n_threads=args.threads)
        eq.verification = verification
        timings["verify"] = time.perf_counter() - t1
    else:
        report = iterate(scn.system, mu0, cfg)
        timings["solve"] = time.perf_counter() - t0
    names = scn.config["outputs"]
    _write(out, names["measure_flow"], report.flow.to_csv(), artifacts)
    body = {"scenario": scn.name, "mode": cfg.mode, **report.to_dict(),
            "expected": expectation_checks(scn, observed_quantities(scn, report, verification=verification))}
    _write(out, names["report"], canonical_json(body), artifacts)
    if scn.kind == "game":
        _write(out, names["equilibrium"], canonical_json(eq.to_dict()), artifacts)
        _write(out, names["control_table"], eq.control_table_csv(), artifacts)
    _manifest(out, scn, artifacts, timings, "run")
    print(f"{scn.name}: {report.status} after {report.n_iter} iteration(s), rho = {report.rho_history[-1]:.4g}")
    return EXIT_OK if report.converged else EXIT_NOT_CONVERGED


def cmd_validate(args):
    scn = _load(args)
    rep = validate_assumptions(scn.system, ProbeSpec(T=scn.grid.T), seed=scn.solver.seed)
    text = canonical_json({"scenario": scn.name, **rep.to_dict()})
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        artifacts = {}
        _write(out, "validation.json", text, artifacts)
        _manifest(out, scn, artifacts, {}, "validate")
    for c in rep.checks:
        print(f"{'PASS' if c.passed else 'FAIL'} population {c.population} {c.name}: {c.detail}")
    return EXIT_OK if rep.passed else EXIT_ASSUMPTION


_INIT_KINDS = {"sine": "dirac_sine", "const": "dirac_constant", "constant": "dirac_constant",
               "reference": "reference"}


def parse_inits(text, default_kind):
    """``sine:0.2,sine:0.6`` / ``const:0,const:1`` / ``reference``; bare numbers use ``default_kind``."""
    specs = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        kind, _, value = item.partition(":")
        if not value and kind not in _INIT_KINDS:
            kind, value = default_kind, item
        else:
            if kind not in _INIT_KINDS:
                raise UsageError(f"unknown init kind {kind!r}")
            kind = _INIT_KINDS[kind]
        try:
            specs.append({"kind": kind, "value": float(value) if value else 0.0})
        except ValueError:
            raise UsageError(f"bad init value {value!r}") from None
    return specs


def cmd_multistart(args):
    scn = _load(args)
    if args.inits:
        default = scn.config["init"]["kind"]
        specs = parse_inits(args.inits, "dirac_constant" if default == "reference" else default)
    else:
        specs = scn.config["multistart"]["inits"]
    if len(specs) < 2:
        raise UsageError("multistart needs at least 2 initial flows")
    if scn.kind == "game":
        raise UsageError("multistart runs on FBSDE scenarios")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = scn.psi_config(n_threads=args.threads)
    t0 = time.perf_counter()
    inits = [scenarios.make_init_flow(scn, s, args.threads) for s in specs]
    ms = multi_start(scn.system, inits, cfg)
    timings = {"solve": time.perf_counter() - t0}
    artifacts = {}
    body = {"scenario": scn.name, "inits": specs, **ms.to_dict(),
            "expected": expectation_checks(scn, observed_quantities(scn, multistart=ms))}
    _write(out, scn.config["outputs"]["clusters"], canonical_json(body), artifacts)
    for i, r in enumerate(ms.reports):
        _write(out, f"measure_flow_{i}.csv", r.flow.to_csv(), artifacts)
    _manifest(out, scn, artifacts, timings, "multistart")
    print(f"{scn.name}: {ms.verdict}, {len(ms.clusters)} cluster(s)")
    return EXIT_OK


def cmd_list(args):
    for name in sorted(scenarios.BUILTINS):
        print(f"{name}: {scenarios.builtin(name, n_particles=1).description}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="mffbsde", description="Particle solver for mean-field FBSDEs and games.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required):
        p.add_argument("--scenario", help="builtin scenario name")
        p.add_argument("--config", help="path to a scenario JSON file")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--seed", type=int, help="random seed (falls back to MFFBSDE_SEED)")
        p.add_argument("--threads", type=int, default=1, help="worker cap; never changes results")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted-path config override")
        p.add_argument("--mode", choices=["girsanov", "direct"])

    common(sub.add_parser("run", help="solve a scenario and write artifacts"), True)
    common(sub.add_parser("validate", help="probe the coefficient assumptions"), False)
    p = sub.add_parser("multistart", help="iterate from several initial flows and cluster the limits")
    common(p, True)
    p.add_argument("--inits", help="e.g. sine:0.2,sine:0.6 or const:0,const:1")
    sub.add_parser("list", help="list builtin scenarios")
    return parser


COMMANDS = {"run": cmd_run, "validate": cmd_validate, "multistart": cmd_multistart, "list": cmd_list}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_ERROR
    if getattr(args, "threads", 1) < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_ERROR
    try:
        return COMMANDS[args.command](args)
    except (UsageError, MFFBSDEError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
