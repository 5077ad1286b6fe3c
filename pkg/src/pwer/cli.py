"""Command-line interface.

Exit codes: 0 success, 2 invalid input, 3 numerical failure. Errors are
written to stderr as one line of JSON.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from importlib import metadata
from typing import Any

import numpy as np

from . import core, prevsim, two_pop, umbrella
from .exceptions import SolverError, ValidationError
from .popmodel import PopulationStructure

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3
PREC = 6


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def _round(obj):
    if isinstance(obj, float):
        if math.isinf(obj) or math.isnan(obj):
            return None
        return round(obj, PREC)
    if isinstance(obj, dict):
        return {k: _round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v) for v in obj]
    if isinstance(obj, np.generic):
        return _round(obj.item())
    if isinstance(obj, np.ndarray):
        return _round(obj.tolist())
    return obj


def _load_json(text_or_path: str) -> Any:
    """Inline JSON, or a path to a JSON file."""
    text = text_or_path
    stripped = text.lstrip()
    if not stripped.startswith(("{", "[")):
        try:
            with open(text_or_path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ValidationError(f"cannot read {text_or_path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"invalid JSON: {exc.msg}") from None


# ---------------------------------------------------------------------------
# problem assembly


def _problem(args) -> core.PwerProblem:
    sources = [args.corr_file is not None, args.scenario is not None, args.umbrella]
    if sum(sources) != 1:
        raise ValidationError("give exactly one of --corr-file, --scenario, --umbrella")
    df = args.df
    if args.umbrella:
        if not args.pi:
            raise ValidationError("--umbrella needs --pi")
        cfg = umbrella.UmbrellaConfig(len(args.pi), N=args.N, pi=tuple(args.pi))
        problem = umbrella.umbrella_problem(cfg)
        structure, corr = problem.structure, problem.corr
        if args.structure is not None:
            raise ValidationError("--umbrella derives the structure; drop --structure")
    else:
        if args.scenario is not None:
            if args.pi12 is None:
                raise ValidationError("--scenario needs --pi12")
            sc = two_pop.TwoPopScenario(args.scenario, args.pi12)
            R = np.array([[1.0, two_pop.scenario_correlation(sc)],
                          [two_pop.scenario_correlation(sc), 1.0]])
            default_structure = two_pop.to_structure(sc)
        else:
            data = _load_json(args.corr_file)
            if isinstance(data, dict):
                if "matrix" not in data:
                    raise ValidationError("correlation document needs a 'matrix' entry")
                R = data["matrix"]
                df = data.get("df", df)
                df = math.inf if df is None else df
            else:
                R = data
            default_structure = None
        if args.structure is not None:
            structure = PopulationStructure.from_dict(_load_json(args.structure))
        elif default_structure is not None:
            structure = default_structure
        else:
            raise ValidationError("--structure is required with --corr-file")
        try:
            corr = core.CorrelationModel(np.asarray(R, dtype=float), df)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"bad correlation matrix: {exc}") from None
    return core.PwerProblem(structure, corr, args.true_nulls, args.weights)


def _engine_kw(args) -> dict:
    kw = {"backend": args.backend, "seed": 0 if args.seed is None else args.seed}
    if args.tol is not None:
        kw["tol"] = args.tol
    if args.backend == "mc":
        kw["n_draws"] = args.draws
        kw["threads"] = args.threads
    return kw


# ---------------------------------------------------------------------------
# subcommands


def cmd_crit(args):
    problem = _problem(args)
    res = core.solve_critical(problem, args.alpha, error_rate=args.error_rate, **_engine_kw(args))
    return "json", res.to_dict()


def cmd_adjust_p(args):
    problem = _problem(args)
    p = core.adjusted_p(problem, args.z, error_rate=args.error_rate, **_engine_kw(args))
    return "json", {"z": list(args.z), "adjusted_p": p.tolist(), "error_rate": args.error_rate}


def cmd_sci(args):
    problem = _problem(args)
    if len(args.estimates) != problem.m or len(args.ses) != problem.m:
        raise ValidationError(f"need {problem.m} estimates and standard errors")
    res = core.solve_critical(problem, args.alpha, error_rate=args.error_rate, **_engine_kw(args))
    sci = core.sci_bounds(args.estimates, args.ses, res.c_star, args.side, problem.weights)
    return "json", sci.to_dict()


def cmd_two_pop(args):
    if args.sweep:
        n = int(round(1.0 / args.step))
        if n < 1 or abs(n * args.step - 1.0) > 1e-9:
            raise ValidationError("--step must divide 1")
        rows = two_pop.inflation_sweep(args.kind, args.alpha, args.beta, np.linspace(0, 1, n + 1))
        return "csv", two_pop.sweep_csv(rows)
    if args.pi12 is None:
        raise ValidationError("give --pi12 or --sweep")
    sc = two_pop.TwoPopScenario(args.kind, args.pi12, args.alpha, args.beta)
    c_p, c_f = two_pop.critical_values(sc)
    return "json", {
        "kind": sc.kind, "pi12": sc.pi12, "alpha": sc.alpha, "beta": sc.beta,
        "rho": two_pop.scenario_correlation(sc),
        "c_pwer": c_p, "c_fwer": c_f,
        "q_pwer": two_pop.sample_size_factor(c_p, sc.alpha, sc.beta),
        "q_fwer": two_pop.sample_size_factor(c_f, sc.alpha, sc.beta),
    }


def _require_seed(args):
    if args.seed is None:
        raise ValidationError(f"{args.command} needs --seed")


def cmd_umbrella(args):
    _require_seed(args)
    data = _load_json(args.config)
    if not isinstance(data, dict):
        raise ValidationError("umbrella config must be a JSON object")
    cfg = umbrella.UmbrellaConfig.from_dict(data)
    if args.control == "both":
        pair = umbrella.simulate_pair(cfg, args.reps, args.seed, n_draws=args.draws,
                                      threads=args.threads)
        return "json", {"pwer": pair.pwer.to_dict(), "fwer": pair.fwer.to_dict(),
                        "dominance_violations": pair.dominance_violations}
    rep = umbrella.simulate(cfg, args.control, args.reps, args.seed, n_draws=args.draws,
                            threads=args.threads)
    return "json", rep.to_dict()


def cmd_prev_sim(args):
    _require_seed(args)
    data = _load_json(args.config) if args.config else {}
    if not isinstance(data, dict):
        raise ValidationError("prev-sim config must be a JSON object")
    data = dict(data)
    data["seed"] = args.seed
    for key in ("kind", "N", "n_reps", "alpha", "pi_min"):
        value = getattr(args, key)
        if value is not None:
            data[key] = value
    cfg = prevsim.PrevSimConfig.from_dict(data)
    cells = prevsim.prevalence_effect_grid(cfg, threads=args.threads)
    return "csv", prevsim.grid_csv(cells)


# ---------------------------------------------------------------------------
# parser


def _add_globals(p, suppress: bool):
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--out", default=d(None), help="write output here (plus a manifest)")
    p.add_argument("--seed", type=_u64, default=d(None), help="random seed (u64)")
    p.add_argument("--threads", type=_positive_int, default=d(1), help="worker threads")
    p.add_argument("--tol", type=float, default=d(None), help="numerical tolerance")


def _u64(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError("seed must be an integer") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return v


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError("expected an integer") from None
    if v < 1:
        raise argparse.ArgumentTypeError("expected a positive integer")
    return v


def _add_problem(p):
    p.add_argument("--structure", help="structure JSON (inline or file)")
    p.add_argument("--corr-file", help="correlation JSON: matrix or {matrix, df}")
    p.add_argument("--scenario", choices=["i", "ii", "indep"])
    p.add_argument("--pi12", type=float)
    p.add_argument("--umbrella", action="store_true", help="subset statistics of an umbrella trial")
    p.add_argument("--pi", type=float, nargs="+", help="umbrella stratum prevalences")
    p.add_argument("--N", type=int, default=1056, help="umbrella total sample size")
    p.add_argument("--df", type=float, default=math.inf)
    p.add_argument("--weights", type=float, nargs="+")
    p.add_argument("--true-nulls", type=int, nargs="+")
    p.add_argument("--alpha", type=float, default=0.025)
    p.add_argument("--error-rate", choices=["pwer", "fwer"], default="pwer")
    p.add_argument("--backend", choices=list(core.BACKENDS), default="auto")
    p.add_argument("--draws", type=_positive_int, default=1_000_000, help="mc ensemble size")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pwer", description="Population-wise error rate computations.")
    parser.add_argument("--version", action="version", version=_version())
    _add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("crit", help="critical value")
    _add_problem(p)
    p.set_defaults(func=cmd_crit)

    p = sub.add_parser("adjust-p", help="adjusted p-values")
    _add_problem(p)
    p.add_argument("--z", type=float, nargs="+", required=True, help="observed statistics")
    p.set_defaults(func=cmd_adjust_p)

    p = sub.add_parser("sci", help="simultaneous confidence bounds")
    _add_problem(p)
    p.add_argument("--estimates", type=float, nargs="+", required=True)
    p.add_argument("--ses", type=float, nargs="+", required=True)
    p.add_argument("--side", choices=list(core.SIDES), default="lower")
    p.set_defaults(func=cmd_sci)

    p = sub.add_parser("two-pop", help="two-population design comparison")
    p.add_argument("--kind", choices=list(two_pop.KINDS), required=True)
    p.add_argument("--alpha", type=float, default=0.025)
    p.add_argument("--beta", type=float, default=0.2)
    p.add_argument("--pi12", type=float)
    p.add_argument("--sweep", action="store_true", help="CSV over a pi12 grid")
    p.add_argument("--step", type=float, default=0.01)
    p.set_defaults(func=cmd_two_pop)

    p = sub.add_parser("umbrella", help="umbrella trial simulation")
    p.add_argument("--config", required=True, help="config JSON (inline or file)")
    p.add_argument("--control", choices=["pwer", "fwer", "both"], default="pwer")
    p.add_argument("--reps", type=_positive_int, default=100_000)
    p.add_argument("--draws", type=_positive_int, default=umbrella.DEFAULT_DRAWS)
    p.set_defaults(func=cmd_umbrella)

    p = sub.add_parser("prev-sim", help="estimated-prevalence robustness grid")
    p.add_argument("--config", help="config JSON (inline or file)")
    p.add_argument("--kind", choices=["i", "ii"])
    p.add_argument("--N", type=_positive_int)
    p.add_argument("--n-reps", type=_positive_int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--pi-min", type=float)
    p.set_defaults(func=cmd_prev_sim)

    for name, sp in sub.choices.items():
        _add_globals(sp, suppress=True)
    return parser


def _emit(kind: str, payload, args, argv) -> None:
    text = payload if kind == "csv" else json.dumps(_round(payload), sort_keys=True) + "\n"
    if args.out is None:
        sys.stdout.write(text)
        return
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(text)
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    manifest = {
        "subcommand": args.command,
        "argv": list(argv),
        "config": _round(resolved),
        "seed": args.seed,
        "version": _version(),
        "sha256": hashlib.sha256(text.encode("utf-8")).hexdigest(),
    }
    with open(args.out + ".manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": " ".join(str(message).split())}) + "\n")
    return code


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
        kind, payload = args.func(args)
        _emit(kind, payload, args, argv)
    except ValidationError as exc:
        return _fail(EXIT_VALIDATION, "validation", exc)
    except (SolverError, np.linalg.LinAlgError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERICAL, "numerical", exc)
    except OSError as exc:
        return _fail(EXIT_VALIDATION, "validation", f"{exc.filename}: {exc.strerror}")
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
