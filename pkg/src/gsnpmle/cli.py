"""Command-line entry point: ``gsnpmle {fit,coverage,kappa,predict,simulate,rates}``.

Exit codes: 0 success, 1 input error, 2 non-convergence, 3 precondition
violation.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys

import numpy as np

from .coverage import PreconditionError, _theta_grid, build_rule, rule_to_json
from .mixture import CountSample, load_model, model_to_json, posterior_density, posterior_mean
from .npmle import NonConvergenceError, SolverConfig, fit_npmle, optimality_gap
from .rng import Rng
from .shape import KappaConfig, select_kappa
from .simlab import (
    GammaMixturePrior,
    ScenarioSpec,
    SpecError,
    prior_from_dict,
    rate_experiment,
    run_coverage_study,
    write_aggregate_csv,
    write_rates_csv,
    write_replications_csv,
)

EXIT_OK, EXIT_INPUT, EXIT_NONCONVERGENCE, EXIT_PRECONDITION = 0, 1, 2, 3

log = logging.getLogger("gsnpmle")


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # usage errors share the input-error exit code so 2 stays non-convergence
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _positive_float(text):
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not (value > 0.0 and math.isfinite(value)):
        raise argparse.ArgumentTypeError(f"must be positive: {text!r}")
    return value


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be positive: {text!r}")
    return value


def _unit_open(text):
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 < value < 1.0:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1): {text!r}")
    return value


def _seed(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= value < 1 << 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _kappa_grid(text):
    """``start:stop:step`` (inclusive) or a comma-separated list."""
    try:
        if ":" in text:
            start, stop, step = (float(p) for p in text.split(":"))
            count = int(math.floor((stop - start) / step + 1e-9)) + 1
            values = [round(start + i * step, 12) for i in range(count)]
        else:
            values = [float(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad kappa grid {text!r}") from None
    if not values or any(v <= 0.0 for v in values) or any(b <= a for a, b in zip(values, values[1:])):
        raise argparse.ArgumentTypeError("kappa grid must be strictly increasing and positive")
    return values


def _eta(text):
    spec = text.strip().lower()
    if spec == "cv":
        return "cv"
    if spec.startswith("dkw:"):
        try:
            c = float(spec[4:])
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad DKW constant in {text!r}") from None
        if not c > 1.0 / math.sqrt(2.0):
            raise argparse.ArgumentTypeError("DKW constant must exceed 1/sqrt(2)")
        return f"dkw:{c!r}"
    return _positive_float(text)


def read_counts(path, column: str | None = None, allow_empty: bool = False) -> np.ndarray:
    """Counts from one integer per line, or from a named CSV column."""
    values = []
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    with fh:
        if column is None:
            for lineno, line in enumerate(fh, start=1):
                text = line.strip()
                if not text:
                    continue
                values.append(_parse_count(text, path, lineno))
        else:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or column not in reader.fieldnames:
                if reader.fieldnames is None and allow_empty:
                    return np.zeros(0, dtype=np.int64)
                raise InputError(f"{path}: no column named {column!r}")
            for row in reader:
                values.append(_parse_count((row[column] or "").strip(), path, reader.line_num))
    if not values and not allow_empty:
        raise InputError(f"{path}: no counts found")
    return np.asarray(values, dtype=np.int64)


def _parse_count(text, path, lineno):
    try:
        value = int(text)
    except ValueError:
        try:
            f = float(text)
        except ValueError:
            raise InputError(f"{path}:{lineno}: not an integer count: {text!r}") from None
        if not (math.isfinite(f) and f == math.floor(f)):
            raise InputError(f"{path}:{lineno}: not an integer count: {text!r}") from None
        value = int(f)
    if value < 0:
        raise InputError(f"{path}:{lineno}: negative count {value}")
    return value


def _write_text(path, text):
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _load_model(path):
    try:
        return load_model(path)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise InputError(f"{path}: invalid model JSON ({exc})") from None


def _diagnostics_path(out):
    root, ext = os.path.splitext(out)
    return f"{root}.diagnostics{ext or '.json'}"


def cmd_fit(args) -> int:
    counts = CountSample(read_counts(args.counts, args.column))
    config = SolverConfig(
        grid_size=args.grid_size,
        grid_min=args.grid_min,
        grid_max=args.grid_max,
        tol_gradient=args.tol,
        max_iters=args.max_iters,
        allow_infinity_atom={"auto": None, "yes": True, "no": False}[args.infinity_atom],
        method=args.method,
    )
    code = EXIT_OK
    try:
        model, diag = fit_npmle(counts, args.kappa, config)
    except NonConvergenceError as exc:
        model, diag, code = exc.model, exc.diagnostics, EXIT_NONCONVERGENCE
        log.error("%s", exc)
    _write_text(args.out, model_to_json(model))
    report = diag.to_dict()
    report["kappa"] = args.kappa
    report["grid_size"] = int(diag.grid.size)
    report["grid_min"] = float(diag.grid[0])
    report["grid_max"] = float(diag.grid[-1])
    report["infinity_atom"] = diag.infinity_atom
    report["optimality_gap_on_grid"] = optimality_gap(model, counts, diag.grid, diag.infinity_atom)
    _write_text(args.diagnostics or _diagnostics_path(args.out), json.dumps(report, indent=2) + "\n")
    return code


def cmd_coverage(args) -> int:
    model = _load_model(args.model)
    rule = build_rule(model, args.beta, args.mc_draws, Rng(args.seed, 0), x_max=args.x_max)
    _write_text(args.out, rule_to_json(rule))
    if args.emit_density:
        with open(args.emit_density, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["x", "theta", "posterior_density"])
            for x in range(rule.x_max + 1):
                grid, _ = _theta_grid(model, x)
                grid = grid[:: max(1, grid.size // 256)]
                with np.errstate(divide="ignore"):
                    dens = posterior_density(model, grid, x)
                for t, d in zip(grid, dens):
                    writer.writerow([x, repr(float(t)), repr(float(d))])
    return EXIT_OK


def cmd_kappa(args) -> int:
    counts = CountSample(read_counts(args.counts, args.column))
    config = KappaConfig(
        kappa_grid=args.kappa_grid,
        atom_grid_size=args.atom_grid_size,
        eta=args.eta,
        cv_folds=args.cv_folds,
        **({"cv_eta_grid": args.cv_eta_grid} if args.cv_eta_grid else {}),
    )
    result = select_kappa(counts, args.eta, config, Rng(args.seed, 0))
    _write_text(args.out, json.dumps(result.to_dict(), indent=2) + "\n")
    if args.profile_csv:
        with open(args.profile_csv, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["kappa", "delta"])
            for k, d in result.profile:
                writer.writerow([repr(k), repr(d)])
    return EXIT_OK


def cmd_predict(args) -> int:
    model = _load_model(args.model)
    counts = read_counts(args.counts, args.column, allow_empty=True)
    preds = posterior_mean(model, counts) if counts.size else np.zeros(0)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", "x", "posterior_mean"])
        for i, (x, p) in enumerate(zip(counts, preds)):
            writer.writerow([i, int(x), repr(float(p))])
    return EXIT_OK


def _read_json(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None


def cmd_simulate(args) -> int:
    spec = ScenarioSpec.from_dict(_read_json(args.spec))
    os.makedirs(args.out, exist_ok=True)
    study = run_coverage_study(spec, workers=args.workers)
    write_replications_csv(os.path.join(args.out, "replications.csv"), study)
    write_aggregate_csv(os.path.join(args.out, "aggregate.csv"), study)
    if study.n_failed:
        log.warning("%d of %d replications failed", study.n_failed, spec.reps)
    return EXIT_OK


def _rates_spec(data):
    if not isinstance(data, dict):
        raise SpecError("spec", "expected a JSON object")
    known = {"prior", "kappa", "n_list", "reps", "base_seed"}
    unknown = set(data) - known
    if unknown:
        raise SpecError(sorted(unknown)[0], "unknown field")
    for name in ("prior", "kappa", "n_list"):
        if name not in data:
            raise SpecError(name, "missing required field")
    prior = prior_from_dict(data["prior"])
    if not isinstance(prior, GammaMixturePrior):
        raise SpecError("prior", "rate experiments need a gamma_mixture prior")
    kappa = data["kappa"]
    if not isinstance(kappa, (int, float)) or not kappa > 0.0:
        raise SpecError("kappa", "must be a positive number")
    n_list = data["n_list"]
    if not isinstance(n_list, list) or len(n_list) < 2 or any(not isinstance(n, int) or n < 2 for n in n_list):
        raise SpecError("n_list", "must list at least two integers >= 2")
    reps = data.get("reps", 30)
    if not isinstance(reps, int) or reps < 1:
        raise SpecError("reps", "must be a positive integer")
    seed = data.get("base_seed", 0)
    if not isinstance(seed, int) or not 0 <= seed < 1 << 64:
        raise SpecError("base_seed", "must be an unsigned 64-bit integer")
    return prior, float(kappa), n_list, reps, seed


def cmd_rates(args) -> int:
    prior, kappa, n_list, reps, seed = _rates_spec(_read_json(args.spec))
    result = rate_experiment(prior, kappa, n_list, reps, Rng(seed, 0), workers=args.workers)
    write_rates_csv(args.out, result)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gsnpmle", description="Gamma-smoothed NPMLE for Poisson empirical Bayes.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="fit the smooth NPMLE at a fixed shape")
    p.add_argument("counts")
    p.add_argument("--column", help="read counts from this CSV column")
    p.add_argument("--kappa", type=_positive_float, required=True)
    p.add_argument("--grid-size", type=_positive_int, default=300)
    p.add_argument("--grid-min", type=_positive_float)
    p.add_argument("--grid-max", type=_positive_float)
    p.add_argument("--tol", type=_positive_float, default=1e-8)
    p.add_argument("--max-iters", type=_positive_int, default=50000)
    p.add_argument("--method", choices=["cnm", "em"], default="cnm")
    p.add_argument("--infinity-atom", choices=["auto", "yes", "no"], default="auto")
    p.add_argument("--out", required=True)
    p.add_argument("--diagnostics", help="diagnostics JSON path (default: <out>.diagnostics.json)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("coverage", help="build the marginal coverage rule of a fitted model")
    p.add_argument("model")
    p.add_argument("--beta", type=_unit_open, default=0.05)
    p.add_argument("--mc-draws", type=_positive_int, default=200_000)
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--x-max", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--emit-density", help="CSV of posterior densities on the level-set grids")
    p.set_defaults(func=cmd_coverage)

    p = sub.add_parser("kappa", help="estimate the minimal Gamma shape")
    p.add_argument("counts")
    p.add_argument("--column")
    p.add_argument("--eta", type=_eta, default="cv", help="radius: a number, dkw:C or cv")
    p.add_argument("--kappa-grid", type=_kappa_grid, default=_kappa_grid("0.1:6.0:0.1"))
    p.add_argument("--atom-grid-size", type=_positive_int, default=150)
    p.add_argument("--cv-folds", type=int, default=5)
    p.add_argument("--cv-eta-grid", type=lambda s: [_positive_float(v) for v in s.split(",")])
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--profile-csv")
    p.set_defaults(func=cmd_kappa)

    p = sub.add_parser("predict", help="posterior-mean predictions")
    p.add_argument("model")
    p.add_argument("counts")
    p.add_argument("--column")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    for name, func, helptext in (
        ("simulate", cmd_simulate, "run a coverage simulation study"),
        ("rates", cmd_rates, "run a prior TV rate experiment"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("spec")
        p.add_argument("--out", required=True)
        p.add_argument("--workers", type=int, help="worker processes (default GSNPMLE_THREADS, 0 = all CPUs)")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s: %(message)s",
    )
    try:
        return args.func(args)
    except PreconditionError as exc:
        print(f"gsnpmle: precondition violated: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except (InputError, SpecError, ValueError) as exc:
        print(f"gsnpmle: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
