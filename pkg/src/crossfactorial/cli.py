"""Command-line front end: ``crossfactorial {randomise,analyse,simulate,hasse}``.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure
(a partial report is still written).
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from .anova import anova, estimate_components_anova
from .design import DesignSpec, assign_by_method, read_csv, systematic_design
from .exceptions import CrossFactorialError, NumericalError
from .factors import emit_hasse_dot
from .formula import parse, to_model
from .reml import fit_reml
from .simulation import compare_methods, load_configs, profile_inputs, run_study, summaries_to_csv

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 2, 3

# counts used by ``hasse --design`` when none are given; node sets do not
# depend on them as long as every factor has at least two levels
_HASSE_COUNTS = {"a": dict(n_T=3, n_R=2), "b": dict(n_T=3, n_B=2, n_R=2), "c": dict(n_T=3, n_B=2, n_C=2, n_R=2)}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _seed(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer seed, got {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must lie in [0, 2**64)")
    return value


def _add_counts(p: argparse.ArgumentParser, required_design: bool = True):
    p.add_argument("--design", choices=("a", "b", "c"), required=required_design,
                   help="a: completely randomised, b: randomised block, c: multicentre")
    p.add_argument("--nI", type=int, default=2, help="interventions (default 2)")
    p.add_argument("--nT", type=int, default=None, help="therapists per centre")
    p.add_argument("--nB", type=int, default=None, help="batches per centre (design b, c)")
    p.add_argument("--nC", type=int, default=None, help="centres (design c)")
    p.add_argument("--nR", type=int, default=None, help="patients per therapist, intervention and batch")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="crossfactorial", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("randomise", help="generate an allocation table")
    _add_counts(p)
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--method", type=int, choices=range(1, 6), default=4,
                   help="assignment method 1..5 (4: joint randomisation within blocks)")
    p.add_argument("--out", type=Path, default=None, help="CSV path (default: standard output)")

    p = sub.add_parser("analyse", help="stratum ANOVA or REML fit of a data CSV")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--formula", required=True, help='e.g. "y~I+Error(T+I:T)" or "y~I+(1|T)+(1|I:T)"')
    p.add_argument("--method", choices=("anova", "reml"), default="anova")
    p.add_argument("--negative-components", action="store_true",
                   help="report negative ANOVA component estimates instead of truncating at 0")
    p.add_argument("--format", choices=("json", "markdown"), default=None,
                   help="output format (default: from --out suffix, else markdown for anova, json for reml)")
    p.add_argument("--out", type=Path, default=None)

    p = sub.add_parser("simulate", help="run simulation cells from a config file")
    p.add_argument("--config", type=Path, required=True, help="JSON or TOML config")
    p.add_argument("--reps", type=_positive, default=None,
                   help="replications for cells whose config does not set them")
    p.add_argument("--jobs", type=_positive, default=1)
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("hasse", help="write DOT Hasse diagrams of the random and fixed structures")
    _add_counts(p, required_design=False)
    p.add_argument("--formula", default=None)
    p.add_argument("--data", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True,
                   help="base path; writes <stem>.random.dot and <stem>.fixed.dot")
    return parser


def _spec_from_args(args, seed: int = 0) -> DesignSpec:
    counts = dict(_HASSE_COUNTS[args.design]) if args.verb == "hasse" else {}
    for key, value in (("n_T", args.nT), ("n_B", args.nB), ("n_C", args.nC), ("n_R", args.nR)):
        if value is not None:
            counts[key] = value
    return DesignSpec(args.design, n_I=args.nI, seed=seed, **counts)


def _write(text: str, out: Path | None):
    if out is None:
        sys.stdout.write(text)
    else:
        out.write_text(text, encoding="utf-8", newline="")


def cmd_randomise(args) -> int:
    spec = _spec_from_args(args, args.seed)
    inputs = None
    if args.method in (1, 2, 3):
        # matching needs therapist profiles; draw them from the same seed
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(args.seed, spawn_key=(2**32,))))
        inputs = profile_inputs(spec, args.method, rng)[0]
    table = assign_by_method(spec, args.method, inputs)
    _write(table.to_csv(), args.out)
    return EXIT_OK


def _output_format(args, default: str) -> str:
    if args.format:
        return args.format
    if args.out is not None and args.out.suffix.lower() in (".md", ".markdown"):
        return "markdown"
    if args.out is not None and args.out.suffix.lower() == ".json":
        return "json"
    return default


def _jsonable(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def cmd_analyse(args) -> int:
    table, extra = read_csv(args.data)
    ast = parse(args.formula)
    if ast.response not in extra:
        from .exceptions import BindingError

        raise BindingError(f"response {ast.response!r} is not a column of {args.data.name}")
    y = extra[ast.response]
    lattice, spec = to_model(ast, table)
    if args.method == "anova":
        result = anova(y, lattice=lattice)
        comps = estimate_components_anova(result, allow_negative=args.negative_components)
        if _output_format(args, "markdown") == "markdown":
            lines = [result.to_markdown(), "| Component | Estimate |", "|---|---|"]
            lines += [f"| {k} | {v:.6g} |" for k, v in comps.components.items()]
            text = "\n".join(lines) + "\n"
        else:
            text = json.dumps(_jsonable({
                "table": result.to_records(),
                "components": comps.components,
                "negative": comps.negative,
            }), indent=2, ensure_ascii=False) + "\n"
        _write(text, args.out)
        return EXIT_OK

    fit = fit_reml(y, table, spec)
    if _output_format(args, "json") == "json":
        text = json.dumps(_jsonable(fit.to_dict()), indent=2, ensure_ascii=False) + "\n"
    else:
        d = fit.to_dict()
        lines = ["| Quantity | Value |", "|---|---|"]
        if d["fixed"]:
            for k in ("estimate", "se", "df", "t", "p"):
                lines.append(f"| intervention {k} | {d['fixed'][k]:.6g} |")
        lines += [f"| {k} | {v:.6g}{' (boundary)' if d['boundary'].get(k) else ''} |"
                  for k, v in d["components"].items()]
        lines += [f"| REML log-likelihood | {d['reml_loglik']:.10g} |", f"| converged | {d['converged']} |"]
        text = "\n".join(lines) + "\n"
    _write(text, args.out)
    if not fit.converged:
        print(f"error: REML did not converge after {fit.n_iter} iterations; partial report written",
              file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_simulate(args) -> int:
    defaults = {"replications": args.reps} if args.reps is not None else None
    configs = load_configs(args.config, defaults)
    summaries = [run_study(c, jobs=args.jobs) for c in configs]
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "summary.csv").write_text(summaries_to_csv(summaries), encoding="utf-8", newline="")
    lines = ["| Cell | δ3 | δ2 | δ̂1 | SE(δ̂1) | σ̂²_u1 | σ̂²_v1 | Type I | Type II | Boundary | Failures |",
             "|" + "---|" * 11]
    for s in summaries:
        r = s.row()
        lines.append(
            f"| {s.config.label} | {r['delta3']:g} | {r['delta2']:g} | {r['delta1_hat']:.3f} | "
            f"{r['se_delta1_hat']:.3f} | {r['sigma2_u1_hat']:.3f} | {r['sigma2_v1_hat']:.3f} | "
            f"{r['type1_error']:.3f} | {r['type2_error']:.3f} | {r['boundary_estimates']:.3f} | {r['failures']} |"
        )
    text = "\n".join(lines) + "\n"
    try:
        text += "\n" + compare_methods(summaries).to_markdown()
    except CrossFactorialError:
        pass  # cells from different examples or truths are not compared
    (args.out / "summary.md").write_text(text, encoding="utf-8", newline="")
    failed = [s for s in summaries if not s.acceptable]
    if failed:
        labels = ", ".join(s.config.label for s in failed)
        print(f"error: fit failure rate above tolerance in {labels}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_hasse(args) -> int:
    if args.design is not None:
        if args.formula is not None or args.data is not None:
            raise argparse.ArgumentTypeError("give either --design or --formula with --data")
        from .anova import standard_lattice

        lattice = standard_lattice(systematic_design(_spec_from_args(args)))
    elif args.formula is not None and args.data is not None:
        table, _ = read_csv(args.data)
        lattice, _ = to_model(parse(args.formula), table)
    else:
        raise argparse.ArgumentTypeError("give --design, or --formula together with --data")
    stem = args.out.with_suffix("") if args.out.suffix == ".dot" else args.out
    for structure in ("random", "fixed"):
        path = stem.parent / f"{stem.name}.{structure}.dot"
        path.write_text(emit_hasse_dot(lattice, structure), encoding="utf-8", newline="")
    return EXIT_OK


COMMANDS = {"randomise": cmd_randomise, "analyse": cmd_analyse, "simulate": cmd_simulate, "hasse": cmd_hasse}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.verb](args)
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (CrossFactorialError, argparse.ArgumentTypeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
