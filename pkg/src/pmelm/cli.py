"""Command-line front end.

Exit codes::

    0  success
    2  invalid flags, missing or malformed input
    3  I/O failure (or a failed study cell without --skip-failures)
    4  model fit did not converge

Diagnostics go to stderr; stdout stays empty.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .data import DEFAULT_DESIGN, DesignSpec, load_panel, metadata_path, write_panel
from .errors import NonConvergence, PMELMError
from .influence import diagnose, read_records, write_records
from .model import QuadratureRule, fit_ml, fit_result_from_json
from .report import PlotSelection, figure_name, needle_plot, save_svg, scatter_plot, trajectory_plot
from .simulate import (
    DEFAULT_BETA,
    DEFAULT_METHODS,
    ContaminationSpec,
    GenSpec,
    contaminate,
    generate,
)
from .study import run_study, write_study

logger = logging.getLogger("pmelm")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NONCONVERGENCE = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _positive_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
    return v


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
    return v


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers: {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers: {text!r}") from None


def _terms(text: str) -> DesignSpec:
    try:
        return DesignSpec(tuple(t.strip() for t in str(text).split(",") if t.strip()))
    except (ValueError, PMELMError) as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pmelm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", type=Path, help="key = value file; dotted keys per subcommand")
    parser.add_argument("--quiet", action="store_true", help="only report errors on stderr")
    parser.add_argument("--threads", type=_positive_int, default=None,
                        help="worker processes for study (default: logical cores)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a panel")
    p.add_argument("--sigma1", type=_positive_float, help="random-intercept SD (required)")
    p.add_argument("--m1", type=_positive_int, default=59)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, help="output CSV (required)")
    p.add_argument("--covariates", default="synthetic",
                   help="'synthetic' or a reference panel CSV to resample trt/base/age from")
    p.add_argument("--baseline", choices=("independent", "shared", "source"), default="independent")
    p.add_argument("--alpha-sd", type=float, default=0.0)
    p.add_argument("--beta", type=_float_list, default=list(DEFAULT_BETA))
    p.add_argument("--terms", type=_terms, default=DEFAULT_DESIGN)

    p = sub.add_parser("contaminate", help="apply one contamination method")
    p.add_argument("--panel", type=Path, help="input CSV (required)")
    p.add_argument("--method", type=int, help="1-6 (required)")
    p.add_argument("--target", type=_positive_int, default=1)
    p.add_argument("--out", type=Path, help="output CSV (required)")

    p = sub.add_parser("fit", help="maximum-likelihood fit, writes JSON")
    p.add_argument("--panel", type=Path, help="input CSV (required)")
    p.add_argument("--out", type=Path, help="output JSON (required)")
    p.add_argument("--order", type=_positive_int, default=25, help="quadrature nodes")
    p.add_argument("--terms", type=_terms, default=DEFAULT_DESIGN)

    p = sub.add_parser("diagnose", help="influence diagnostics from a fit")
    p.add_argument("--panel", type=Path, help="input CSV (required)")
    p.add_argument("--fit", type=Path, help="fit JSON from 'pmelm fit' (required)")
    p.add_argument("--out", type=Path, help="output CSV (required)")

    p = sub.add_parser("plot", help="SVG figures")
    p.add_argument("--kind", choices=("needle", "scatter", "trajectory"), default="needle")
    p.add_argument("--diag", type=Path, help="diagnostics CSV (needle, scatter)")
    p.add_argument("--panel", type=Path, help="panel CSV (trajectory)")
    p.add_argument("--stat", default="rri", choices=("Ci", "Ci_b", "Ci_d", "rri", "cook1"))
    p.add_argument("--select", choices=("all", "balanced20"), default="all")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--highlight", type=_int_list, default=[])
    p.add_argument("--others", type=int, default=5)
    p.add_argument("--dataset", default=None, help="file name prefix (default: input stem)")
    p.add_argument("--method", default="clean", help="method label in the file name")
    p.add_argument("--outdir", type=Path, default=Path("."))

    p = sub.add_parser("study", help="replicated contamination study")
    p.add_argument("--replicates", type=_positive_int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--methods", type=_int_list, default=list(DEFAULT_METHODS))
    p.add_argument("--sigmas", type=_float_list, default=None)
    p.add_argument("--m1", type=_positive_int, default=59)
    p.add_argument("--outdir", type=Path, help="output directory (required)")
    p.add_argument("--skip-failures", action="store_true")
    return parser


REQUIRED = {
    "simulate": ("sigma1", "out"),
    "contaminate": ("panel", "method", "out"),
    "fit": ("panel", "out"),
    "diagnose": ("panel", "fit", "out"),
    "plot": (),
    "study": ("outdir",),
}
GLOBAL_KEYS = {"quiet", "threads"}


def read_config(path: Path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value.strip('"').strip("'")
    return out


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._subparsers._group_actions:  # type: ignore[union-attr]
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str],
                  args: argparse.Namespace) -> argparse.Namespace:
    cfg = read_config(args.config)
    subp = _subparser(parser, args.command)
    actions = {a.dest: a for a in subp._actions if a.dest != "help"}
    sub_defaults: dict[str, Any] = {}
    top_defaults: dict[str, Any] = {}
    for key, value in cfg.items():
        section, _, name = key.rpartition(".")
        name = name.replace("-", "_")
        if section in ("", "global") and name in GLOBAL_KEYS:
            top_defaults[name] = (value.lower() in ("1", "true", "yes")) if name == "quiet" \
                else _positive_int(value)
        elif section in ("", args.command) and name in actions:
            action = actions[name]
            if isinstance(action, argparse._StoreTrueAction):
                sub_defaults[name] = value.lower() in ("1", "true", "yes")
            else:
                conv = action.type or str
                try:
                    sub_defaults[name] = conv(value)
                except argparse.ArgumentTypeError as exc:
                    raise UsageError(f"config key {key!r}: {exc}") from None
        elif section in REQUIRED and section != args.command and name in {
            a.dest for a in _subparser(parser, section)._actions
        }:
            continue  # valid key for another subcommand
        else:
            raise UsageError(f"unknown config key {key!r}")
    subp.set_defaults(**sub_defaults)
    parser.set_defaults(**top_defaults)
    return parser.parse_args(argv)


def _require(args: argparse.Namespace) -> None:
    missing = [f"--{k.replace('_', '-')}" for k in REQUIRED[args.command]
               if getattr(args, k, None) is None]
    if missing:
        raise UsageError(f"{args.command}: missing required flag(s) {', '.join(missing)}")


def _load(path: Path):
    if not path.exists():
        raise UsageError(f"input file not found: {path}")
    return load_panel(path)


def cmd_simulate(args: argparse.Namespace) -> int:
    if args.covariates == "synthetic":
        source: Any = "synthetic"
    else:
        source = _load(Path(args.covariates))
    if len(args.beta) != args.terms.p:
        raise UsageError(f"--beta has {len(args.beta)} values, design has {args.terms.p} terms")
    try:
        spec = GenSpec(sigma1=args.sigma1, m1=args.m1, beta=tuple(args.beta), seed=args.seed,
                       covariate_source=source, alpha_sd=args.alpha_sd, baseline=args.baseline)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    panel = generate(spec, args.terms)
    write_panel(panel, args.out)
    metadata_path(args.out).write_text(json.dumps(panel.meta, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")
    logger.info("wrote %d subjects to %s", panel.m, args.out)
    return EXIT_OK


def cmd_contaminate(args: argparse.Namespace) -> int:
    panel = _load(args.panel)
    out = contaminate(panel, ContaminationSpec(args.method, args.target))
    write_panel(out, args.out)
    meta = dict(out.meta)
    if panel.seed is not None:
        meta["seed"] = panel.seed
    metadata_path(args.out).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")
    return EXIT_OK


def cmd_fit(args: argparse.Namespace) -> int:
    panel = _load(args.panel)
    fit = fit_ml(panel, args.terms, QuadratureRule(args.order))
    args.out.write_text(json.dumps(fit.to_json(), indent=2) + "\n", encoding="utf-8")
    logger.info("loglik %.6f after %d iterations", fit.loglik, fit.iterations)
    return EXIT_OK


def cmd_diagnose(args: argparse.Namespace) -> int:
    panel = _load(args.panel)
    if not args.fit.exists():
        raise UsageError(f"fit file not found: {args.fit} (run 'pmelm fit' first)")
    try:
        doc = json.loads(args.fit.read_text(encoding="utf-8"))
        fit = fit_result_from_json(doc, panel)
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"malformed fit file {args.fit}: {exc}") from None
    write_records(diagnose(fit), args.out)
    return EXIT_OK


def cmd_plot(args: argparse.Namespace) -> int:
    args.outdir.mkdir(parents=True, exist_ok=True)
    if args.kind == "trajectory":
        if args.panel is None:
            raise UsageError("plot --kind trajectory needs --panel")
        panel = _load(args.panel)
        target = args.highlight[0] if args.highlight else int(panel.ids[0])
        dataset = args.dataset or args.panel.stem
        doc = trajectory_plot(panel, target, args.others)
        save_svg(doc, args.outdir / figure_name(dataset, "trajectory", args.method))
        return EXIT_OK
    if args.diag is None:
        raise UsageError(f"plot --kind {args.kind} needs --diag")
    if not args.diag.exists():
        raise UsageError(f"input file not found: {args.diag}")
    records = read_records(args.diag)
    dataset = args.dataset or args.diag.stem.removesuffix("_diag")
    sel = PlotSelection(args.select, tuple(args.highlight), args.seed)
    if args.kind == "needle":
        doc = needle_plot(records, args.stat, sel)
        name = figure_name(dataset, args.stat, args.method)
    else:
        doc = scatter_plot(records, sel)
        name = figure_name(dataset, "scatter", args.method)
    save_svg(doc, args.outdir / name)
    return EXIT_OK


def cmd_study(args: argparse.Namespace) -> int:
    for m in args.methods:
        ContaminationSpec(m)
    workers = args.threads or os.cpu_count() or 1
    kwargs: dict[str, Any] = {}
    if args.sigmas:
        kwargs["sigmas"] = tuple(args.sigmas)
    outcomes = run_study(args.seed, args.replicates, tuple(args.methods), m1=args.m1,
                         workers=workers, **kwargs)
    failed = [o for o in outcomes if o.error]
    for o in failed:
        logger.error("cell sigma1=%s method=%d replicate=%d failed: %s",
                     o.sigma1, o.method, o.replicate, o.error)
    if failed and not args.skip_failures:
        write_study(outcomes, args.outdir)
        return EXIT_IO
    write_study(outcomes, args.outdir)
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "contaminate": cmd_contaminate,
    "fit": cmd_fit,
    "diagnose": cmd_diagnose,
    "plot": cmd_plot,
    "study": cmd_study,
}


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO,
                        format="%(levelname)s: %(message)s", stream=sys.stderr, force=True)
    try:
        if args.config is not None:
            if not args.config.exists():
                raise UsageError(f"config file not found: {args.config}")
            try:
                args = _apply_config(parser, argv, args)
            except SystemExit as exc:
                return int(exc.code or 0)
            if args.quiet:
                logging.getLogger().setLevel(logging.ERROR)
        _require(args)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        logger.error("%s", exc)
        return EXIT_USAGE
    except NonConvergence as exc:
        logger.error("fit did not converge: %s (iterations %d, gradient norm %.3g)",
                     exc, exc.iterations, exc.grad_norm)
        return EXIT_NONCONVERGENCE
    except PMELMError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_USAGE
    except OSError as exc:
        logger.error("I/O failure: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
