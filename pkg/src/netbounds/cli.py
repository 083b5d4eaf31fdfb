"""Command-line entry point: ``netbounds <command> [options]``."""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import experiments as ex
from .exact import DEFAULT_CAP, EnumerationTooLarge, exact_log_marginal
from .lower import DEFAULT_EXPANSION_TERMS, LowerBoundOptions, lower_bound
from .lower import write_trace_csv as write_lb_trace
from .network import NetworkError, ancestral_sample, layer_evidence, load_network
from .upper import UpperBoundOptions, upper_bound
from .upper import write_trace_csv as write_ub_trace


def _ints(text):
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _floats(text):
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _prior(text):
    try:
        return ex.PriorSpec.parse(text)
    except ex.ExperimentError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="netbounds",
        description="Variational upper and lower bounds on marginals of sigmoid and noisy-OR networks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a network JSON file")
    p.add_argument("path")

    def evidence_opts(p):
        p.add_argument("--network", required=True, help="network JSON file")
        p.add_argument(
            "--evidence",
            default="zeros",
            help="sampled, zeros, ones, or a 0/1 string over L1 in index order (default: zeros)",
        )
        p.add_argument("--seed", type=int, default=0, help="seed for --evidence sampled")

    p = sub.add_parser("exact", help="exact log marginal by enumeration")
    evidence_opts(p)
    p.add_argument("--cap", type=int, default=DEFAULT_CAP, help="max unassigned nodes")

    p = sub.add_parser("upper", help="optimized variational upper bound")
    evidence_opts(p)
    p.add_argument("--trace", metavar="CSV", help="write the per-coordinate trace")

    p = sub.add_parser("lower", help="optimized mean-field lower bound")
    evidence_opts(p)
    lower_opts(p)
    p.add_argument("--trace", metavar="CSV", help="write the per-sweep trace")

    p = sub.add_parser("trial", help="run a single random trial")
    p.add_argument("--prior", type=_prior, required=True, help="gaussian:<sigma> or dirichlet:<phi>")
    p.add_argument("--sizes", type=_ints, default=(8,), help="layer size n (one value)")
    p.add_argument("--seed", type=int, default=0, help="trial seed")
    p.add_argument("--evidence", choices=("sampled", "zeros", "ones"), default="sampled")
    p.add_argument("--leak", type=float, help="add an always-on noisy-OR parent with this weight")
    lower_opts(p)
    p.add_argument("--out", help="CSV path (default: stdout)")

    for fig, what in (
        ("fig2", "sigmoid relative errors vs sigma_std"),
        ("fig3", "sigmoid bound gap vs sigma*sqrt(n)"),
        ("fig4", "noisy-OR relative errors vs sigma_std"),
        ("fig5", "noisy-OR bound gap vs sqrt(n)/phi"),
    ):
        p = sub.add_parser(fig, help=what)
        p.add_argument("--seed", type=int, default=0, help="base seed")
        p.add_argument("--trials", type=_positive_int, default=ex.DEFAULT_TRIALS, help="trials per cell")
        p.add_argument("--sizes", type=_ints, help="comma-separated layer sizes")
        p.add_argument("--params", type=_floats, help="comma-separated grid (prior values or abscissa)")
        p.add_argument("--prior", type=_prior, help="run a single prior value instead of the grid")
        p.add_argument("--evidence", choices=("sampled", "zeros", "ones"))
        if fig in ("fig4", "fig5"):
            p.add_argument("--leak", type=float, help="add an always-on parent with this weight")
        lower_opts(p)
        p.add_argument("--jobs", type=_positive_int, default=1, help="worker processes")
        p.add_argument("--out", required=True, help="trial CSV; aggregates go next to it")
    return parser


def lower_opts(p):
    p.add_argument("--lb-mode", choices=("exact", "aux"), help="sigmoid expectation mode")
    p.add_argument("--quadratic", action="store_true", help="noisy-OR quadratic refinement")
    p.add_argument("--expansion-terms", type=_positive_int, default=DEFAULT_EXPANSION_TERMS)


def _evidence(net, args):
    l1 = net.layers[0] if net.layers is not None else np.flatnonzero(net.edges.any(axis=1))
    spec = args.evidence
    if spec == "sampled":
        bits = ancestral_sample(net, np.random.default_rng(args.seed))[l1]
    elif spec in ("zeros", "ones"):
        bits = np.full(len(l1), int(spec == "ones"))
    elif set(spec) <= {"0", "1"}:
        bits = [int(c) for c in spec]
    else:
        raise ValueError(f"--evidence must be sampled, zeros, ones or a 0/1 string, got {spec!r}")
    return layer_evidence(net, bits)


def _print_json(obj):
    print(json.dumps(obj, sort_keys=True))


def cmd_validate(args):
    net = load_network(args.path)
    shape = "bipartite" if net.is_bipartite else "general DAG"
    print(f"ok: {net.kind.value} network, {net.n} nodes, {int(net.edges.sum())} edges, {shape}")


def cmd_exact(args):
    net = load_network(args.network)
    res = exact_log_marginal(net, _evidence(net, args), cap=args.cap)
    _print_json({"log_marginal": res.log_marginal, "enumerated_states": res.enumerated_states})


def cmd_upper(args):
    net = load_network(args.network)
    res = upper_bound(net, _evidence(net, args), UpperBoundOptions(trace=bool(args.trace)))
    if args.trace:
        write_ub_trace(res, args.trace)
    _print_json({"log_bound": res.log_bound, "sweeps": res.sweeps, "converged": res.converged})


def _lb_options(args, trace=False):
    return LowerBoundOptions(
        sigmoid_expectation=args.lb_mode or "exact",
        expansion_terms=args.expansion_terms,
        use_quadratic=args.quadratic,
        trace=trace,
    )


def cmd_lower(args):
    net = load_network(args.network)
    res = lower_bound(net, _evidence(net, args), _lb_options(args, trace=bool(args.trace)))
    if args.trace:
        write_lb_trace(res, args.trace)
    _print_json({"log_bound": res.log_bound, "sweeps": res.sweeps, "converged": res.converged})


def cmd_trial(args):
    if len(args.sizes) != 1:
        raise ex.ExperimentError("trial takes a single --sizes value")
    cfg = ex.TrialConfig(
        prior=args.prior,
        n=args.sizes[0],
        evidence=args.evidence,
        lb_mode=args.lb_mode,
        quadratic=args.quadratic,
        expansion_terms=args.expansion_terms,
        leak=args.leak,
    )
    rec = ex.simulate_trial(cfg, args.seed)
    if args.out:
        ex.emit_csv([rec], args.out)
    else:
        print(",".join(ex.TRIAL_HEADER))
        print(",".join(rec.row()))


def cmd_figure(args):
    want = "gaussian" if args.command in ("fig2", "fig3") else "dirichlet"
    params = args.params
    if args.prior is not None:
        if args.prior.kind != want:
            raise ex.ExperimentError(f"{args.command} needs a {want} prior")
        if args.command in ("fig3", "fig5"):
            raise ex.ExperimentError(f"{args.command} sweeps an abscissa grid; use --params")
        params = (args.prior.value,)
    spec = ex.ExperimentSpec.for_figure(
        args.command,
        trials=args.trials,
        seed=args.seed,
        sizes=args.sizes,
        params=params,
        evidence=args.evidence,
        lb_mode=args.lb_mode,
        quadratic=args.quadratic,
        expansion_terms=args.expansion_terms,
        leak=getattr(args, "leak", None),
    )
    run = ex.run_scaling if spec.scaling else ex.run_sweep
    res = run(spec, out=args.out, jobs=args.jobs)
    print(f"wrote {len(res.records)} trials to {args.out}")


COMMANDS = {
    "validate": cmd_validate,
    "exact": cmd_exact,
    "upper": cmd_upper,
    "lower": cmd_lower,
    "trial": cmd_trial,
    "fig2": cmd_figure,
    "fig3": cmd_figure,
    "fig4": cmd_figure,
    "fig5": cmd_figure,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except (NetworkError, ex.ExperimentError, EnumerationTooLarge, ValueError, OSError) as exc:
        print(f"netbounds {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
