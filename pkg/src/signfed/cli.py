"""Command-line entry point.

Verbs::

    signfed run CONFIG [--out DIR] [--workers N]
    signfed accountant sigma   --epsilon E [--delta D] --C C --rounds T [...]
    signfed accountant epsilon --sigma S   [--delta D] --C C --rounds T [...]
    signfed bounds --tau X --L X --gap X --rounds T --C C --N N [--alpha A ...]

``run`` writes ``metrics.csv``, ``summary.json`` and ``manifest.json`` into the
output directory, which defaults to ``$SIGNFED_OUT`` and then ``./signfed-out``.

Exit codes: 0 success (including a diverged run), 2 invalid config or input,
3 calibration failure.
"""

import argparse
import json
import math
import os
import sys

from signfed import __version__, config, dp, theory
from signfed.errors import CalibrationError, ConfigError, DomainError, FormatError
from signfed.protocols import run_experiment

OUT_ENV = "SIGNFED_OUT"
DEFAULT_OUT = "signfed-out"


def fmt(x):
    """17 significant digits, so a replayed run diffs byte-for-byte."""
    if x is None:
        return ""
    if isinstance(x, (bool,)):
        return "1" if x else "0"
    if isinstance(x, int):
        return str(x)
    return format(float(x), ".17g")


def metrics_header(num_classes):
    return (["round", "accuracy"] + [f"acc_class_{c}" for c in range(num_classes)]
            + ["attack_accuracy", "cum_bits_per_client", "test_loss", "diverged"])


def metrics_row(r):
    return ([fmt(r.t), fmt(r.accuracy)] + [fmt(v) for v in r.per_class]
            + [fmt(r.attack_accuracy), fmt(r.bits), fmt(r.test_loss), fmt(bool(r.diverged))])


def write_metrics(path, records, num_classes):
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(metrics_header(num_classes)) + "\n")
        for r in records:
            fh.write(",".join(metrics_row(r)) + "\n")


def _json_dump(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_run(args):
    cfg = config.load(args.config)
    if args.workers is not None:
        cfg.workers = args.workers
        cfg.validate()
    out = args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT
    os.makedirs(out, exist_ok=True)

    records, summary = run_experiment(cfg)
    num_classes = len(records[0].per_class) if records else 0
    write_metrics(os.path.join(out, "metrics.csv"), records, num_classes)
    _json_dump({"summary": summary.to_dict() if summary else None},
               os.path.join(out, "summary.json"))
    manifest = {"version": __version__, "seed": cfg.seed, "config": cfg.to_dict()}
    _json_dump(manifest, os.path.join(out, "manifest.json"))

    if summary is None:
        print("0 rounds requested; no summary")
    else:
        line = (f"{summary.protocol}: best accuracy {summary.best_accuracy:.4f} at round "
                f"{summary.best_round}, {summary.bandwidth_mb:.4f} MB per client")
        if summary.epsilon is not None:
            line += f", epsilon {summary.epsilon:.4g}"
        if summary.diverged:
            line += f", DIVERGED at round {summary.divergence_round}"
        print(line)
    print(f"wrote {out}")
    return 0


def _accountant_kwargs(args):
    return dict(delta=args.delta, C=args.C, T_rounds=args.rounds, n=args.n,
                k_size=args.k_size, mechanism=args.mechanism, nu=args.nu,
                lambda_grid=tuple(range(1, args.lambda_max + 1)))


def _print_eps(sigma, kw):
    acct = dp.PrivacyAccountant(sigma, kw["C"], kw["mechanism"], kw["n"], kw["k_size"], kw["nu"],
                                kw["lambda_grid"])
    acct.compose(kw["T_rounds"])
    eps, lam = acct.epsilon(kw["delta"])
    print(f"{'sigma':>12} {'epsilon':>14} {'delta':>10} {'lambda':>7} mechanism")
    print(f"{sigma:12.6g} {eps:14.8g} {kw['delta']:10.3g} {lam:7d} {kw['mechanism']}")
    return eps


def cmd_accountant(args):
    kw = _accountant_kwargs(args)
    if args.what == "sigma":
        if args.epsilon is None:
            raise ConfigError("required for 'accountant sigma'", field="--epsilon")
        sigma = dp.calibrate_sigma(args.epsilon, **kw)
    else:
        if args.sigma is None:
            raise ConfigError("required for 'accountant epsilon'", field="--sigma")
        sigma = args.sigma
    _print_eps(sigma, kw)
    return 0


def cmd_bounds(args):
    rows = []
    for a in args.alpha:
        p = theory.BoundParams(args.tau, args.L, args.gap, args.rounds, args.C, args.N, a,
                               args.n, args.sigma)
        rand = theory.bound_random_attack(p) if a < 1 else math.inf
        rows.append((a, rand, theory.bound_dp(p), 2 / math.sqrt(p.T_cl) * theory.privacy_cost_term(p),
                     theory.gradient_ascent_rate(p)))
    print(f"{'alpha':>7} {'random_attack':>22} {'dp':>22} {'privacy_cost':>22} {'ascent_rate':>22}")
    for a, r, d, c, g in rows:
        print(f"{a:7.3g} {r:22.17g} {d:22.17g} {c:22.17g} {g:22.17g}")
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="signfed", description="Sign-quantized federated learning simulator")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="verb", required=True)

    r = sub.add_parser("run", help="run one experiment from a YAML config")
    r.add_argument("config")
    r.add_argument("--out", default=None, help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    r.add_argument("--workers", type=int, default=None, help="override the config's worker count")
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("accountant", help="moments-accountant calculations")
    a.add_argument("what", choices=("sigma", "epsilon"))
    a.add_argument("--epsilon", type=float)
    a.add_argument("--sigma", type=float)
    a.add_argument("--delta", type=float, default=1e-5)
    a.add_argument("--C", type=float, required=True, help="sampling fraction")
    a.add_argument("--rounds", type=int, required=True)
    a.add_argument("--n", type=int, default=1, help="parameter count (discrete mechanisms)")
    a.add_argument("--k-size", type=int, default=1, help="clients per round (distributed mechanism)")
    a.add_argument("--mechanism", choices=dp.MECHANISMS, default="continuous")
    a.add_argument("--nu", type=float, default=1e-4)
    a.add_argument("--lambda-max", type=int, default=64)
    a.set_defaults(func=cmd_accountant)

    b = sub.add_parser("bounds", help="convergence-bound calculators")
    b.add_argument("--tau", type=float, required=True, help="||tau||_1")
    b.add_argument("--L", type=float, required=True, help="||L||_1")
    b.add_argument("--gap", type=float, required=True, help="f(w0) - f*")
    b.add_argument("--rounds", type=int, required=True)
    b.add_argument("--C", type=float, required=True)
    b.add_argument("--N", type=int, required=True)
    b.add_argument("--alpha", type=float, nargs="+", default=[0.0])
    b.add_argument("--n", type=int, default=1)
    b.add_argument("--sigma", type=float, default=0.0)
    b.set_defaults(func=cmd_bounds)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CalibrationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, FormatError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
