"""drpanel command line: weights, feasibility, estimation, simulation.

Exit codes: 0 success, 1 input validation error, 2 numerical failure
(no overlap, non-convergence, infeasible weight set), 64 usage error.
Human tables print 6 significant digits; CSV outputs keep full precision
and are byte-identical across reruns with the same inputs and seed.
"""

from __future__ import annotations

import argparse
import csv
import sys

import numpy as np

from drpanel import estimator, inference, mc, stats, support
from drpanel.panel import (
    AssignmentSupport,
    PanelDataset,
    ValidationError,
    load_panel,
    write_panel,
)
from drpanel.qp import QpError


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fmt(x) -> str:
    return f"{float(x):.6g}"


def _print_table(rows) -> None:
    widths = [max(len(r[j]) for r in rows) for j in range(len(rows[0]))]
    for row in rows:
        print("  ".join(val.rjust(widths[j]) for j, val in enumerate(row)))


def _load_support(path) -> AssignmentSupport:
    """Read `path,prob` rows (bit-string paths); `#` lines and extra
    columns such as k or precomputed weights are ignored."""
    paths, probs = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        plain = [line for line in fh if not line.lstrip().startswith("#")]
    reader = csv.DictReader(plain)
    if reader.fieldnames is None or "path" not in reader.fieldnames or "prob" not in reader.fieldnames:
        raise ValidationError("support file needs 'path' and 'prob' columns")
    for lineno, rec in enumerate(reader, start=2):
        bits = rec["path"].strip()
        if not bits or any(c not in "01" for c in bits):
            raise ValidationError(f"bad path {rec['path']!r} on line {lineno}")
        paths.append([int(c) for c in bits])
        try:
            probs.append(float(rec["prob"]))
        except ValueError:
            raise ValidationError(f"bad prob {rec['prob']!r} on line {lineno}") from None
    if not paths:
        raise ValidationError("support file has no rows")
    return AssignmentSupport(paths=np.asarray(paths, dtype=float), probs=np.asarray(probs))


def _schedule(args, t_len):
    if getattr(args, "schedule", None) is None:
        return None
    vals = [float(v) for v in args.schedule.split(",")]
    if len(vals) != t_len:
        raise ValidationError("schedule length must equal the number of periods")
    return np.asarray(vals)


def _weights_rows(sup: AssignmentSupport, table) -> list:
    t_len = sup.paths.shape[1]
    rows = [["k", "path", "prob"] + [f"w{t + 1}" for t in range(t_len)]]
    for k in range(sup.paths.shape[0]):
        bits = "".join(str(int(v)) for v in sup.paths[k])
        rows.append(
            [str(k), bits, _fmt(sup.probs[k])] + [_fmt(v) for v in table.weights[k]]
        )
    return rows


def _cmd_fe_weights(args) -> int:
    sup = _load_support(args.support)
    table = support.fe_weights(sup)
    _print_table(_weights_rows(sup, table))
    if args.out:
        support.write_weights_csv(sup, table, args.out)
    return 0


def _cmd_dr_weights(args) -> int:
    sup = _load_support(args.support)
    stat = stats.stat_by_name(args.stat, sup.paths, _schedule(args, sup.paths.shape[1]))
    kind = args.set
    report = support.check_feasibility(sup, kind, stat)
    if not report.nonempty:
        print(f"the {kind} weight set over this support is empty", file=sys.stderr)
        return 2
    system = support.build_constraints(sup, kind, stat)
    table = support.solve_min_norm(sup, system)
    _print_table(_weights_rows(sup, table))
    if args.out:
        notes = [support.NORMALIZATION_NOTE] if kind == "dr" else []
        support.write_weights_csv(sup, table, args.out, notes=notes)
    return 0


def _cmd_feasibility(args) -> int:
    sup = _load_support(args.support)
    stat = None
    if args.set in ("design", "dr"):
        stat = stats.stat_by_name(args.stat, sup.paths, _schedule(args, sup.paths.shape[1]))
    report = support.check_feasibility(sup, args.set, stat)
    print(f"set={args.set} nonempty={str(report.nonempty).lower()}")
    for pid, (a, b), (t1, t2) in report.matched_patterns:
        print(f"pattern {pid}: rows ({a},{b}) periods ({t1 + 1},{t2 + 1})")
    if report.stratum is not None:
        print(f"stratum: {tuple(str(v) for v in report.stratum)}")
    return 0


def _cmd_stats(args) -> int:
    if args.data:
        data = load_panel(args.data)
        paths = data.treatments
        row_label = "unit"
    else:
        sup = _load_support(args.support)
        paths = sup.paths
        row_label = "k"
    stat = stats.stat_by_name(args.stat, paths, _schedule(args, paths.shape[1]))
    labels = stat.labels()
    rows = [[row_label, "path", "value", "stratum"]]
    for i in range(paths.shape[0]):
        bits = "".join(str(int(v)) for v in paths[i])
        value = ",".join(str(v) for v in stat.values[i])
        rows.append([str(i), bits, value, str(int(labels[i]))])
    _print_table(rows)
    return 0


def _load_estimation_inputs(args):
    data = load_panel(args.data)
    schedule = _schedule(args, data.n_periods)
    stat = stats.stat_by_name(args.stat, data.treatments, schedule)
    config = (
        estimator.SolverConfig.from_file(args.config)
        if args.config
        else estimator.SolverConfig()
    )
    basis_name = args.basis or config.basis
    basis = estimator.make_basis(basis_name, data, stat)
    if getattr(args, "check_overlap", False):
        config = (
            config
            if config.check_overlap
            else estimator.SolverConfig(
                tol_obj=config.tol_obj,
                tol_grad=config.tol_grad,
                max_iter=config.max_iter,
                min_normalizer=config.min_normalizer,
                basis=basis_name,
                check_overlap=True,
            )
        )
    return data, stat, basis, config


def _print_certificate(data, basis, stat) -> None:
    try:
        ok, cert = estimator.check_overlap(data, basis, stat)
    except ValidationError:
        return
    if not ok and cert is not None:
        print("separating score certificate:", file=sys.stderr)
        print(f"  lambda_i = {[round(float(v), 6) for v in cert['lambda_i']]}", file=sys.stderr)
        print(f"  mu_t = {[round(float(v), 6) for v in cert['mu_t']]}", file=sys.stderr)
        print(f"  gamma = {[round(float(v), 6) for v in cert['gamma']]}", file=sys.stderr)


def _write_sample_weights(data: PanelDataset, weights, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("unit,time,omega\n")
        for i in range(data.n_units):
            for t in range(data.n_periods):
                fh.write(f"{data.unit_ids[i]},{t + 1},{float(weights[i, t])!r}\n")


def _cmd_estimate(args) -> int:
    data, stat, basis, config = _load_estimation_inputs(args)
    try:
        result = estimator.estimate(data, basis, stat, config)
    except estimator.NoOverlapError:
        print("estimation failed: no overlap", file=sys.stderr)
        _print_certificate(data, basis, stat)
        raise
    rows = [
        ["tau_hat", _fmt(result.tau_hat)],
        ["normalizer", _fmt(result.normalizer)],
        ["objective", _fmt(result.diagnostics.objective)],
        ["iterations", str(result.diagnostics.iterations)],
        ["grad_norm", _fmt(result.diagnostics.grad_norm)],
    ]
    summary = {
        "tau_hat": result.tau_hat,
        "normalizer": result.normalizer,
        "objective": result.diagnostics.objective,
        "iterations": result.diagnostics.iterations,
        "grad_norm": result.diagnostics.grad_norm,
    }
    if args.bootstrap:
        boot = inference.bootstrap(
            data, basis, stat, config,
            b_reps=args.bootstrap, seed=args.seed, ci_level=args.level,
        )
        rows += [
            ["sigma2_hat", _fmt(boot.sigma2_hat)],
            ["ci_low", _fmt(boot.ci[0])],
            ["ci_high", _fmt(boot.ci[1])],
            ["n_failed", str(boot.n_failed)],
        ]
        summary.update(
            sigma2_hat=boot.sigma2_hat,
            ci_low=boot.ci[0],
            ci_high=boot.ci[1],
            n_failed=boot.n_failed,
            ci_level=boot.ci_level,
            seed=boot.seed,
        )
    _print_table(rows)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write("key,value\n")
            for key, value in summary.items():
                fh.write(f"{key},{value!r}\n")
    if args.weights_out:
        _write_sample_weights(data, result.weights.weights, args.weights_out)
    return 0


def _cmd_bootstrap(args) -> int:
    data, stat, basis, config = _load_estimation_inputs(args)
    result = inference.bootstrap(
        data, basis, stat, config,
        b_reps=args.b, seed=args.seed, ci_level=args.level,
    )
    _print_table(
        [
            ["tau_hat", _fmt(result.tau_hat)],
            ["sigma2_hat", _fmt(result.sigma2_hat)],
            ["ci_low", _fmt(result.ci[0])],
            ["ci_high", _fmt(result.ci[1])],
            ["n_failed", str(result.n_failed)],
        ]
    )
    if args.out:
        inference.write_bootstrap_csv(result, args.out)
    return 0


def _cmd_simulate(args) -> int:
    spec = mc.DgpSpec(
        assignment=args.assignment,
        outcome=args.outcome,
        effect=args.effect,
        tau=args.tau,
        n=args.n,
        t_len=args.t,
        noise=args.noise,
        seed=args.seed,
    )
    drawn = mc.draw_panel(spec, rep=0)
    covariates = None if drawn["x"] is None else drawn["x"][:, None]
    data = PanelDataset(
        outcomes=drawn["y"], treatments=drawn["w"], covariates=covariates
    )
    write_panel(data, args.out)
    if args.latents_out:
        stats.write_latents(args.latents_out, drawn["latent"])
    print(f"wrote {spec.n} units x {spec.t_len} periods to {args.out}")
    return 0


def _cmd_experiment(args) -> int:
    spec, options = mc.parse_experiment_config(args.config)
    results = mc.run_experiment(
        spec,
        estimators=options["estimators"],
        reps=options["reps"],
        bootstrap_b=options["bootstrap_b"],
        ci_level=options["ci_level"],
    )
    print(mc.format_experiment_summary(results))
    if args.out:
        mc.write_experiment_csv(results, args.out)
    return 0


def _build_parser() -> _Parser:
    parser = _Parser(prog="drpanel", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fe-weights", help="population two-way FE weights of a support")
    p.add_argument("--support", required=True)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_fe_weights)

    p = sub.add_parser("dr-weights", help="minimum-norm member of a weight set")
    p.add_argument("--support", required=True)
    p.add_argument("--stat", default="mean")
    p.add_argument("--schedule")
    p.add_argument("--set", default="dr", choices=("outc", "design", "dr"))
    p.add_argument("--out")
    p.set_defaults(func=_cmd_dr_weights)

    p = sub.add_parser("feasibility", help="is a weight set nonempty over a support")
    p.add_argument("--support", required=True)
    p.add_argument("--set", default="dr", choices=("outc", "design", "dr"))
    p.add_argument("--stat", default="mean")
    p.add_argument("--schedule")
    p.set_defaults(func=_cmd_feasibility)

    p = sub.add_parser("stats", help="sufficient statistic values and strata")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--support")
    group.add_argument("--data")
    p.add_argument("--stat", default="mean")
    p.add_argument("--schedule")
    p.set_defaults(func=_cmd_stats)

    def estimation_flags(p):
        p.add_argument("--data", required=True)
        p.add_argument("--stat", default="mean")
        p.add_argument("--schedule")
        p.add_argument("--basis")
        p.add_argument("--config")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--level", type=float, default=0.95)

    p = sub.add_parser("estimate", help="fit the dual program and report tau_hat")
    estimation_flags(p)
    p.add_argument("--bootstrap", type=int, default=0)
    p.add_argument("--check-overlap", action="store_true", dest="check_overlap")
    p.add_argument("--out")
    p.add_argument("--weights-out", dest="weights_out")
    p.set_defaults(func=_cmd_estimate)

    p = sub.add_parser("bootstrap", help="unit-level bootstrap variance and CI")
    estimation_flags(p)
    p.add_argument("--b", type=int, default=400)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_bootstrap)

    p = sub.add_parser("simulate", help="draw one synthetic panel to CSV")
    p.add_argument("--assignment", required=True, choices=mc.ASSIGNMENTS)
    p.add_argument("--outcome", required=True, choices=mc.OUTCOMES)
    p.add_argument("--effect", default="constant", choices=mc.EFFECTS)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--t", type=int, required=True)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--latents-out", dest="latents_out")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("experiment", help="run a Monte Carlo experiment from config")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_experiment)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 64
    except (ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (
        estimator.NoOverlapError,
        estimator.ConvergenceError,
        support.InfeasibleSystemError,
        inference.UnstableBootstrapError,
        QpError,
    ) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
