"""Command-line front end: ``replicable-rl <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 experiment failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import coin_lab
from .estimators import BudgetError
from .experiments import (
    ESTIMATORS, ConfigError, RunRecord, coupling_diagnostic, evaluation_policy, get_estimator,
    mdp_from_source, paired_run, run_suite, suite_failed, utc_now,
)
from .gaussian_sq import DEFAULT_BOX_SIGMAS, DEFAULT_MAX_ATOMS, CouplingError
from .mdp import MdpError, Policy, QTable, TabularMdp, exact_value_iteration, greedy_policy
from .replicable_sq import SqParams, round_mean
from .sampling import GenerativeModel, SeedStream

EXIT_OK, EXIT_CONFIG, EXIT_FAILURE = 0, 2, 3

Q_ESTIMATORS = ["naive_q", "replicable_q", "tv_ind_q", "coupled_q"]
POLICY_ESTIMATORS = ["replicable_policy", "tv_ind_policy", "coupled_policy", "approx_policy"]


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # shared flags are accepted before or after the subcommand
    p = argparse.ArgumentParser(add_help=False)
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--seed", type=int, default=d(0), help="root seed (default 0)")
    p.add_argument("--mdp", default=d(None),
                   help="MDP JSON file, or random:S:A:GAMMA[:SEED] for a random instance")
    p.add_argument("--out", default=d(None), help="directory for outputs and run records")
    p.add_argument("--format", choices=["json", "csv"], default=d(None))
    return p


def _estimator_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epsilon", type=float, default=0.3)
    p.add_argument("--rho", type=float, default=0.3)
    p.add_argument("--delta", type=float, default=0.05)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="replicable-rl", parents=[_global_flags(False)],
                                     description="Replicable Q-function and policy estimation.")
    sub = parser.add_subparsers(dest="command", required=True)
    common = [_global_flags(True)]

    sub.add_parser("solve", parents=common, help="exact Q*, V* and greedy policy")

    p = sub.add_parser("estimate-q", parents=common, help="one run of a Q estimator")
    p.add_argument("--estimator", choices=Q_ESTIMATORS, default="replicable_q")
    _estimator_flags(p)

    p = sub.add_parser("estimate-policy", parents=common, help="one run of a policy estimator")
    p.add_argument("--estimator", choices=POLICY_ESTIMATORS, default="replicable_policy")
    _estimator_flags(p)
    p.add_argument("--rho1", type=float, default=0.5)
    p.add_argument("--rho2", type=float, default=0.1)
    p.add_argument("--alpha", type=float, default=2.0)

    p = sub.add_parser("evaluate-policy", parents=common, help="replicable estimate of Q^pi")
    p.add_argument("--policy", help="policy JSON file (default: uniform)")
    _estimator_flags(p)

    p = sub.add_parser("coin", parents=common, help="acceptance curve of a single-coin rule")
    p.add_argument("--classifier", choices=["naive", "replicable"], default="naive")
    p.add_argument("--q", type=float, default=0.75)
    p.add_argument("--epsilon", type=float, default=0.2)
    p.add_argument("--rho", type=float, default=0.3)
    p.add_argument("--delta", type=float, default=0.05)
    p.add_argument("--m", type=int, default=1000)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--p-min", type=float, default=0.0)
    p.add_argument("--p-max", type=float, default=1.0)
    p.add_argument("--points", type=int, default=21)

    p = sub.add_parser("paired", parents=common, help="paired-run replicability measurement")
    p.add_argument("--estimator", choices=list(ESTIMATORS), required=True)
    p.add_argument("--trials", type=int, default=30)
    p.add_argument("--params", default="{}",
                   help='estimator parameters as JSON, e.g. \'{"epsilon": 0.3, "rho": 0.3}\'')

    p = sub.add_parser("suite", parents=common, help="run a JSON experiment suite")
    p.add_argument("config")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("coupling", parents=common,
                       help="joint versus coordinate-wise coupling diagnostic")
    p.add_argument("--coupling-dim", type=int, default=4)
    p.add_argument("--atoms", type=int, default=DEFAULT_MAX_ATOMS, help="atom budget limit")
    p.add_argument("--box-sigmas", type=float, default=DEFAULT_BOX_SIGMAS)
    p.add_argument("--gap", type=float, default=0.1, help="per-coordinate mean gap in sigmas")
    p.add_argument("--trials", type=int, default=200)
    return parser


def _load_mdp(spec: str | None) -> TabularMdp:
    if spec is None:
        raise ConfigError("this command needs --mdp")
    if spec.startswith("random:"):
        parts = spec.split(":")[1:]
        if len(parts) not in (3, 4):
            raise ConfigError("random MDP spec is random:S:A:GAMMA[:SEED]")
        src = {"random": {"states": int(parts[0]), "actions": int(parts[1]),
                          "gamma": float(parts[2]),
                          "seed": int(parts[3]) if len(parts) == 4 else 0}}
        return mdp_from_source(src)
    return mdp_from_source({"file": spec})


def _table_csv(mdp: TabularMdp, q: QTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["state", "action", "value"])
    for s, a in mdp.pairs():
        w.writerow([s, a, repr(float(q.values[mdp.pair_index(s, a)]))])
    return buf.getvalue()


def _policy_csv(mdp: TabularMdp, policy: Policy) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["state", "action", "probability"])
    probs = policy.pair_probs(mdp)
    for s, a in mdp.pairs():
        w.writerow([s, a, repr(float(probs[mdp.pair_index(s, a)]))])
    return buf.getvalue()


def _rows_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return buf.getvalue()


class _Emitter:
    """Writes the primary output to stdout or ``--out`` and appends the run record."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.started = utc_now()
        self.t0 = time.perf_counter()

    def emit(self, text: str, name: str, outputs: dict, ledger: dict | None = None,
             status: str = "ok") -> None:
        out = self.args.out
        if out is None:
            sys.stdout.write(text if text.endswith("\n") else text + "\n")
            return
        d = Path(out)
        d.mkdir(parents=True, exist_ok=True)
        (d / name).write_text(text if text.endswith("\n") else text + "\n")
        config = {k: v for k, v in vars(self.args).items() if k != "out"}
        rec = RunRecord(self.args.command, config, self.args.seed, self.started, utc_now(), status,
                        outputs, ledger or {}, (time.perf_counter() - self.t0) * 1000)
        with open(d / "records.jsonl", "a") as fh:
            fh.write(rec.to_json() + "\n")


def _fmt(args, default: str) -> str:
    return args.format or default


def _run_one(args, estimator: str, params: dict, em: _Emitter) -> None:
    mdp = _load_mdp(args.mdp)
    e = get_estimator(estimator)
    root = SeedStream(args.seed, (args.command, estimator))
    g = GenerativeModel(mdp, root.split("external"))
    out = e.run(g, root.split("internal"), params, None)
    ledger = {"total": g.ledger.total, "per_pair": g.ledger.counts.tolist()}
    if isinstance(out, Policy):
        payload = {"estimator": estimator, "policy": out.to_json(), "samples": g.ledger.total}
        text = _policy_csv(mdp, out) if _fmt(args, "json") == "csv" else json.dumps(payload)
    else:
        payload = {"estimator": estimator, "q": out.values.tolist(), "samples": g.ledger.total}
        text = _table_csv(mdp, out) if _fmt(args, "json") == "csv" else json.dumps(payload)
    em.emit(text, f"{args.command}.{_fmt(args, 'json')}", payload, ledger)


def cmd_solve(args, em: _Emitter) -> int:
    mdp = _load_mdp(args.mdp)
    q = exact_value_iteration(mdp)
    pol = greedy_policy(q, mdp.actions)
    payload = {"q": q.values.tolist(), "v": q.state_values().tolist(), "policy": pol.to_json()}
    text = _table_csv(mdp, q) if _fmt(args, "json") == "csv" else json.dumps(payload)
    em.emit(text, f"solve.{_fmt(args, 'json')}", payload)
    return EXIT_OK


def cmd_estimate(args, em: _Emitter) -> int:
    params = {"epsilon": args.epsilon, "rho": args.rho, "delta": args.delta}
    if args.estimator == "naive_q":
        params = {"epsilon0": args.epsilon, "delta0": args.delta}
    elif args.estimator == "approx_policy":
        params = {"epsilon": args.epsilon, "rho1": args.rho1, "rho2": args.rho2,
                  "delta": args.delta, "alpha": args.alpha}
    _run_one(args, args.estimator, params, em)
    return EXIT_OK


def cmd_evaluate(args, em: _Emitter) -> int:
    params: dict = {"epsilon": args.epsilon, "rho": args.rho, "delta": args.delta}
    if args.policy:
        path = Path(args.policy)
        if not path.exists():
            raise ConfigError(f"policy file {path} does not exist")
        params["policy"] = Policy.from_json(json.loads(path.read_text()))
    mdp = _load_mdp(args.mdp)
    evaluation_policy(mdp, params).validate(mdp)
    _run_one(args, "policy_evaluation", params, em)
    return EXIT_OK


def _coin_rule(args) -> coin_lab.SingleCoinRule:
    threshold = args.q - args.epsilon / 2
    if args.classifier == "naive":
        return coin_lab.threshold_rule(threshold)
    params = SqParams(args.epsilon / 2, args.rho, args.delta)
    # one fixed internal realization, so the rule is a deterministic function of data
    internal = SeedStream(args.seed, ("coin", "internal"))

    def rule(p: float, m: int, data: SeedStream) -> bool:
        mean = coin_lab.coin_heads(data.generator(), p, m) / m
        return round_mean(mean, params, internal) > threshold
    return rule


def cmd_coin(args, em: _Emitter) -> int:
    if args.points < 2 or args.trials < 1 or args.m < 1:
        raise ConfigError("need points >= 2, trials >= 1 and m >= 1")
    if not 0 <= args.p_min < args.p_max <= 1:
        raise ConfigError("need 0 <= p-min < p-max <= 1")
    grid = np.linspace(args.p_min, args.p_max, args.points)
    points = coin_lab.acceptance_curve(_coin_rule(args), grid, args.m, args.trials,
                                       SeedStream(args.seed, ("coin", "data")))
    rows = [asdict(pt) for pt in points]
    payload = {"points": rows, "max_slope": coin_lab.max_slope(points)}
    text = _rows_csv(rows) if _fmt(args, "csv") == "csv" else json.dumps(payload)
    em.emit(text, f"coin.{_fmt(args, 'csv')}", payload)
    return EXIT_OK


def cmd_paired(args, em: _Emitter) -> int:
    try:
        params = json.loads(args.params)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--params is not valid JSON: {exc}") from None
    if not isinstance(params, dict):
        raise ConfigError("--params must be a JSON object")
    report = paired_run(args.estimator, _load_mdp(args.mdp), params, args.trials, args.seed)
    payload = report.to_dict()
    if _fmt(args, "json") == "csv":
        row = {k: v for k, v in payload.items() if not isinstance(v, (list, dict))}
        row["ci_low"], row["ci_high"] = report.wilson_ci
        text = _rows_csv([row])
    else:
        text = json.dumps(payload)
    em.emit(text, f"paired.{_fmt(args, 'json')}", payload,
            {"per_run": report.ledger_totals})
    return EXIT_OK


def cmd_suite(args, em: _Emitter) -> int:
    path = Path(args.config)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        config = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if isinstance(config, dict) and "seed" not in config:
        config["seed"] = args.seed
    records, summary = run_suite(config, args.out, args.workers, base_dir=path.parent)
    if args.out is None or _fmt(args, "csv") == "csv":
        sys.stdout.write(summary)
    else:
        sys.stdout.write(json.dumps([json.loads(r.to_json()) for r in records]) + "\n")
    for r in records:
        if r.status != "ok":
            print(f"experiment {r.config['name']} failed: {r.outputs['error']}", file=sys.stderr)
    return EXIT_FAILURE if suite_failed(records) else EXIT_OK


def cmd_coupling(args, em: _Emitter) -> int:
    diag = coupling_diagnostic(args.coupling_dim, args.gap, args.trials,
                               SeedStream(args.seed, ("coupling",)), args.box_sigmas,
                               args.atoms)
    payload = diag.to_dict()
    if _fmt(args, "json") == "csv":
        row = {k: v for k, v in payload.items() if not isinstance(v, list)}
        text = _rows_csv([row])
    else:
        text = json.dumps(payload)
    em.emit(text, f"coupling.{_fmt(args, 'json')}", payload)
    return EXIT_OK


COMMANDS = {
    "solve": cmd_solve, "estimate-q": cmd_estimate, "estimate-policy": cmd_estimate,
    "evaluate-policy": cmd_evaluate, "coin": cmd_coin, "paired": cmd_paired,
    "suite": cmd_suite, "coupling": cmd_coupling,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        return COMMANDS[args.command](args, _Emitter(args))
    except (ConfigError, MdpError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CouplingError, BudgetError, RuntimeError, ArithmeticError) as exc:
        print(f"experiment failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
