"""Paired-run replicability measurement, run records and experiment suites.

Trial ``t`` of a paired run on estimator ``e`` derives its streams from
``SeedStream(seed, ("paired", e, "trial-t"))``:

* ``.../internal`` is shared by both executions (or ``.../internal/1`` and
  ``.../internal/2`` for estimators that use independent randomness);
* ``.../external/1`` and ``.../external/2`` feed the two generative models.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import estimators as est
from .divergences import (
    GaussianVector, kl_gaussian_isotropic, renyi_finite, tv_gaussian_isotropic,
)
from .gaussian_sq import (
    DEFAULT_BOX_SIGMAS, DEFAULT_MAX_ATOMS, MAX_COUPLING_DIM, TruncationBox,
    coordinatewise_coupled_sample, coupling_disagreement_bound, ppp_coupled_sample,
)
from .mdp import (
    LowerBoundFamilySpec, Policy, QTable, TabularMdp, build_lower_bound_mdp,
    exact_policy_evaluation, exact_value_iteration, load_mdp, q_from_v, random_mdp,
)
from .sampling import GenerativeModel, SeedStream
from .stats import wilson_interval

CONFIG_VERSION = 1
SUMMARY_COLUMNS = ["experiment", "estimator", "N", "gamma", "epsilon", "rho", "delta",
                   "samples_total", "agreement_rate", "accuracy_rate"]


class ConfigError(ValueError):
    """Malformed experiment configuration."""


@dataclass(frozen=True)
class Estimator:
    name: str
    notion: str  # exact | tv_certificate | approx
    output: str  # q | policy
    run: Callable[..., Any]
    budget: Callable[[TabularMdp, dict], int]
    independent_internal: bool = False


def _p(params: dict, *names: str) -> list:
    try:
        return [params[n] for n in names]
    except KeyError as exc:
        raise ConfigError(f"missing estimator parameter {exc.args[0]!r}") from None


def _run_exact(g, internal, params, trace):
    return exact_value_iteration(g.mdp, params.get("tol", 1e-9))


def _run_naive(g, internal, params, trace):
    return est.naive_q(g, *_p(params, "epsilon0", "delta0"))


def _run_tv_q(g, internal, params, trace):
    return est.tv_ind_q(g, *_p(params, "epsilon", "rho", "delta"), internal, trace=trace)


def _run_tv_policy(g, internal, params, trace):
    return est.tv_ind_policy(g, *_p(params, "epsilon", "rho", "delta"), internal, trace=trace)


def evaluation_policy(mdp: TabularMdp, params: dict) -> Policy:
    """The policy named by ``params["policy"]``; uniform over actions by default."""
    policy = params.get("policy")
    if policy is None:
        return Policy.stochastic([np.full(len(a), 1 / len(a)) for a in mdp.actions])
    if isinstance(policy, dict):
        return Policy.from_json(policy)
    return policy


def _run_policy_eval(g, internal, params, trace):
    eps, rho, delta = _p(params, "epsilon", "rho", "delta")
    return est.replicable_policy_evaluation(g, evaluation_policy(g.mdp, params), eps, rho, delta,
                                            internal)


def _erd(fn):
    def budget(mdp, params):
        return fn(mdp, *_p(params, "epsilon", "rho", "delta"))
    return budget


def _approx_budget(mdp, params):
    return est.approx_replicable_budget(mdp, *_p(params, "epsilon", "rho1", "rho2", "delta"),
                                        params.get("alpha", 2.0))


ESTIMATORS: dict[str, Estimator] = {e.name: e for e in [
    Estimator("exact", "exact", "q", _run_exact, lambda mdp, p: 0),
    Estimator("naive_q", "exact", "q", _run_naive,
              lambda mdp, p: est.plugin_q_budget(mdp, est.QOracleConfig(p["epsilon0"], p["delta0"]))),
    Estimator("replicable_q", "exact", "q",
              lambda g, i, p, t: est.replicable_q(g, *_p(p, "epsilon", "rho", "delta"), i),
              _erd(est.replicable_q_budget)),
    Estimator("replicable_policy", "exact", "policy",
              lambda g, i, p, t: est.replicable_policy(g, *_p(p, "epsilon", "rho", "delta"), i),
              _erd(est.replicable_policy_budget)),
    Estimator("tv_ind_q", "tv_certificate", "q", _run_tv_q, _erd(est.tv_ind_q_budget)),
    Estimator("tv_ind_policy", "tv_certificate", "policy", _run_tv_policy,
              _erd(est.tv_ind_policy_budget)),
    Estimator("coupled_q", "exact", "q",
              lambda g, i, p, t: est.replicable_q_via_coupling(
                  g, *_p(p, "epsilon", "rho", "delta"), i),
              _erd(est.replicable_q_via_coupling_budget)),
    Estimator("coupled_policy", "exact", "policy",
              lambda g, i, p, t: est.replicable_policy_via_coupling(
                  g, *_p(p, "epsilon", "rho", "delta"), i),
              lambda mdp, p: est.replicable_q_via_coupling_budget(
                  mdp, (1 - mdp.gamma) * p["epsilon"], p["rho"], p["delta"])),
    Estimator("approx_policy", "approx", "policy",
              lambda g, i, p, t: est.approx_replicable_policy(
                  g, *_p(p, "epsilon", "rho1", "rho2", "delta"), p.get("alpha", 2.0), trace=t),
              _approx_budget, independent_internal=True),
    Estimator("policy_evaluation", "exact", "q", _run_policy_eval,
              _erd(est.replicable_policy_evaluation_budget)),
]}


def get_estimator(name: str) -> Estimator:
    try:
        return ESTIMATORS[name]
    except KeyError:
        raise ConfigError(f"unknown estimator {name!r}; known: {', '.join(ESTIMATORS)}") from None


def same_output(a, b) -> bool:
    """Bit-wise equality of tables, element-wise equality of policies."""
    return a.same_as(b)


def max_renyi(p1: Policy, p2: Policy, alpha: float) -> float:
    return max(renyi_finite(a, b, alpha) for a, b in zip(p1.probs, p2.probs))


def reference_q(mdp: TabularMdp, estimator: Estimator, params: dict) -> QTable:
    """What the estimator's output is judged against: Q^pi for evaluation, else Q*."""
    if estimator.name == "policy_evaluation":
        policy = evaluation_policy(mdp, params)
        return q_from_v(mdp, exact_policy_evaluation(mdp, policy, 1e-12))
    return exact_value_iteration(mdp, 1e-10)


def _accuracy_ok(mdp: TabularMdp, out, estimator: Estimator, params: dict,
                 reference: QTable) -> bool:
    eps = params.get("epsilon", params.get("epsilon0"))
    if eps is None:
        return True
    if estimator.output == "q":
        return bool(np.max(np.abs(out.values - reference.values)) <= eps)
    return est.value_loss(mdp, out, reference.state_values()) <= eps


def trial_streams(root_seed: int, estimator: str, t: int,
                  independent: bool) -> tuple[SeedStream, SeedStream, SeedStream, SeedStream]:
    base = SeedStream(root_seed, ("paired", estimator, f"trial-{t}"))
    if independent:
        int1, int2 = base.child("internal", 1), base.child("internal", 2)
    else:
        int1 = int2 = base.split("internal")
    return int1, int2, base.child("external", 1), base.child("external", 2)


def stream_templates(estimator: str, independent: bool) -> list[str]:
    inner = ["internal/1", "internal/2"] if independent else ["internal"]
    return [f"paired/{estimator}/trial-<t>/{x}" for x in inner + ["external/1", "external/2"]]


@dataclass
class ReplicabilityReport:
    estimator: str
    notion: str
    trials: int
    agreements: int
    agreement_rate: float
    wilson_ci: tuple[float, float]
    accuracy_hits: int
    accuracy_rate: float
    parameters: dict
    root_seed: int
    num_pairs: int
    gamma: float
    samples_per_run: int
    ledger_totals: list[int] = field(default_factory=list)
    stream_paths: list[str] = field(default_factory=list)
    alpha: float | None = None
    rho1: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["wilson_ci"] = list(self.wilson_ci)
        return d


def paired_run(estimator: str, mdp: TabularMdp, params: dict, trials: int,
               root_seed: int, min_trials: int = 30) -> ReplicabilityReport:
    """Run ``estimator`` twice per trial on independent data and count agreements.

    exact notion: outputs identical. tv_certificate: the closed-form KL between the two
    output densities is at most rho^2. approx: max_s D_alpha(pi(s) || pi'(s)) <= rho1.
    """
    e = get_estimator(estimator)
    if trials < min_trials:
        raise ConfigError(f"need at least {min_trials} trials")
    params = dict(params)
    reference = reference_q(mdp, e, params)
    agreements = accurate = 0
    totals: list[int] = []
    alpha = float(params.get("alpha", 2.0))
    for t in range(trials):
        int1, int2, ext1, ext2 = trial_streams(root_seed, estimator, t, e.independent_internal)
        g1, g2 = GenerativeModel(mdp, ext1), GenerativeModel(mdp, ext2)
        tr1: dict = {}
        tr2: dict = {}
        out1 = e.run(g1, int1, params, tr1)
        out2 = e.run(g2, int2, params, tr2)
        totals += [g1.ledger.total, g2.ledger.total]
        if e.notion == "exact":
            agree = same_output(out1, out2)
        elif e.notion == "tv_certificate":
            var = tr1["variance"]
            kl = kl_gaussian_isotropic(GaussianVector(tr1["means"], var),
                                       GaussianVector(tr2["means"], var))
            agree = kl <= params["rho"] ** 2
        else:
            if "q" in tr1 and "q" in tr2:
                div = est.softmax_renyi(tr1["q"], tr2["q"], tr1["lam"], alpha)
            else:
                div = max_renyi(out1, out2, alpha)
            agree = div <= params["rho1"]
        agreements += bool(agree)
        accurate += _accuracy_ok(mdp, out1, e, params, reference)
    rate = agreements / trials
    return ReplicabilityReport(
        estimator=estimator, notion=e.notion, trials=trials, agreements=agreements,
        agreement_rate=rate, wilson_ci=wilson_interval(agreements, trials),
        accuracy_hits=accurate, accuracy_rate=accurate / trials,
        parameters={k: v for k, v in params.items() if k != "policy"},
        root_seed=root_seed, num_pairs=mdp.num_pairs, gamma=mdp.gamma,
        samples_per_run=totals[0] if totals else 0, ledger_totals=totals,
        stream_paths=stream_templates(estimator, e.independent_internal),
        alpha=alpha if e.notion == "approx" else None,
        rho1=params.get("rho1") if e.notion == "approx" else None,
    )


# mdp sources and suites

def mdp_from_source(source: dict, base_dir: Path | None = None) -> TabularMdp:
    """``{"file": path}``, ``{"random": {...}}`` or ``{"family": {...}}``."""
    if not isinstance(source, dict) or len(source) != 1:
        raise ConfigError("mdp source must be a single-key object")
    kind, spec = next(iter(source.items()))
    try:
        if kind == "file":
            path = Path(spec)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            if not path.exists():
                raise ConfigError(f"MDP file {path} does not exist")
            return load_mdp(path)
        if kind == "random":
            rng = SeedStream(int(spec.get("seed", 0)), ("mdp",)).generator()
            return random_mdp(rng, int(spec["states"]), int(spec["actions"]),
                              float(spec.get("gamma", 0.9)))
        if kind == "family":
            return build_lower_bound_mdp(LowerBoundFamilySpec(
                int(spec["K"]), int(spec["L"]), float(spec["gamma"]), np.asarray(spec["p"])))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad mdp source {source!r}: {exc}") from None
    raise ConfigError(f"unknown mdp source kind {kind!r}")


@dataclass
class RunRecord:
    command: str
    config: dict
    root_seed: int
    started: str
    finished: str
    status: str
    outputs: dict
    ledger: dict
    wall_ms: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        return cls(**json.loads(text))


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def validate_config(config: Any) -> list[dict]:
    if not isinstance(config, dict):
        raise ConfigError("config must be a JSON object")
    if config.get("version", CONFIG_VERSION) != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {config.get('version')!r}")
    exps = config.get("experiments", [])
    if not isinstance(exps, list):
        raise ConfigError("experiments must be a list")
    names = set()
    for i, exp in enumerate(exps):
        if not isinstance(exp, dict):
            raise ConfigError(f"experiment {i} must be an object")
        for key in ("estimator", "mdp"):
            if key not in exp:
                raise ConfigError(f"experiment {i} lacks {key!r}")
        get_estimator(exp["estimator"])
        name = exp.setdefault("name", f"exp-{i}")
        if name in names:
            raise ConfigError(f"duplicate experiment name {name!r}")
        names.add(name)
    return exps


def _run_experiment(exp: dict, seed: int, base_dir: str | None) -> tuple[dict, RunRecord]:
    started = utc_now()
    t0 = time.perf_counter()
    row: dict = {"experiment": exp["name"], "estimator": exp["estimator"]}
    params = exp.get("params", {})
    try:
        mdp = mdp_from_source(exp["mdp"], Path(base_dir) if base_dir else None)
        exp_seed = int(exp.get("seed", seed))
        report = paired_run(exp["estimator"], mdp, params, int(exp.get("trials", 30)), exp_seed)
        row.update(N=mdp.num_pairs, gamma=mdp.gamma, epsilon=params.get("epsilon", ""),
                   rho=params.get("rho", params.get("rho1", "")), delta=params.get("delta", ""),
                   samples_total=report.samples_per_run, agreement_rate=report.agreement_rate,
                   accuracy_rate=report.accuracy_rate)
        status, outputs, ledger = "ok", report.to_dict(), {"per_run": report.ledger_totals}
    except Exception as exc:  # isolate failures per experiment
        status, outputs, ledger = "failed", {"error": f"{type(exc).__name__}: {exc}"}, {}
        row.update({c: "" for c in SUMMARY_COLUMNS if c not in row})
        row["agreement_rate"] = "failed"
    wall = (time.perf_counter() - t0) * 1000
    rec = RunRecord("suite", exp, int(exp.get("seed", seed)), started, utc_now(), status, outputs,
                    ledger, wall)
    return row, rec


def run_suite(config: dict, out_dir: str | Path | None = None, workers: int = 1,
              base_dir: str | Path | None = None) -> tuple[list[RunRecord], str]:
    """Run every experiment; returns the records and the summary CSV text.

    The summary is a pure function of (config, seed); wall times live in the run
    records and in ``timings.csv``.
    """
    exps = validate_config(config)
    seed = int(config.get("seed", 0))
    bd = str(base_dir) if base_dir is not None else None
    if workers > 1 and len(exps) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_experiment, exps, [seed] * len(exps), [bd] * len(exps)))
    else:
        results = [_run_experiment(exp, seed, bd) for exp in exps]
    rows = [r for r, _ in results]
    records = [rec for _, rec in results]
    summary = summary_csv(rows)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.csv").write_text(summary)
        with open(out / "records.jsonl", "a") as fh:
            for rec in records:
                fh.write(rec.to_json() + "\n")
        timing = io.StringIO()
        w = csv.writer(timing, lineterminator="\n")
        w.writerow(["experiment", "wall_ms"])
        for rec in records:
            w.writerow([rec.config["name"], f"{rec.wall_ms:.1f}"])
        (out / "timings.csv").write_text(timing.getvalue())
    return records, summary


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x) if math.isfinite(x) else str(x)
    return str(x)


def summary_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for row in rows:
        w.writerow([_fmt(row.get(c, "")) for c in SUMMARY_COLUMNS])
    return buf.getvalue()


def suite_failed(records: list[RunRecord]) -> bool:
    return any(r.status != "ok" for r in records)


# coupling diagnostic: joint versus coordinate-wise coupling

@dataclass
class CouplingDiagnostic:
    dim: int
    gap_sigmas: float
    trials: int
    joint_tv: float
    joint_bound: float
    joint_disagreement: float | None
    coordinate_disagreement: float
    coordinate_ci: tuple[float, float]
    joint_method: str

    def to_dict(self) -> dict:
        d = asdict(self)
        d["coordinate_ci"] = list(self.coordinate_ci)
        return d


def coupling_diagnostic(dim: int, gap_sigmas: float, trials: int, stream: SeedStream,
                        box_sigmas: float = DEFAULT_BOX_SIGMAS,
                        max_atoms: int = DEFAULT_MAX_ATOMS) -> CouplingDiagnostic:
    """Disagreement of two unit-variance Gaussians whose means differ by ``gap_sigmas``
    in every coordinate, coupled jointly and coordinate by coordinate.

    The joint coupling is simulated when ``dim`` is within the coupling limit and
    otherwise reported through its exact bound 2 TV / (1 + TV).
    """
    if dim < 1 or trials < 1:
        raise ConfigError("dim and trials must be positive")
    mu1, mu2 = np.zeros(dim), np.full(dim, float(gap_sigmas))
    p, q = GaussianVector(mu1, 1.0), GaussianVector(mu2, 1.0)
    box = TruncationBox.around_range(min(0.0, gap_sigmas), max(0.0, gap_sigmas), dim, 1.0,
                                     box_sigmas)
    tv = tv_gaussian_isotropic(p, q)
    joint_hits = coord_hits = 0
    simulate_joint = dim <= MAX_COUPLING_DIM
    for t in range(trials):
        s = stream.split(f"trial-{t}")
        a = coordinatewise_coupled_sample(p, box, s.split("coordinatewise"))
        b = coordinatewise_coupled_sample(q, box, s.split("coordinatewise"))
        coord_hits += bool(np.any(a != b))
        if simulate_joint:
            x = ppp_coupled_sample(p, box, s.split("joint"), max_atoms=max_atoms)
            y = ppp_coupled_sample(q, box, s.split("joint"), max_atoms=max_atoms)
            joint_hits += bool(np.any(x != y))
    return CouplingDiagnostic(
        dim=dim, gap_sigmas=float(gap_sigmas), trials=trials, joint_tv=tv,
        joint_bound=coupling_disagreement_bound(tv),
        joint_disagreement=joint_hits / trials if simulate_joint else None,
        coordinate_disagreement=coord_hits / trials,
        coordinate_ci=wilson_interval(coord_hits, trials),
        joint_method="monte_carlo" if simulate_joint else "exact_bound",
    )
