"""Command-line harness: ``tracelab --experiment ... --mdp ... --out file.csv``.

Every random draw derives from ``--seed`` through a per-component stream
(see ``component_rng``), so the same flags always produce the same CSV.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from tracelab import control, engine, learner
from tracelab.mdp import (
    BUILTIN_MDPS,
    FiniteMdp,
    UsageError,
    check_policy,
    exact_q_pi,
    generate_random_mdp,
    load_mdp,
    uniform_policy,
)
from tracelab.traces import DomainError, TraceStrategy, UnsupportedStrategyError, parse_strategy

EXPERIMENTS = ("evaluate_operator", "contraction_suite", "learn", "control")

SUITE_STRATEGIES = (
    "is",
    "truncated_is:d=1",
    "tree_backup:lambda=0.9",
    "retrace:lambda=0.9",
    "nonmarkov_retrace:lambda=0.9",
    "qlambda_opc:lambda=0.9",
    "composite_glr:lambda=0.9,gamma=0.95",
)

SCHEMAS = {
    "evaluate_operator": ("state", "action", "q", "mq", "q_pi", "tail_bound", "horizon"),
    "contraction_suite": (
        "strategy", "gamma", "norm_before", "norm_after", "map_norm", "lemma2_norm", "admissible",
    ),
    "learn": ("episode", "sup_norm_error", "steps"),
    "control": ("k", "err", "epsilon", "bound_rhs", "bound_ok"),
}


@dataclass(frozen=True)
class ExperimentSpec:
    experiment: str
    mdp: str
    strategy: str
    target: str
    behavior: str
    tol: float
    seed: int
    out: str | None
    iterations: int
    episodes: int


def component_rng(seed: int, component: str) -> np.random.Generator:
    """Independent stream per named component: (root seed, crc32(component))."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(zlib.crc32(component.encode()),)))


def resolve_mdp(source: str) -> FiniteMdp:
    """``chain2``, ``chain2_episodic``, ``garnet:ns,na,b,scale[,gamma[,seed]]`` or a JSON file."""
    if source in BUILTIN_MDPS:
        return BUILTIN_MDPS[source]()
    if source.startswith("garnet:"):
        fields = source.split(":", 1)[1].split(",")
        if not 4 <= len(fields) <= 6:
            raise UsageError(f"garnet spec needs ns,na,b,scale[,gamma[,seed]], got {source!r}")
        try:
            ns, na, b = (int(x) for x in fields[:3])
            scale = float(fields[3])
            gamma = float(fields[4]) if len(fields) > 4 else 0.9
            seed = int(fields[5]) if len(fields) > 5 else 0
        except ValueError:
            raise UsageError(f"malformed garnet spec {source!r}") from None
        return generate_random_mdp(ns, na, b, scale, seed, discount=gamma)
    path = Path(source)
    if not path.is_file():
        raise UsageError(f"MDP source {source!r} is neither a builtin, a garnet spec, nor a file")
    return load_mdp(path)


def resolve_policy(spec: str, mdp: FiniteMdp, seed: int, component: str) -> np.ndarray:
    """``uniform``, ``prefer:action=A,p=P``, ``random[:floor=F]`` or a JSON file with ``probs``."""
    name, _, rest = spec.partition(":")
    params = {}
    for token in filter(None, (t.strip() for t in rest.split(","))):
        key, eq, value = token.partition("=")
        if not eq:
            raise UsageError(f"invalid policy token {token!r}: expected param=value")
        params[key.strip()] = value.strip()
    try:
        if name == "uniform":
            return uniform_policy(mdp)
        if name == "prefer":
            action, p = int(params.get("action", 1)), float(params.get("p", 0.9))
            if not 0 <= action < mdp.n_actions or not 0.0 <= p <= 1.0:
                raise UsageError(f"invalid preference in policy spec {spec!r}")
            rest_p = (1.0 - p) / (mdp.n_actions - 1) if mdp.n_actions > 1 else 0.0
            policy = np.full((mdp.n_states, mdp.n_actions), rest_p)
            policy[:, action] = p if mdp.n_actions > 1 else 1.0
            return policy
        if name == "random":
            floor = float(params.get("floor", 0.0))
            rng = component_rng(seed, component)
            raw = rng.dirichlet(np.ones(mdp.n_actions), size=mdp.n_states)
            return (1.0 - floor) * raw + floor / mdp.n_actions
    except ValueError as exc:
        raise UsageError(f"invalid policy spec {spec!r}: {exc}") from None
    path = Path(spec)
    if path.is_file():
        with open(path) as fh:
            return check_policy(mdp, json.load(fh)["probs"])
    raise UsageError(f"unknown policy spec {spec!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tracelab", description=__doc__.splitlines()[0])
    parser.add_argument("--experiment", required=True, choices=EXPERIMENTS)
    parser.add_argument("--mdp", default="chain2", help="chain2 | chain2_episodic | garnet:ns,na,b,scale[,gamma[,seed]] | file.json")
    parser.add_argument("--strategy", default="retrace:lambda=0.9", help="kind[:param=value,...]")
    parser.add_argument("--target", default="prefer:action=1,p=0.9")
    parser.add_argument("--behavior", default="uniform")
    parser.add_argument("--tol", type=float, default=engine.DEFAULT_TOL)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default=None, help="CSV path (stdout when omitted)")
    parser.add_argument("--iterations", type=int, default=200)
    parser.add_argument("--episodes", type=int, default=20_000)
    return parser


def parse_args(argv=None) -> ExperimentSpec:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        parse_strategy(ns.strategy)
    except UsageError as exc:
        parser.error(str(exc))
    if ns.tol <= 0:
        parser.error("--tol must be positive")
    if ns.iterations < 1 or ns.episodes < 0:
        parser.error("--iterations must be >= 1 and --episodes >= 0")
    if not (ns.mdp in BUILTIN_MDPS or ns.mdp.startswith("garnet:") or Path(ns.mdp).is_file()):
        parser.error(f"--mdp {ns.mdp!r}: no such builtin or file")
    return ExperimentSpec(
        ns.experiment, ns.mdp, ns.strategy, ns.target, ns.behavior, ns.tol, ns.seed, ns.out,
        ns.iterations, ns.episodes,
    )


def _strategy(spec: str, mdp: FiniteMdp) -> TraceStrategy:
    return parse_strategy(spec, mdp.n_states, mdp.n_actions)


def _worker_count() -> int:
    value = os.environ.get("TRACE_LAB_THREADS")
    if value:
        return max(1, int(value))
    return os.cpu_count() or 1


def evaluate_operator_rows(spec: ExperimentSpec):
    mdp = resolve_mdp(spec.mdp)
    target = resolve_policy(spec.target, mdp, spec.seed, "target")
    behavior = resolve_policy(spec.behavior, mdp, spec.seed, "behavior")
    strategy = _strategy(spec.strategy, mdp)
    q = component_rng(spec.seed, "evaluate_operator.q").normal(size=(mdp.n_states, mdp.n_actions))
    result = engine.expected_m_enumerate(mdp, target, behavior, strategy, q, spec.tol)
    q_pi = exact_q_pi(mdp, target)
    for s, a in np.ndindex(q.shape):
        yield (s, a, q[s, a], result.mq[s, a], q_pi[s, a], result.tail_bound, result.horizon)


def contraction_suite_rows(spec: ExperimentSpec, strategies=SUITE_STRATEGIES):
    mdp = resolve_mdp(spec.mdp)
    target = resolve_policy(spec.target, mdp, spec.seed, "target")
    behavior = resolve_policy(spec.behavior, mdp, spec.seed, "behavior")
    q = component_rng(spec.seed, "contraction_suite.q").normal(size=(mdp.n_states, mdp.n_actions))

    def one(strategy_spec):
        strategy = _strategy(strategy_spec, mdp)
        report = engine.contraction_report(mdp, target, behavior, strategy, q, spec.tol)
        lemma2 = "" if report.lemma2_norm is None else report.lemma2_norm
        return (
            strategy_spec, report.gamma, report.norm_before, report.norm_after,
            report.effective_map_norm, lemma2, strategy.admissible,
        )

    with ThreadPoolExecutor(max_workers=_worker_count()) as pool:
        yield from pool.map(one, strategies)


def learn_rows(spec: ExperimentSpec):
    mdp = resolve_mdp(spec.mdp)
    target = resolve_policy(spec.target, mdp, spec.seed, "target")
    behavior = resolve_policy(spec.behavior, mdp, spec.seed, "behavior")
    config = learner.LearnerConfig(
        strategy=_strategy(spec.strategy, mdp),
        step_size=learner.HARNESS_STEP_SIZE,
        max_episodes=spec.episodes,
        seed=int(component_rng(spec.seed, "learn").integers(2**63)),
    )
    _, curve = learner.train(mdp, target, behavior, config)
    yield from curve


def control_rows(spec: ExperimentSpec):
    mdp = resolve_mdp(spec.mdp)
    config = control.ControlConfig(
        strategy=_strategy(spec.strategy, mdp),
        epsilon_schedule=control.EpsilonSchedule("inverse"),
        behavior_mode="uniform",
        q0_mode="optimistic",
        iterations=spec.iterations,
        tol=1e-7,
    )
    trace = control.run_control(mdp, config)
    for r in trace.records:
        yield (r.k, r.err, r.epsilon, r.bound_rhs, r.bound_ok)


ROW_BUILDERS = {
    "evaluate_operator": evaluate_operator_rows,
    "contraction_suite": contraction_suite_rows,
    "learn": learn_rows,
    "control": control_rows,
}


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def render_csv(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def write_atomic(path: str, text: str) -> None:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, target)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def run(spec: ExperimentSpec) -> int:
    try:
        text = render_csv(SCHEMAS[spec.experiment], ROW_BUILDERS[spec.experiment](spec))
    except UsageError as exc:
        print(f"tracelab: error: {exc}", file=sys.stderr)
        return 2
    except (ArithmeticError, engine.ExpansionBudgetError, DomainError, UnsupportedStrategyError) as exc:
        print(f"tracelab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    if spec.out:
        write_atomic(spec.out, text)
    else:
        sys.stdout.write(text)
    return 0


def main(argv=None) -> int:
    return run(parse_args(argv))


if __name__ == "__main__":
    sys.exit(main())
