"""Control by repeated application of the expected operator.

Each iteration builds an epsilon-greedy target from the current Q-table, picks
a behavior policy, and sets Q_{k+1} to the operator applied to Q_k. Every
iteration is checked against the one-step error bound

    ||Q_{k+1} - Q*|| <= gamma ||Q_k - Q*|| + eps_k / (1 - gamma) ||Q_k|| + tol

where eps_k is the smallest constant with T_{pi_k} Q_k >= T Q_k - eps_k ||Q_k|| e.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from tracelab.engine import expected_m_enumerate, expected_m_markov_closed_form
from tracelab.mdp import (
    FiniteMdp,
    UsageError,
    bellman_backup,
    bellman_optimality,
    check_q,
    exact_q_star,
    uniform_policy,
)
from tracelab.traces import TraceStrategy

BEHAVIOR_FLOOR = 0.2  # mixing weight on uniform for the mirrored behavior policy


@dataclass(frozen=True)
class EpsilonSchedule:
    """``inverse``: 1/(k+1); ``exponential``: rate**k;
    ``delayed``: hold for k < hold_until, then hold * rate**(k - hold_until)."""

    kind: str = "inverse"
    rate: float = 0.9
    hold: float = 0.5
    hold_until: int = 20

    def __post_init__(self):
        if self.kind not in ("inverse", "exponential", "delayed"):
            raise UsageError(f"unknown epsilon schedule {self.kind!r}")
        if not 0.0 < self.rate < 1.0:
            raise UsageError("exponential rate must lie in (0, 1)")
        if not 0.0 <= self.hold <= 1.0 or self.hold_until < 0:
            raise UsageError("hold must lie in [0, 1] and hold_until must be nonnegative")

    def __call__(self, k: int) -> float:
        if self.kind == "inverse":
            return 1.0 / (k + 1)
        if self.kind == "exponential":
            return self.rate**k
        if k < self.hold_until:
            return self.hold
        return self.hold * self.rate ** (k - self.hold_until)


@dataclass(frozen=True)
class ControlConfig:
    strategy: TraceStrategy
    epsilon_schedule: EpsilonSchedule = field(default_factory=EpsilonSchedule)
    behavior_mode: str = "uniform"  # uniform | epsilon_greedy_mirror | fixed_random
    behavior_seed: int = 0
    q0_mode: str = "zeros"  # zeros | pessimistic | optimistic | random
    q0_seed: int = 0
    iterations: int = 200
    tol: float = 1e-7

    def __post_init__(self):
        if self.behavior_mode not in ("uniform", "epsilon_greedy_mirror", "fixed_random"):
            raise UsageError(f"unknown behavior mode {self.behavior_mode!r}")
        if self.q0_mode not in ("zeros", "pessimistic", "optimistic", "random"):
            raise UsageError(f"unknown q0 mode {self.q0_mode!r}")
        if self.iterations < 1:
            raise UsageError("iterations must be at least 1")
        if self.tol <= 0:
            raise UsageError("tol must be positive")


@dataclass(frozen=True)
class ControlRecord:
    k: int
    err: float  # ||Q_k - Q*||
    epsilon: float
    bound_rhs: float
    bound_ok: bool
    err_next: float  # ||Q_{k+1} - Q*||


@dataclass
class ControlTrace:
    records: list[ControlRecord]
    q_final: np.ndarray
    q_star: np.ndarray

    @property
    def final_error(self) -> float:
        return float(np.max(np.abs(self.q_final - self.q_star)))

    @property
    def all_bounds_ok(self) -> bool:
        return all(r.bound_ok for r in self.records)


def epsilon_of(q, policy, mdp: FiniteMdp) -> float:
    """Smallest eps in [0, 1] with T_pi Q >= TQ - eps ||Q|| e (0 when Q = 0)."""
    q = check_q(mdp, q)
    norm = float(np.max(np.abs(q)))
    if norm == 0.0:
        return 0.0
    tq, _ = bellman_optimality(mdp, q)
    gap = float(np.max(tq - bellman_backup(mdp, policy, q)))
    return min(1.0, max(0.0, gap) / norm)


def epsilon_greedy(q: np.ndarray, epsilon: float) -> np.ndarray:
    n_states, n_actions = q.shape
    policy = np.full((n_states, n_actions), epsilon / n_actions)
    policy[np.arange(n_states), np.argmax(q, axis=1)] += 1.0 - epsilon
    return policy


def make_target_policy(q, k: int, schedule: EpsilonSchedule) -> np.ndarray:
    return epsilon_greedy(np.asarray(q, dtype=float), schedule(k))


def initial_q(mdp: FiniteMdp, mode: str, seed: int = 0) -> np.ndarray:
    scale = float(np.max(np.abs(mdp.reward))) / (1.0 - mdp.discount)
    shape = (mdp.n_states, mdp.n_actions)
    if mode == "zeros":
        return np.zeros(shape)
    if mode == "pessimistic":
        return np.full(shape, -scale)
    if mode == "optimistic":
        return np.full(shape, scale)
    if mode == "random":
        return np.random.default_rng(seed).uniform(-scale, scale, size=shape)
    raise UsageError(f"unknown q0 mode {mode!r}")


def fixed_random_behavior(mdp: FiniteMdp, seed: int) -> np.ndarray:
    """Random behavior policy with every action probability >= 1 / (2 |A|)."""
    rng = np.random.default_rng(seed)
    return 0.5 * rng.dirichlet(np.ones(mdp.n_actions), size=mdp.n_states) + 0.5 / mdp.n_actions


def behavior_policy(mdp: FiniteMdp, q: np.ndarray, k: int, config: ControlConfig) -> np.ndarray:
    if config.behavior_mode == "uniform":
        return uniform_policy(mdp)
    if config.behavior_mode == "fixed_random":
        return fixed_random_behavior(mdp, config.behavior_seed)
    return epsilon_greedy(q, max(config.epsilon_schedule(k), BEHAVIOR_FLOOR))


def control_step(mdp: FiniteMdp, q_k, k: int, config: ControlConfig, q_star: np.ndarray):
    """One iteration Q_{k+1} = M_k Q_k plus its bound record."""
    q_k = check_q(mdp, q_k)
    target = make_target_policy(q_k, k, config.epsilon_schedule)
    behavior = behavior_policy(mdp, q_k, k, config)
    if config.strategy.factorable:
        q_next = expected_m_markov_closed_form(mdp, target, behavior, config.strategy, q_k)
    else:
        q_next = expected_m_enumerate(mdp, target, behavior, config.strategy, q_k, tol=0.1 * config.tol).mq
    gamma = mdp.discount
    eps = epsilon_of(q_k, target, mdp)
    err = float(np.max(np.abs(q_k - q_star)))
    err_next = float(np.max(np.abs(q_next - q_star)))
    rhs = gamma * err + eps / (1.0 - gamma) * float(np.max(np.abs(q_k))) + config.tol
    record = ControlRecord(k, err, eps, rhs, err_next <= rhs, err_next)
    return q_next, record


def run_control(mdp: FiniteMdp, config: ControlConfig, q_star: np.ndarray | None = None) -> ControlTrace:
    if q_star is None:
        q_star = exact_q_star(mdp, 1e-9)
    q = initial_q(mdp, config.q0_mode, config.q0_seed)
    records = []
    for k in range(config.iterations):
        if float(np.max(np.abs(q - q_star))) <= config.tol:
            break
        q, record = control_step(mdp, q, k, config, q_star)
        records.append(record)
    return ControlTrace(records, q, q_star)
