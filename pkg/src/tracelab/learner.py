"""Sample-based learner with one eligibility stream per visit.

Classic eligibility traces keep a single decaying number per state-action
pair. That only works when the coefficient factorises into per-decision
traces; with history-dependent coefficients a pair visited twice needs two
independent streams, one per occurrence. ``run_episode`` keeps a trace
summary for every visit index k and advances all of them with each new pair.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from tracelab.mdp import FiniteMdp, Transition, UsageError, check_policy, check_q, exact_q_pi, td_error
from tracelab.traces import TraceStrategy, TraceSummary, init_summary, step_summary

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StepSize:
    """``constant``: alpha. ``harmonic``: alpha / (1 + n / n0) at episode n."""

    kind: str = "constant"
    alpha: float = 0.1
    n0: float = 1000.0

    def __post_init__(self):
        if self.kind not in ("constant", "harmonic"):
            raise UsageError(f"unknown step-size schedule {self.kind!r}")
        if not 0.0 < self.alpha <= 1.0:
            raise UsageError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.n0 <= 0:
            raise UsageError("n0 must be positive")

    def __call__(self, episode: int) -> float:
        if self.kind == "constant":
            return self.alpha
        return self.alpha / (1.0 + episode / self.n0)


# Harness default: roughly 1/n decay, which keeps the late-episode noise floor low.
HARNESS_STEP_SIZE = StepSize("harmonic", alpha=1.0, n0=100.0)


@dataclass(frozen=True)
class LearnerConfig:
    strategy: TraceStrategy
    step_size: StepSize = field(default_factory=StepSize)
    max_episodes: int = 1000
    max_steps_per_episode: int = 500
    seed: int = 0
    offline: bool = False

    def __post_init__(self):
        if self.max_episodes < 0 or self.max_steps_per_episode < 1:
            raise UsageError("max_episodes must be >= 0 and max_steps_per_episode >= 1")


@dataclass
class EpisodeBuffer:
    q_ref: np.ndarray
    pairs: list[tuple[int, int]] = field(default_factory=list)
    summaries: list[TraceSummary] = field(default_factory=list)


class EpisodeOutcome(NamedTuple):
    q: np.ndarray
    steps: int
    truncated: bool


def run_episode(
    mdp: FiniteMdp,
    target,
    behavior,
    strategy: TraceStrategy,
    q,
    alpha: float,
    rng: np.random.Generator,
    *,
    start_state: int | None = None,
    start_action: int | None = None,
    max_steps: int = 500,
    offline: bool = False,
    record: list | None = None,
) -> EpisodeOutcome:
    """Run one behavior-policy episode and apply the per-visit updates.

    Without ``start_state`` the episode starts uniformly among non-terminal
    states. In ``offline`` mode TD errors use the Q-table from the start of
    the episode and the summed update is applied at the end.

    ``record`` (if given) receives ``(k, t, (s_t, a_t), weight, delta)`` for
    every update, where ``weight = gamma**(t - k) * beta(F_{k:t})``.
    """
    target = check_policy(mdp, target)
    behavior = check_policy(mdp, behavior)
    q = check_q(mdp, q).copy()
    gamma = mdp.discount
    if start_state is None:
        candidates = [s for s in range(mdp.n_states) if not mdp.is_terminal(s)]
        if not candidates:
            raise UsageError("MDP has no non-terminal start state")
        start_state = int(rng.choice(candidates))
    frozen = q.copy() if offline else q
    pending = np.zeros_like(q)
    buffer = EpisodeBuffer(q_ref=q)
    s = start_state
    steps = 0
    truncated = True
    for t in range(max_steps):
        if t == 0 and start_action is not None:
            a = int(start_action)
        else:
            a = int(rng.choice(mdp.n_actions, p=behavior[s]))
        s_next = int(rng.choice(mdp.n_states, p=mdp.transition[s, a]))
        reward = float(mdp.reward[s, a])

        for k, summary in enumerate(buffer.summaries):
            buffer.summaries[k], _ = step_summary(strategy, summary, (s, a), target, behavior)
        buffer.pairs.append((s, a))
        buffer.summaries.append(init_summary(strategy))

        delta = td_error(mdp, Transition(s, a, reward, s_next), target, frozen)
        if not np.isfinite(delta):
            raise ArithmeticError(f"non-finite TD error at step {t}")
        for k, ((sk, ak), summary) in enumerate(zip(buffer.pairs, buffer.summaries)):
            weight = gamma ** (t - k) * summary.beta
            if record is not None:
                record.append((k, t, (s, a), weight, delta))
            if offline:
                pending[sk, ak] += alpha * weight * delta
            else:
                q[sk, ak] += alpha * weight * delta
        steps = t + 1
        if mdp.is_terminal(s_next):
            truncated = False
            break
        s = s_next
    if offline:
        q += pending
    return EpisodeOutcome(q, steps, truncated)


def train(mdp: FiniteMdp, target, behavior, config: LearnerConfig, q0=None):
    """Run ``config.max_episodes`` episodes from ``q0``.

    Returns ``(q_final, curve)`` with one ``(episode, sup_norm_error, steps)``
    row per episode, measured against the exact Q^pi.
    """
    q = np.zeros((mdp.n_states, mdp.n_actions)) if q0 is None else check_q(mdp, q0).copy()
    q_pi = exact_q_pi(mdp, target)
    rng = np.random.default_rng(config.seed)
    curve = []
    n_truncated = 0
    for episode in range(config.max_episodes):
        q, steps, truncated = run_episode(
            mdp,
            target,
            behavior,
            config.strategy,
            q,
            config.step_size(episode),
            rng,
            max_steps=config.max_steps_per_episode,
            offline=config.offline,
        )
        n_truncated += truncated
        curve.append((episode, float(np.max(np.abs(q - q_pi))), steps))
    if n_truncated:
        log.warning("%d of %d episodes hit the step cap and were truncated", n_truncated, config.max_episodes)
    return q, curve
