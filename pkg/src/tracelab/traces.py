"""History-dependent trace coefficients beta(F_t).

A history is a sequence of ``(state, action)`` pairs whose first element is the
start pair. beta of a length-1 history is 1 for every strategy; longer
histories pick up one factor (or one recursive update) per pair after the
first.

Every strategy is also exposed as an incremental fold: ``init_summary``
followed by ``step_summary`` over the pairs after the start pair reproduces
``beta`` exactly. The learner and the operator engine only use the fold.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from tracelab.mdp import UsageError

ADMISSIBLE_ATOL = 1e-12


class DomainError(ValueError):
    """A history pair has zero behavior probability, so rho is undefined."""


class UnsupportedStrategyError(ValueError):
    pass


class Kind(enum.Enum):
    IS = "is"
    TRUNCATED_IS = "truncated_is"
    TREE_BACKUP = "tree_backup"
    RETRACE = "retrace"
    NONMARKOV_RETRACE = "nonmarkov_retrace"
    QLAMBDA_OPC = "qlambda_opc"
    COMPOSITE_GLR = "composite_glr"


FACTORABLE = frozenset({Kind.IS, Kind.TREE_BACKUP, Kind.RETRACE, Kind.QLAMBDA_OPC, Kind.COMPOSITE_GLR})


@dataclass(frozen=True, eq=False)
class TraceStrategy:
    kind: Kind
    lam: float = 1.0
    clip: float = 1.0
    # COMPOSITE_GLR per-(s, a) multipliers; None means the scalar ``lam`` / 1.0
    lambda_table: np.ndarray | None = None
    gamma_table: np.ndarray | None = None

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise UsageError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.clip < 0.0:
            raise UsageError(f"clip d must be nonnegative, got {self.clip}")
        for name in ("lambda_table", "gamma_table"):
            table = getattr(self, name)
            if table is None:
                continue
            if self.kind is not Kind.COMPOSITE_GLR:
                raise UsageError(f"{name} only applies to composite_glr")
            table = np.array(table, dtype=float)
            if table.ndim != 2 or np.any(table < 0.0) or np.any(table > 1.0):
                raise UsageError(f"{name} must be a 2-d table with entries in [0, 1]")
            table.setflags(write=False)
            object.__setattr__(self, name, table)

    @property
    def factorable(self) -> bool:
        return self.kind in FACTORABLE

    @property
    def admissible(self) -> bool:
        """True when beta <= prod(rho) holds for every history by construction."""
        return self.kind is not Kind.QLAMBDA_OPC

    def multiplier(self, state: int, action: int) -> float:
        """gamma(.) * lambda(.) for COMPOSITE_GLR."""
        lam = self.lam if self.lambda_table is None else self.lambda_table[state, action]
        disc = 1.0 if self.gamma_table is None else self.gamma_table[state, action]
        return float(lam * disc)

    def __str__(self) -> str:
        return format_strategy(self)


@dataclass(frozen=True)
class TraceSummary:
    beta: float = 1.0
    raw: float = 1.0  # running product of rho, kept for TRUNCATED_IS
    t: int = 0


def rho(state: int, action: int, target, behavior) -> float:
    mu = behavior[state, action]
    if mu <= 0.0:
        raise DomainError(f"behavior probability is zero at pair (state={state}, action={action})")
    return float(target[state, action] / mu)


def init_summary(strategy: TraceStrategy) -> TraceSummary:
    return TraceSummary()


def step_summary(
    strategy: TraceStrategy, summary: TraceSummary, pair, target, behavior
) -> tuple[TraceSummary, float]:
    s, a = pair
    r = rho(s, a, target, behavior)
    raw = summary.raw * r
    kind = strategy.kind
    if kind is Kind.IS:
        beta = summary.beta * r
    elif kind is Kind.TRUNCATED_IS:
        beta = min(strategy.clip, raw)
    elif kind is Kind.TREE_BACKUP:
        beta = summary.beta * strategy.lam * target[s, a]
    elif kind is Kind.RETRACE:
        beta = summary.beta * strategy.lam * min(1.0, r)
    elif kind is Kind.NONMARKOV_RETRACE:
        beta = strategy.lam * min(1.0, summary.beta * r)
    elif kind is Kind.QLAMBDA_OPC:
        beta = summary.beta * strategy.lam
    elif kind is Kind.COMPOSITE_GLR:
        beta = summary.beta * strategy.multiplier(s, a) * r
    else:  # pragma: no cover
        raise UnsupportedStrategyError(kind)
    return TraceSummary(float(beta), float(raw), summary.t + 1), float(beta)


def _check_history(history) -> list[tuple[int, int]]:
    pairs = [(int(s), int(a)) for s, a in history]
    if not pairs:
        raise UsageError("history must contain at least the start pair")
    return pairs


def beta(strategy: TraceStrategy, history, target, behavior) -> float:
    """Coefficient for the last pair of ``history``, computed from the full history."""
    pairs = _check_history(history)
    tail = pairs[1:]
    for k, (s, a) in enumerate(tail, start=1):
        if behavior[s, a] <= 0.0:
            raise DomainError(f"behavior probability is zero at history index {k} (state={s}, action={a})")
    if not tail:
        return 1.0
    rhos = [target[s, a] / behavior[s, a] for s, a in tail]
    kind = strategy.kind
    lam = strategy.lam
    if kind is Kind.IS:
        return float(math.prod(rhos))
    if kind is Kind.TRUNCATED_IS:
        return float(min(strategy.clip, math.prod(rhos)))
    if kind is Kind.TREE_BACKUP:
        return float(math.prod(lam * target[s, a] for s, a in tail))
    if kind is Kind.RETRACE:
        return float(math.prod(lam * min(1.0, r) for r in rhos))
    if kind is Kind.NONMARKOV_RETRACE:
        value = 1.0
        for r in rhos:
            value = lam * min(1.0, value * r)
        return float(value)
    if kind is Kind.QLAMBDA_OPC:
        return float(lam ** len(tail))
    if kind is Kind.COMPOSITE_GLR:
        return float(math.prod(strategy.multiplier(s, a) * r for (s, a), r in zip(tail, rhos)))
    raise UnsupportedStrategyError(kind)  # pragma: no cover


def fold_beta(strategy: TraceStrategy, history, target, behavior) -> list[float]:
    """beta of every prefix of ``history`` via the incremental summary."""
    pairs = _check_history(history)
    summary = init_summary(strategy)
    values = [summary.beta]
    for pair in pairs[1:]:
        summary, value = step_summary(strategy, summary, pair, target, behavior)
        values.append(value)
    return values


def is_product(history, target, behavior) -> float:
    pairs = _check_history(history)
    return float(math.prod(rho(s, a, target, behavior) for s, a in pairs[1:]))


def is_admissible(strategy: TraceStrategy, history, target, behavior) -> tuple[bool, float, float]:
    b = beta(strategy, history, target, behavior)
    bound = is_product(history, target, behavior)
    return b <= bound + ADMISSIBLE_ATOL, b, bound


@dataclass(frozen=True)
class BetaBound:
    """Certified bound on beta(F_t) over all histories of length t + 1.

    ``is_dominated`` certifies beta <= prod(rho), which lets callers bound
    expectations under mu by the matching expectation under pi. ``value`` is
    an absolute bound (``inf`` when none exists).
    """

    is_dominated: bool
    value: float


def beta_upper_bound(strategy: TraceStrategy, t: int) -> BetaBound:
    if t < 0:
        raise UsageError("t must be nonnegative")
    if t == 0:
        return BetaBound(True, 1.0)
    kind, lam = strategy.kind, strategy.lam
    if kind is Kind.QLAMBDA_OPC:
        return BetaBound(False, lam**t)
    if kind is Kind.TRUNCATED_IS:
        return BetaBound(True, strategy.clip)
    if kind in (Kind.RETRACE, Kind.TREE_BACKUP):
        return BetaBound(True, lam**t)
    if kind is Kind.NONMARKOV_RETRACE:
        return BetaBound(True, lam)
    return BetaBound(True, math.inf)


def markov_trace(strategy: TraceStrategy, state: int, action: int, target, behavior) -> float:
    """Per-decision trace c(s, a) with beta(F_t) = prod c(s_k, a_k)."""
    if not strategy.factorable:
        raise UnsupportedStrategyError(
            f"{strategy.kind.value} is history dependent and has no per-decision trace"
        )
    kind, lam = strategy.kind, strategy.lam
    if kind is Kind.QLAMBDA_OPC:
        return lam
    if kind is Kind.TREE_BACKUP:
        return float(lam * target[state, action])
    r = rho(state, action, target, behavior)
    if kind is Kind.IS:
        return r
    if kind is Kind.RETRACE:
        return lam * min(1.0, r)
    return strategy.multiplier(state, action) * r


def trace_table(strategy: TraceStrategy, target, behavior) -> np.ndarray:
    """c(s, a) for every pair; pairs with zero behavior probability get 0.

    Those pairs are never visited under mu, so their trace never multiplies
    anything with positive probability.
    """
    target = np.asarray(target, dtype=float)
    behavior = np.asarray(behavior, dtype=float)
    table = np.zeros_like(target)
    for s, a in np.ndindex(target.shape):
        if behavior[s, a] > 0.0:
            table[s, a] = markov_trace(strategy, s, a, target, behavior)
        elif not strategy.factorable:
            markov_trace(strategy, s, a, target, behavior)
    return table


# -- vectorised fold used by the operator engine -----------------------------


def step_many(strategy: TraceStrategy, betas, raws, states, actions, target, behavior):
    """Apply ``step_summary`` elementwise to arrays of summaries and pairs."""
    mu = behavior[states, actions]
    if np.any(mu <= 0.0):
        bad = int(np.flatnonzero(mu <= 0.0)[0])
        raise DomainError(
            f"behavior probability is zero at pair (state={states[bad]}, action={actions[bad]})"
        )
    pi = target[states, actions]
    r = pi / mu
    raws = raws * r
    kind, lam = strategy.kind, strategy.lam
    if kind is Kind.IS:
        betas = betas * r
    elif kind is Kind.TRUNCATED_IS:
        betas = np.minimum(strategy.clip, raws)
    elif kind is Kind.TREE_BACKUP:
        betas = betas * lam * pi
    elif kind is Kind.RETRACE:
        betas = betas * lam * np.minimum(1.0, r)
    elif kind is Kind.NONMARKOV_RETRACE:
        betas = lam * np.minimum(1.0, betas * r)
    elif kind is Kind.QLAMBDA_OPC:
        betas = betas * lam
    elif kind is Kind.COMPOSITE_GLR:
        lam_t = lam if strategy.lambda_table is None else strategy.lambda_table[states, actions]
        disc_t = 1.0 if strategy.gamma_table is None else strategy.gamma_table[states, actions]
        betas = betas * lam_t * disc_t * r
    return betas, raws


# -- strategy spec strings ----------------------------------------------------

_PARAM_ALIASES = {"lambda": "lam", "lam": "lam", "d": "clip", "clip": "clip"}
_ALLOWED = {
    Kind.IS: set(),
    Kind.TRUNCATED_IS: {"clip"},
    Kind.TREE_BACKUP: {"lam"},
    Kind.RETRACE: {"lam"},
    Kind.NONMARKOV_RETRACE: {"lam"},
    Kind.QLAMBDA_OPC: {"lam"},
    Kind.COMPOSITE_GLR: {"lam", "gamma"},
}


class StrategyParseError(UsageError):
    def __init__(self, token: str, reason: str):
        super().__init__(f"invalid strategy token {token!r}: {reason}")
        self.token = token


def parse_strategy(spec: str, n_states: int | None = None, n_actions: int | None = None) -> TraceStrategy:
    """Parse ``kind[:param=value,...]``, e.g. ``retrace:lambda=0.9``.

    For ``composite_glr`` a scalar ``gamma`` multiplier is broadcast to a
    per-pair table when the table shape is known.
    """
    name, _, rest = spec.strip().partition(":")
    try:
        kind = Kind(name.strip().lower())
    except ValueError:
        raise StrategyParseError(name, f"unknown kind; expected one of {', '.join(k.value for k in Kind)}") from None
    params: dict[str, float] = {}
    for token in filter(None, (t.strip() for t in rest.split(","))):
        key, eq, value = token.partition("=")
        if not eq:
            raise StrategyParseError(token, "expected param=value")
        key = key.strip().lower()
        key = _PARAM_ALIASES.get(key, key)
        if key not in _ALLOWED[kind]:
            raise StrategyParseError(token, f"parameter not accepted by {kind.value}")
        if key in params:
            raise StrategyParseError(token, "duplicate parameter")
        try:
            params[key] = float(value)
        except ValueError:
            raise StrategyParseError(token, "value is not a number") from None
    gamma = params.pop("gamma", None)
    gamma_table = None
    if gamma is not None:
        if not 0.0 <= gamma <= 1.0:
            raise StrategyParseError(f"gamma={gamma}", "must lie in [0, 1]")
        if gamma != 1.0 and (n_states is None or n_actions is None):
            params["lam"] = params.get("lam", 1.0) * gamma
        elif gamma != 1.0:
            gamma_table = np.full((n_states, n_actions), gamma)
    try:
        return TraceStrategy(kind, gamma_table=gamma_table, **params)
    except UsageError as exc:
        raise StrategyParseError(spec, str(exc)) from None


def format_strategy(strategy: TraceStrategy) -> str:
    kind = strategy.kind
    if kind is Kind.IS:
        return "is"
    if kind is Kind.TRUNCATED_IS:
        return f"truncated_is:d={strategy.clip:g}"
    text = f"{kind.value}:lambda={strategy.lam:g}"
    if kind is Kind.COMPOSITE_GLR and (strategy.lambda_table is not None or strategy.gamma_table is not None):
        text += ",tables"
    return text
