"""Expected multistep off-policy operator with history-dependent coefficients.

For a fixed (mdp, target, behavior, strategy) the operator is affine in Q:

    MQ = Q + C (T_pi Q - Q),   C[i, j] = sum_t gamma^t E_mu[beta(F_t) 1{(s_t, a_t) = j} | start i]

because beta never looks at Q and, given F_t, the TD error only depends on Q
through its conditional mean (T_pi Q - Q)(s_t, a_t). ``enumerate_occupancy``
computes C exactly up to a certified row-wise truncation bound by expanding
every behavior-positive trajectory layer by layer. Branches are merged only
when their (start, pair, summary) key is bit-identical, so merging introduces
no error; factorable strategies fold the running coefficient into the branch
weight and merge on (start, pair).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from tracelab.mdp import (
    FiniteMdp,
    UsageError,
    bellman_backup,
    check_policy,
    check_q,
    exact_q_pi,
    policy_matrix,
)
from tracelab.traces import (
    Kind,
    TraceStrategy,
    UnsupportedStrategyError,
    step_many,
    trace_table,
)

DEFAULT_TOL = 1e-6
DEFAULT_BUDGET = 50_000_000
SOLVE_RESIDUAL_TOL = 1e-10


class ExpansionBudgetError(RuntimeError):
    def __init__(self, horizon: int, branches: int, budget: int):
        super().__init__(
            f"enumeration needs more than {budget} branch visits "
            f"(reached horizon {horizon} with {branches} live branches)"
        )
        self.horizon = horizon
        self.branches = branches
        self.budget = budget


@dataclass(frozen=True)
class Occupancy:
    matrix: np.ndarray  # truncated C, n x n
    row_tail: np.ndarray  # certified bound on the row sums of |C - matrix|
    horizon: int
    expanded: int


@dataclass(frozen=True)
class OperatorResult:
    mq: np.ndarray
    tail_bound: float
    horizon: int
    trajectories_expanded: int


@dataclass(frozen=True)
class ContractionReport:
    norm_before: float
    norm_after: float
    gamma: float
    effective_map_norm: float
    lemma2_norm: float | None
    tail_bound: float

    @property
    def contracts(self) -> bool:
        return self.norm_after <= self.gamma * self.norm_before + self.tail_bound


def _future_factor(strategy: TraceStrategy, betas, raws, gamma: float, multiplier_max: float):
    """Bound on E[sum_{k>=1} gamma^k beta(F_{t+k}) | branch] per unit branch weight."""

    def geometric(rate):
        return rate / (1.0 - rate) if rate < 1.0 else math.inf

    kind, lam = strategy.kind, strategy.lam
    if kind is Kind.IS:
        return betas * geometric(gamma)
    if kind in (Kind.TREE_BACKUP, Kind.RETRACE, Kind.QLAMBDA_OPC):
        return betas * geometric(gamma * lam)
    if kind is Kind.COMPOSITE_GLR:
        return betas * geometric(gamma * multiplier_max)
    if kind is Kind.NONMARKOV_RETRACE:
        # beta(F_{t+k}) <= lam * beta(F_t) * (lam rho)^(k-1) rho  and  <= lam
        return np.minimum(betas * geometric(gamma * lam), lam * geometric(gamma))
    if kind is Kind.TRUNCATED_IS:
        # E[min(d, raw X)] <= min(d, raw E[X]) <= min(d, raw)
        return np.minimum(strategy.clip, raws) * geometric(gamma)
    raise UnsupportedStrategyError(kind)  # pragma: no cover


SNAP_BITS = 40


def _snap(x: np.ndarray) -> np.ndarray:
    """Round to SNAP_BITS mantissa bits so paths that differ only by float
    multiplication order share a merge key. Relative change <= 2**-SNAP_BITS."""
    mantissa, exponent = np.frexp(x)
    return np.ldexp(np.round(mantissa * 2.0**SNAP_BITS) / 2.0**SNAP_BITS, exponent)


def _merge(keys: list[np.ndarray], weights: np.ndarray):
    order = np.lexsort(keys[::-1])
    sorted_keys = [k[order] for k in keys]
    new_group = np.zeros(order.size, dtype=bool)
    new_group[:1] = True
    for k in sorted_keys:
        new_group[1:] |= k[1:] != k[:-1]
    starts = np.flatnonzero(new_group)
    merged = np.add.reduceat(weights[order], starts) if order.size else weights[:0]
    return [k[starts] for k in sorted_keys], merged


def enumerate_occupancy(
    mdp: FiniteMdp,
    target,
    behavior,
    strategy: TraceStrategy,
    tol: float,
    budget: int = DEFAULT_BUDGET,
) -> Occupancy:
    """Discounted beta-weighted occupancy C with ``max(row_tail) <= tol``."""
    if tol <= 0:
        raise UsageError("tol must be positive")
    target = check_policy(mdp, target)
    behavior = check_policy(mdp, behavior)
    gamma = mdp.discount
    n, n_actions = mdp.n_pairs, mdp.n_actions
    multiplier_max = 1.0
    if strategy.kind is Kind.COMPOSITE_GLR:
        lam_t = strategy.lam if strategy.lambda_table is None else strategy.lambda_table
        disc_t = 1.0 if strategy.gamma_table is None else strategy.gamma_table
        multiplier_max = float(np.max(np.asarray(lam_t) * disc_t))

    p_mu = policy_matrix(mdp, behavior)
    succ_ptr = np.concatenate([[0], np.cumsum(np.count_nonzero(p_mu > 0, axis=1))])
    succ_idx = np.concatenate([np.flatnonzero(row > 0) for row in p_mu]).astype(np.int64)
    succ_p = p_mu[p_mu > 0]

    collapse = strategy.factorable
    start = np.arange(n, dtype=np.int64)
    pair = np.arange(n, dtype=np.int64)
    betas = np.ones(n)
    raws = np.ones(n)
    weight = np.ones(n)

    occ = np.zeros((n, n))
    pruned = np.zeros(n)
    snap_err = np.zeros(n)
    allowance = np.zeros(n)
    expanded = n
    t = 0
    while True:
        np.add.at(occ, (start, pair), gamma**t * weight * betas)
        future = weight * gamma**t * _future_factor(strategy, betas, raws, gamma, multiplier_max)
        live = np.bincount(start, weights=future, minlength=n)
        bound = pruned + live + snap_err
        if np.all(bound <= tol):
            return Occupancy(occ, bound, t, expanded)

        # prune the least consequential branches within a per-layer allowance
        allowance += 0.5 * tol * (1.0 - math.sqrt(gamma)) * math.sqrt(gamma) ** t
        order = np.lexsort((future, start))
        cum = np.cumsum(future[order])
        group_first = np.searchsorted(start[order], np.arange(n))
        offset = np.concatenate([[0.0], cum])[group_first]
        cum_in_group = cum - offset[start[order]]
        drop_sorted = cum_in_group <= allowance[start[order]]
        drop = np.zeros(start.size, dtype=bool)
        drop[order] = drop_sorted
        dropped = np.bincount(start[drop], weights=future[drop], minlength=n)
        pruned += dropped
        allowance -= dropped
        keep = ~drop
        start, pair, betas, raws, weight = start[keep], pair[keep], betas[keep], raws[keep], weight[keep]

        counts = succ_ptr[pair + 1] - succ_ptr[pair]
        total = int(counts.sum())
        expanded += total
        if expanded > budget:
            raise ExpansionBudgetError(t + 1, total, budget)
        parent = np.repeat(np.arange(pair.size), counts)
        within = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
        slot = succ_ptr[pair[parent]] + within
        new_pair = succ_idx[slot]
        new_weight = weight[parent] * succ_p[slot]
        new_betas, new_raws = step_many(
            strategy,
            betas[parent],
            raws[parent],
            new_pair // n_actions,
            new_pair % n_actions,
            target,
            behavior,
        )
        new_start = start[parent]
        t += 1

        if collapse:
            new_weight = new_weight * new_betas
            (start, pair), weight = _merge([new_start, new_pair], new_weight)
            betas = np.ones(start.size)
            raws = np.ones(start.size)
        elif strategy.kind is Kind.TRUNCATED_IS:
            # future coefficients are 1-Lipschitz in raw and E_mu[future rho product] <= 1
            snapped = _snap(new_raws)
            snap_err += np.bincount(
                new_start, new_weight * np.abs(snapped - new_raws) * gamma**t / (1.0 - gamma), minlength=n
            )
            (start, pair, raws), weight = _merge([new_start, new_pair, snapped], new_weight)
            betas = np.minimum(strategy.clip, raws)
        else:
            # nonmarkov retrace: d beta(F_{t+k}) / d beta(F_t) <= lam^k prod(rho)
            snapped = _snap(new_betas)
            snap_err += np.bincount(
                new_start,
                new_weight * np.abs(snapped - new_betas) * gamma**t / (1.0 - gamma * strategy.lam),
                minlength=n,
            )
            (start, pair, betas), weight = _merge([new_start, new_pair, snapped], new_weight)
            raws = np.ones(start.size)
        positive = weight > 0.0
        start, pair, betas, raws, weight = (
            start[positive], pair[positive], betas[positive], raws[positive], weight[positive]
        )


def td_residual(mdp: FiniteMdp, target, q) -> np.ndarray:
    """T_pi Q - Q, the conditional mean of the TD error at each pair."""
    return bellman_backup(mdp, target, q) - q


def apply_occupancy(mdp: FiniteMdp, target, occupancy: Occupancy, q) -> OperatorResult:
    q = check_q(mdp, q)
    residual = td_residual(mdp, target, q)
    mq = q + (occupancy.matrix @ residual.ravel()).reshape(q.shape)
    tail = float(np.max(occupancy.row_tail) * np.max(np.abs(residual)))
    return OperatorResult(mq, tail, occupancy.horizon, occupancy.expanded)


def expected_m_enumerate(
    mdp: FiniteMdp,
    target,
    behavior,
    strategy: TraceStrategy,
    q,
    tol: float = DEFAULT_TOL,
    budget: int = DEFAULT_BUDGET,
) -> OperatorResult:
    """MQ by exhaustive trajectory expansion, with ``tail_bound <= tol``."""
    q = check_q(mdp, q)
    scale = float(np.max(np.abs(td_residual(mdp, target, q))))
    occ_tol = tol / scale if scale > 0 else math.inf
    if math.isinf(occ_tol):
        occ_tol = 1.0 / (1.0 - mdp.discount) + 1.0  # any horizon certifies a zero residual
    occupancy = enumerate_occupancy(mdp, target, behavior, strategy, occ_tol, budget)
    return apply_occupancy(mdp, target, occupancy, q)


def trace_weighted_matrix(mdp: FiniteMdp, target, behavior, strategy: TraceStrategy) -> np.ndarray:
    """P_{c mu}[(s,a), (s',a')] = P(s'|s,a) mu(a'|s') c(s',a')."""
    c = trace_table(strategy, target, behavior)
    return policy_matrix(mdp, behavior) * c.ravel()[None, :]


def markov_occupancy(mdp: FiniteMdp, target, behavior, strategy: TraceStrategy) -> np.ndarray:
    """C = (I - gamma P_{c mu})^{-1} for factorable strategies."""
    if not strategy.factorable:
        raise UnsupportedStrategyError(f"{strategy.kind.value} has no closed form")
    n = mdp.n_pairs
    a = np.eye(n) - mdp.discount * trace_weighted_matrix(mdp, target, behavior, strategy)
    c = np.linalg.solve(a, np.eye(n))
    if np.max(np.abs(a @ c - np.eye(n))) > SOLVE_RESIDUAL_TOL * max(1.0, np.max(np.abs(c))):
        raise ArithmeticError("closed-form solve residual exceeds tolerance")
    return c


def expected_m_markov_closed_form(mdp: FiniteMdp, target, behavior, strategy: TraceStrategy, q) -> np.ndarray:
    if not strategy.factorable:
        raise UnsupportedStrategyError(f"{strategy.kind.value} has no closed form")
    q = check_q(mdp, q)
    target = check_policy(mdp, target)
    n = mdp.n_pairs
    a = np.eye(n) - mdp.discount * trace_weighted_matrix(mdp, target, behavior, strategy)
    rhs = td_residual(mdp, target, q).ravel()
    x = np.linalg.solve(a, rhs)
    if np.max(np.abs(a @ x - rhs)) > SOLVE_RESIDUAL_TOL * max(1.0, np.max(np.abs(x))):
        raise ArithmeticError("closed-form solve residual exceeds tolerance")
    return q + x.reshape(q.shape)


def expected_m_monte_carlo(
    mdp: FiniteMdp,
    target,
    behavior,
    strategy: TraceStrategy,
    q,
    n_samples: int,
    horizon: int,
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Sample-mean estimate of MQ and its per-entry standard error.

    Rollouts follow the continuing view of the MDP (terminal states are
    absorbing and bootstrap from Q like any other state), matching the
    expected operator.
    """
    if n_samples < 2:
        raise UsageError("n_samples must be at least 2")
    if horizon < 1:
        raise UsageError("horizon must be at least 1")
    target = check_policy(mdp, target)
    behavior = check_policy(mdp, behavior)
    q = check_q(mdp, q)
    rng = np.random.default_rng(seed)
    gamma = mdp.discount
    v_target = np.sum(target * q, axis=1)
    cum_p = np.cumsum(mdp.transition, axis=2)
    cum_mu = np.cumsum(behavior, axis=1)
    estimate = np.empty_like(q)
    std_error = np.empty_like(q)
    for s0, a0 in np.ndindex(q.shape):
        s = np.full(n_samples, s0)
        a = np.full(n_samples, a0)
        betas = np.ones(n_samples)
        raws = np.ones(n_samples)
        total = np.zeros(n_samples)
        for t in range(horizon + 1):
            u = rng.random(n_samples)
            s_next = np.minimum((u[:, None] > cum_p[s, a]).sum(axis=1), mdp.n_states - 1)
            delta = mdp.reward[s, a] + gamma * v_target[s_next] - q[s, a]
            total += gamma**t * betas * delta
            if t == horizon:
                break
            u = rng.random(n_samples)
            a_next = np.minimum((u[:, None] > cum_mu[s_next]).sum(axis=1), mdp.n_actions - 1)
            betas, raws = step_many(strategy, betas, raws, s_next, a_next, target, behavior)
            s, a = s_next, a_next
        estimate[s0, a0] = q[s0, a0] + total.mean()
        # shifting by one sample keeps the spread exact (zero) when every rollout agrees
        std_error[s0, a0] = (total - total[0]).std(ddof=1) / math.sqrt(n_samples)
    return estimate, std_error


def _probe_linear_map(mdp: FiniteMdp, target, occupancy: Occupancy) -> np.ndarray:
    n = mdp.n_pairs
    base = apply_occupancy(mdp, target, occupancy, np.zeros(n)).mq.ravel()
    cols = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        cols.append(apply_occupancy(mdp, target, occupancy, e).mq.ravel() - base)
    return np.column_stack(cols)


def effective_linear_map(
    mdp: FiniteMdp,
    target,
    behavior,
    strategy: TraceStrategy,
    tol: float = DEFAULT_TOL,
    seed: int = 0,
) -> np.ndarray:
    """Matrix L with MQ - Q^pi = L (Q - Q^pi), probed column by column."""
    n = mdp.n_pairs
    occupancy = enumerate_occupancy(mdp, target, behavior, strategy, tol / n)
    lmap = _probe_linear_map(mdp, target, occupancy)
    q_pi = exact_q_pi(mdp, target)
    q = np.random.default_rng(seed).normal(size=q_pi.shape)
    lhs = apply_occupancy(mdp, target, occupancy, q).mq - q_pi
    mismatch = np.max(np.abs(lhs.ravel() - lmap @ (q - q_pi).ravel()))
    if mismatch > 10 * tol * max(1.0, float(np.max(np.abs(q - q_pi)))):
        raise ArithmeticError(f"effective map does not reproduce the operator (mismatch {mismatch:.3e})")
    return lmap


def lemma2_matrix(mdp: FiniteMdp, target, occupancy_matrix: np.ndarray) -> np.ndarray:
    n = mdp.n_pairs
    return np.eye(n) - occupancy_matrix @ (np.eye(n) - mdp.discount * policy_matrix(mdp, target))


def contraction_report(
    mdp: FiniteMdp,
    target,
    behavior,
    strategy: TraceStrategy,
    q,
    tol: float = DEFAULT_TOL,
) -> ContractionReport:
    q = check_q(mdp, q)
    q_pi = exact_q_pi(mdp, target)
    n = mdp.n_pairs
    scale = max(float(n), float(np.max(np.abs(td_residual(mdp, target, q)))), 1.0)
    occupancy = enumerate_occupancy(mdp, target, behavior, strategy, tol / scale)
    result = apply_occupancy(mdp, target, occupancy, q)
    lmap = _probe_linear_map(mdp, target, occupancy)
    lemma2 = None
    if strategy.factorable:
        lemma2 = matrix_norm(lemma2_matrix(mdp, target, markov_occupancy(mdp, target, behavior, strategy)))
    return ContractionReport(
        norm_before=float(np.max(np.abs(q - q_pi))),
        norm_after=float(np.max(np.abs(result.mq - q_pi))),
        gamma=mdp.discount,
        effective_map_norm=matrix_norm(lmap),
        lemma2_norm=lemma2,
        tail_bound=result.tail_bound,
    )


def matrix_norm(m: np.ndarray) -> float:
    """Induced sup-norm: maximum absolute row sum."""
    return float(np.max(np.abs(m).sum(axis=1)))


def lemma1_residual(mdp: FiniteMdp, target, behavior, strategy: TraceStrategy, q, t_max: int) -> float:
    """Distance between MQ - Q^pi and the truncated series over t = 1..t_max.

    With per-decision traces, P_mu^t B_t acts as P_{c mu}^t, so the t-th term
    is gamma^t (P_{c mu}^{t-1} P_pi - P_{c mu}^t)(Q - Q^pi).
    """
    if not strategy.factorable:
        raise UnsupportedStrategyError(f"{strategy.kind.value} has no matrix-form B_t")
    if t_max < 0:
        raise UsageError("t_max must be nonnegative")
    q = check_q(mdp, q)
    q_pi = exact_q_pi(mdp, target)
    diff = (q - q_pi).ravel()
    p_pi = policy_matrix(mdp, target)
    p_c = trace_weighted_matrix(mdp, target, behavior, strategy)
    gamma = mdp.discount
    series = np.zeros_like(diff)
    power = np.eye(mdp.n_pairs)  # P_{c mu}^{t-1}
    for t in range(1, t_max + 1):
        series += gamma**t * (power @ (p_pi @ diff) - power @ (p_c @ diff))
        power = power @ p_c
    mq = expected_m_markov_closed_form(mdp, target, behavior, strategy, q)
    return float(np.max(np.abs((mq - q_pi).ravel() - series)))


def find_noncontraction_witness(
    mdp: FiniteMdp,
    target,
    behavior,
    strategy: TraceStrategy,
    seed: int = 0,
    max_tries: int = 10_000,
    tol: float = DEFAULT_TOL,
):
    """Search random Q-tables for one that the operator pushes away from Q^pi.

    Returns ``(q, report)`` or ``None``. The search uses the linear map, so
    each try is a matrix-vector product.
    """
    rng = np.random.default_rng(seed)
    q_pi = exact_q_pi(mdp, target).ravel()
    occupancy = enumerate_occupancy(mdp, target, behavior, strategy, tol / mdp.n_pairs)
    lmap = _probe_linear_map(mdp, target, occupancy)
    for _ in range(max_tries):
        d = rng.normal(size=q_pi.size)
        if np.max(np.abs(lmap @ d)) > np.max(np.abs(d)) + 10 * tol:
            q = (q_pi + d).reshape(mdp.n_states, mdp.n_actions)
            return q, contraction_report(mdp, target, behavior, strategy, q, tol)
    return None
