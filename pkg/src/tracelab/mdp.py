"""Finite MDPs, Bellman operators and exact reference solutions.

Q-functions and policies are dense ``(n_states, n_actions)`` arrays. Wherever
a matrix view is needed, state-action pairs are flattened row-major, so pair
``(s, a)`` has index ``s * n_actions + a``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PROB_ATOL = 1e-12


class UsageError(ValueError):
    """Raised for malformed inputs: bad shapes, out-of-range parameters."""


@dataclass(frozen=True)
class FiniteMdp:
    transition: np.ndarray  # (S, A, S)
    reward: np.ndarray  # (S, A)
    discount: float
    terminal_states: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        transition = np.array(self.transition, dtype=float)
        reward = np.array(self.reward, dtype=float)
        if transition.ndim != 3 or transition.shape[0] != transition.shape[2]:
            raise UsageError(f"transition must have shape (S, A, S), got {transition.shape}")
        if reward.shape != transition.shape[:2]:
            raise UsageError(f"reward shape {reward.shape} does not match {transition.shape[:2]}")
        if np.any(transition < 0) or not np.allclose(transition.sum(axis=2), 1.0, rtol=0, atol=PROB_ATOL):
            raise UsageError("transition rows must be nonnegative and sum to 1")
        if not np.all(np.isfinite(reward)):
            raise UsageError("reward table must be finite")
        if not 0.0 <= self.discount < 1.0:
            raise UsageError(f"discount must lie in [0, 1), got {self.discount}")
        terminals = frozenset(int(s) for s in self.terminal_states)
        for s in terminals:
            if not 0 <= s < transition.shape[0]:
                raise UsageError(f"terminal state {s} out of range")
            if not np.all(transition[s, :, s] == 1.0) or np.any(reward[s] != 0.0):
                raise UsageError(f"terminal state {s} must be absorbing with zero reward")
        transition.setflags(write=False)
        reward.setflags(write=False)
        object.__setattr__(self, "transition", transition)
        object.__setattr__(self, "reward", reward)
        object.__setattr__(self, "discount", float(self.discount))
        object.__setattr__(self, "terminal_states", terminals)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def n_pairs(self) -> int:
        return self.n_states * self.n_actions

    def is_terminal(self, state: int) -> bool:
        return state in self.terminal_states


@dataclass(frozen=True)
class Transition:
    state: int
    action: int
    reward: float
    next_state: int


def check_policy(mdp: FiniteMdp, policy) -> np.ndarray:
    policy = np.asarray(policy, dtype=float)
    if policy.shape != (mdp.n_states, mdp.n_actions):
        raise UsageError(f"policy shape {policy.shape} does not match {(mdp.n_states, mdp.n_actions)}")
    if np.any(policy < 0) or not np.allclose(policy.sum(axis=1), 1.0, rtol=0, atol=PROB_ATOL):
        raise UsageError("policy rows must be nonnegative and sum to 1")
    return policy


def check_q(mdp: FiniteMdp, q) -> np.ndarray:
    """Accept a Q-table as a (S, A) array or a flat vector of length S*A."""
    q = np.asarray(q, dtype=float)
    if q.shape == (mdp.n_pairs,):
        q = q.reshape(mdp.n_states, mdp.n_actions)
    if q.shape != (mdp.n_states, mdp.n_actions):
        raise UsageError(f"Q shape {q.shape} does not match {(mdp.n_states, mdp.n_actions)}")
    if not np.all(np.isfinite(q)):
        raise UsageError("Q-table entries must be finite")
    return q


def uniform_policy(mdp: FiniteMdp) -> np.ndarray:
    return np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)


def greedy_policy(q: np.ndarray) -> np.ndarray:
    """Deterministic greedy policy; ties go to the lowest action index."""
    policy = np.zeros_like(q, dtype=float)
    policy[np.arange(q.shape[0]), np.argmax(q, axis=1)] = 1.0
    return policy


def policy_matrix(mdp: FiniteMdp, policy) -> np.ndarray:
    """Dense n x n matrix of P_pi over flattened state-action pairs."""
    policy = check_policy(mdp, policy)
    mat = np.einsum("ijk,kl->ijkl", mdp.transition, policy)
    return mat.reshape(mdp.n_pairs, mdp.n_pairs)


def apply_policy_operator(mdp: FiniteMdp, policy, q) -> np.ndarray:
    policy = check_policy(mdp, policy)
    q = check_q(mdp, q)
    return mdp.transition @ np.sum(policy * q, axis=1)


def bellman_backup(mdp: FiniteMdp, policy, q) -> np.ndarray:
    return mdp.reward + mdp.discount * apply_policy_operator(mdp, policy, q)


def bellman_optimality(mdp: FiniteMdp, q) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(TQ, greedy)`` with ``greedy`` attaining max_a TQ(s, a) in every state.

    TQ itself bootstraps from max_a' Q(s', a'), i.e. from ``greedy_policy(q)``.
    """
    q = check_q(mdp, q)
    tq = bellman_backup(mdp, greedy_policy(q), q)
    return tq, greedy_policy(tq)


def exact_q_pi(mdp: FiniteMdp, policy, residual_tol: float = 1e-10) -> np.ndarray:
    """Solve (I - gamma P_pi) Q = R directly and verify the Bellman residual."""
    p_pi = policy_matrix(mdp, policy)
    n = mdp.n_pairs
    q = np.linalg.solve(np.eye(n) - mdp.discount * p_pi, mdp.reward.ravel())
    q = q.reshape(mdp.n_states, mdp.n_actions)
    residual = np.max(np.abs(bellman_backup(mdp, policy, q) - q))
    scale = max(1.0, float(np.max(np.abs(q))))
    if residual > residual_tol * scale:
        raise ArithmeticError(f"policy evaluation residual {residual:.3e} exceeds tolerance")
    return q


def exact_q_star(mdp: FiniteMdp, tol: float = 1e-9) -> np.ndarray:
    """Value iteration, stopped so that the returned table is within ``tol`` of Q*."""
    if tol <= 0:
        raise UsageError("tol must be positive")
    gamma = mdp.discount
    q = np.zeros((mdp.n_states, mdp.n_actions))
    if gamma == 0.0:
        return mdp.reward.copy()
    # ||TQ - Q*|| <= gamma/(1-gamma) ||TQ - Q||
    threshold = tol * (1.0 - gamma) / (2.0 * gamma)
    while True:
        tq, _ = bellman_optimality(mdp, q)
        if np.max(np.abs(tq - q)) <= threshold:
            return tq
        q = tq


def td_error(mdp: FiniteMdp, transition: Transition, policy, q) -> float:
    """Expected-target TD error; the bootstrap is zero at terminal next states."""
    s, a, s_next = transition.state, transition.action, transition.next_state
    if not (0 <= s < mdp.n_states and 0 <= s_next < mdp.n_states and 0 <= a < mdp.n_actions):
        raise UsageError(f"transition indices out of range: {transition}")
    bootstrap = 0.0
    if not mdp.is_terminal(s_next):
        bootstrap = float(np.dot(policy[s_next], q[s_next]))
    return float(transition.reward + mdp.discount * bootstrap - q[s, a])


def generate_random_mdp(
    n_states: int,
    n_actions: int,
    branching: int,
    reward_scale: float = 1.0,
    seed: int = 0,
    discount: float = 0.9,
) -> FiniteMdp:
    """Garnet-style MDP: each (s, a) reaches ``branching`` random successors."""
    if n_states < 1 or n_actions < 1:
        raise UsageError("n_states and n_actions must be positive")
    if not 1 <= branching <= n_states:
        raise UsageError(f"branching must lie in [1, {n_states}], got {branching}")
    if reward_scale < 0:
        raise UsageError("reward_scale must be nonnegative")
    rng = np.random.default_rng(seed)
    transition = np.zeros((n_states, n_actions, n_states))
    for s in range(n_states):
        for a in range(n_actions):
            successors = rng.choice(n_states, size=branching, replace=False)
            transition[s, a, successors] = rng.dirichlet(np.ones(branching))
    # renormalise so every row sums to 1 to machine precision
    transition /= transition.sum(axis=2, keepdims=True)
    reward = rng.uniform(-reward_scale, reward_scale, size=(n_states, n_actions))
    return FiniteMdp(transition, reward, discount)


def chain2(discount: float = 0.5) -> FiniteMdp:
    """Two states, actions L=0 and R=1; R moves right, L moves left, reward on (s1, R)."""
    transition = np.zeros((2, 2, 2))
    transition[:, 0, 0] = 1.0
    transition[:, 1, 1] = 1.0
    reward = np.array([[0.0, 0.0], [0.0, 1.0]])
    return FiniteMdp(transition, reward, discount)


def chain2_episodic(discount: float = 0.5, termination: float = 0.1) -> FiniteMdp:
    """chain2 plus an absorbing terminal state 2 entered with fixed probability per step."""
    base = chain2(discount)
    transition = np.zeros((3, 2, 3))
    transition[:2, :, :2] = base.transition * (1.0 - termination)
    transition[:2, :, 2] = termination
    transition[2, :, 2] = 1.0
    reward = np.zeros((3, 2))
    reward[:2] = base.reward
    return FiniteMdp(transition, reward, discount, frozenset({2}))


def chain2_policy(p_right: float = 0.9, n_states: int = 2) -> np.ndarray:
    return np.tile([1.0 - p_right, p_right], (n_states, 1))


BUILTIN_MDPS = {"chain2": chain2, "chain2_episodic": chain2_episodic}


def mdp_to_dict(mdp: FiniteMdp) -> dict:
    return {
        "n_states": mdp.n_states,
        "n_actions": mdp.n_actions,
        "transition": mdp.transition.ravel().tolist(),
        "reward": mdp.reward.ravel().tolist(),
        "discount": mdp.discount,
        "terminal_states": sorted(mdp.terminal_states),
    }


def mdp_from_dict(data: dict) -> FiniteMdp:
    required = ("n_states", "n_actions", "transition", "reward", "discount")
    missing = [key for key in required if key not in data]
    if missing:
        raise UsageError(f"MDP file is missing keys: {', '.join(missing)}")
    unknown = set(data) - set(required) - {"terminal_states"}
    if unknown:
        raise UsageError(f"MDP file has unknown keys: {', '.join(sorted(unknown))}")
    ns, na = int(data["n_states"]), int(data["n_actions"])
    transition = np.asarray(data["transition"], dtype=float)
    reward = np.asarray(data["reward"], dtype=float)
    if transition.size != ns * na * ns:
        raise UsageError(f"transition needs {ns * na * ns} entries, got {transition.size}")
    if reward.size != ns * na:
        raise UsageError(f"reward needs {ns * na} entries, got {reward.size}")
    return FiniteMdp(
        transition.reshape(ns, na, ns),
        reward.reshape(ns, na),
        float(data["discount"]),
        frozenset(data.get("terminal_states", ())),
    )


def load_mdp(path) -> FiniteMdp:
    with open(path) as fh:
        return mdp_from_dict(json.load(fh))


def save_mdp(mdp: FiniteMdp, path) -> None:
    Path(path).write_text(json.dumps(mdp_to_dict(mdp), indent=2) + "\n")
