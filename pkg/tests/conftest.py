"""Shared fixtures and helpers for the test suite."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from tracelab.mdp import chain2, chain2_policy, uniform_policy
from tracelab.traces import Kind, TraceStrategy

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = Path(__file__).parent / "golden"


def all_strategies(n_states: int = 2, n_actions: int = 2, lam: float = 0.9, seed: int = 0):
    """One instance of every strategy kind; the composite uses random tables."""
    rng = np.random.default_rng(seed)
    return [
        TraceStrategy(Kind.IS),
        TraceStrategy(Kind.TRUNCATED_IS, clip=1.0),
        TraceStrategy(Kind.TREE_BACKUP, lam=lam),
        TraceStrategy(Kind.RETRACE, lam=lam),
        TraceStrategy(Kind.NONMARKOV_RETRACE, lam=lam),
        TraceStrategy(Kind.QLAMBDA_OPC, lam=lam),
        TraceStrategy(
            Kind.COMPOSITE_GLR,
            lambda_table=rng.uniform(0.0, 1.0, (n_states, n_actions)),
            gamma_table=rng.uniform(0.5, 1.0, (n_states, n_actions)),
        ),
    ]


def admissible_strategies(n_states: int = 2, n_actions: int = 2, lam: float = 0.9, seed: int = 0):
    return [s for s in all_strategies(n_states, n_actions, lam, seed) if s.admissible]


def random_policy(rng: np.random.Generator, n_states: int, n_actions: int, floor: float = 0.0) -> np.ndarray:
    raw = rng.dirichlet(np.ones(n_actions), size=n_states)
    return (1.0 - floor) * raw + floor / n_actions


def random_history(rng: np.random.Generator, n_states: int, n_actions: int, max_len: int = 12):
    length = int(rng.integers(1, max_len + 1))
    return [(int(rng.integers(n_states)), int(rng.integers(n_actions))) for _ in range(length)]


@pytest.fixture
def chain():
    return chain2()


@pytest.fixture
def chain_target():
    return chain2_policy(0.9)


@pytest.fixture
def chain_behavior(chain):
    return uniform_policy(chain)
