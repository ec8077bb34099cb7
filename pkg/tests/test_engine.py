import json

import numpy as np
import pytest

from conftest import FIXTURES, admissible_strategies, random_policy
from tracelab import engine
from tracelab.mdp import (
    bellman_backup,
    chain2,
    chain2_policy,
    exact_q_pi,
    generate_random_mdp,
    mdp_from_dict,
    policy_matrix,
    uniform_policy,
)
from tracelab.traces import Kind, TraceStrategy, UnsupportedStrategyError, parse_strategy

TOL = 1e-6


def td0_composite(mdp):
    return TraceStrategy(Kind.COMPOSITE_GLR, lambda_table=np.zeros((mdp.n_states, mdp.n_actions)))


def sup(x):
    return float(np.max(np.abs(x)))


def random_case(seed, max_states=4, gamma_max=0.6):
    rng = np.random.default_rng(seed)
    ns = int(rng.integers(2, max_states + 1))
    mdp = generate_random_mdp(ns, 2, int(rng.integers(1, ns + 1)), 1.0, seed, discount=float(rng.uniform(0.1, gamma_max)))
    target = random_policy(rng, ns, 2)
    behavior = random_policy(rng, ns, 2, floor=0.2)
    q = rng.normal(size=(ns, 2)) * 3
    return mdp, target, behavior, q


# -- enumeration --------------------------------------------------------------------


def test_td0_composite_gives_policy_backup(chain, chain_target, chain_behavior):
    q = np.random.default_rng(0).normal(size=(2, 2))
    result = engine.expected_m_enumerate(chain, chain_target, chain_behavior, td0_composite(chain), q, TOL)
    np.testing.assert_allclose(result.mq, bellman_backup(chain, chain_target, q), atol=1e-10)
    assert result.tail_bound == 0.0


def test_is_enumeration_reaches_q_pi(chain, chain_target, chain_behavior):
    q = np.random.default_rng(1).normal(size=(2, 2)) * 4
    result = engine.expected_m_enumerate(chain, chain_target, chain_behavior, TraceStrategy(Kind.IS), q, TOL)
    assert result.tail_bound <= TOL
    assert sup(result.mq - exact_q_pi(chain, chain_target)) <= TOL + 1e-9


def test_retrace_enumeration_matches_closed_form_on_chain(chain, chain_target, chain_behavior):
    strategy = TraceStrategy(Kind.RETRACE, lam=1.0)
    q = np.random.default_rng(2).normal(size=(2, 2))
    result = engine.expected_m_enumerate(chain, chain_target, chain_behavior, strategy, q, TOL)
    closed = engine.expected_m_markov_closed_form(chain, chain_target, chain_behavior, strategy, q)
    assert sup(result.mq - closed) <= TOL + 1e-9


@pytest.mark.parametrize("seed", range(10))
def test_retrace_closed_form_matches_enumeration_on_random_mdps(seed):
    mdp, target, behavior, q = random_case(seed, max_states=5, gamma_max=0.9)
    strategy = TraceStrategy(Kind.RETRACE, lam=0.9)
    result = engine.expected_m_enumerate(mdp, target, behavior, strategy, q, TOL)
    closed = engine.expected_m_markov_closed_form(mdp, target, behavior, strategy, q)
    assert result.tail_bound <= TOL
    assert sup(result.mq - closed) <= TOL + 1e-9


@pytest.mark.parametrize("kind", [Kind.NONMARKOV_RETRACE, Kind.TRUNCATED_IS, Kind.QLAMBDA_OPC])
def test_certificate_holds_against_tighter_run(kind, chain, chain_target, chain_behavior):
    strategy = TraceStrategy(kind, lam=0.9)
    q = np.random.default_rng(3).normal(size=(2, 2))
    loose = engine.expected_m_enumerate(chain, chain_target, chain_behavior, strategy, q, 1e-3)
    tight = engine.expected_m_enumerate(chain, chain_target, chain_behavior, strategy, q, 1e-9)
    assert loose.tail_bound <= 1e-3 and tight.tail_bound <= 1e-9
    assert sup(loose.mq - tight.mq) <= loose.tail_bound + tight.tail_bound
    assert loose.horizon <= tight.horizon


def test_budget_exhaustion_is_reported(chain, chain_target, chain_behavior):
    with pytest.raises(engine.ExpansionBudgetError) as info:
        engine.expected_m_enumerate(
            chain, chain_target, chain_behavior, TraceStrategy(Kind.NONMARKOV_RETRACE, lam=0.9), np.ones((2, 2)), 1e-9, budget=50
        )
    assert info.value.budget == 50 and info.value.branches > 0 and info.value.horizon >= 1
    assert "horizon" in str(info.value)


@pytest.mark.parametrize("strategy", admissible_strategies(), ids=str)
def test_q_pi_is_fixed_point_for_admissible_strategies(strategy, chain, chain_target, chain_behavior):
    q_pi = exact_q_pi(chain, chain_target)
    result = engine.expected_m_enumerate(chain, chain_target, chain_behavior, strategy, q_pi, TOL)
    assert sup(result.mq - q_pi) <= TOL + 1e-9


# -- closed form ----------------------------------------------------------------------


def test_closed_form_extremes():
    mdp, target, behavior, q = random_case(21)
    np.testing.assert_allclose(
        engine.expected_m_markov_closed_form(mdp, target, behavior, TraceStrategy(Kind.TREE_BACKUP, lam=0.0), q),
        bellman_backup(mdp, target, q),
        atol=1e-12,
    )
    np.testing.assert_allclose(
        engine.expected_m_markov_closed_form(mdp, target, behavior, TraceStrategy(Kind.IS), q),
        exact_q_pi(mdp, target),
        atol=1e-10,
    )


def test_closed_form_refuses_history_dependent(chain, chain_target, chain_behavior):
    with pytest.raises(UnsupportedStrategyError):
        engine.expected_m_markov_closed_form(chain, chain_target, chain_behavior, TraceStrategy(Kind.NONMARKOV_RETRACE), np.zeros(4))


# -- Monte Carlo -----------------------------------------------------------------------


def test_monte_carlo_within_four_standard_errors(chain, chain_target, chain_behavior):
    strategy = TraceStrategy(Kind.RETRACE, lam=0.9)
    q = np.random.default_rng(4).normal(size=(2, 2))
    exact = engine.expected_m_enumerate(chain, chain_target, chain_behavior, strategy, q, 1e-9).mq
    estimate, se = engine.expected_m_monte_carlo(chain, chain_target, chain_behavior, strategy, q, 200_000, 40, seed=9)
    assert np.all(se > 0)
    assert np.all(np.abs(estimate - exact) <= 4 * se)


def test_monte_carlo_deterministic_case_has_zero_error():
    mdp = generate_random_mdp(3, 2, 1, 1.0, 5, discount=0.5)
    policy = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    q = np.random.default_rng(5).normal(size=(3, 2))
    strategy = TraceStrategy(Kind.RETRACE, lam=0.9)
    estimate, se = engine.expected_m_monte_carlo(mdp, policy, policy, strategy, q, 10, 60, seed=0)
    np.testing.assert_array_equal(se, 0.0)
    # pairs off the deterministic policy are never visited after t = 0, so enumeration
    # with the same support agrees exactly up to the negligible gamma^61 truncation
    exact = engine.expected_m_enumerate(mdp, policy, policy, strategy, q, 1e-12).mq
    np.testing.assert_allclose(estimate, exact, atol=1e-9)


def test_monte_carlo_is_seeded(chain, chain_target, chain_behavior):
    args = (chain, chain_target, chain_behavior, TraceStrategy(Kind.NONMARKOV_RETRACE, lam=0.9), np.ones((2, 2)), 500, 10)
    a, b = engine.expected_m_monte_carlo(*args, seed=3), engine.expected_m_monte_carlo(*args, seed=3)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


# -- linear map and contraction ----------------------------------------------------------


def test_td0_map_is_gamma_p_pi(chain, chain_target, chain_behavior):
    lmap = engine.effective_linear_map(chain, chain_target, chain_behavior, td0_composite(chain), TOL)
    np.testing.assert_allclose(lmap, chain.discount * policy_matrix(chain, chain_target), atol=1e-12)


def test_is_map_vanishes(chain, chain_target, chain_behavior):
    lmap = engine.effective_linear_map(chain, chain_target, chain_behavior, TraceStrategy(Kind.IS), TOL)
    assert engine.matrix_norm(lmap) <= 10 * TOL


@pytest.mark.parametrize("strategy", admissible_strategies(), ids=str)
def test_map_norm_bounded_by_gamma_on_chain(strategy, chain, chain_target, chain_behavior):
    lmap = engine.effective_linear_map(chain, chain_target, chain_behavior, strategy, TOL)
    assert engine.matrix_norm(lmap) <= chain.discount + 10 * TOL


def test_lemma2_extremes(chain, chain_target, chain_behavior):
    q = np.zeros((2, 2))
    cut = engine.contraction_report(chain, chain_target, chain_behavior, TraceStrategy(Kind.TREE_BACKUP, lam=0.0), q)
    assert cut.lemma2_norm == pytest.approx(chain.discount, abs=1e-15)
    full = engine.contraction_report(chain, chain_target, chain_behavior, TraceStrategy(Kind.IS), q)
    assert full.lemma2_norm <= 1e-9
    nmr = engine.contraction_report(chain, chain_target, chain_behavior, TraceStrategy(Kind.NONMARKOV_RETRACE), q)
    assert nmr.lemma2_norm is None


@pytest.mark.parametrize("seed", range(50))
def test_contraction_on_random_tuples(seed):
    rng = np.random.default_rng(1000 + seed)
    strategies = admissible_strategies(2, 2, lam=float(rng.uniform(0.5, 1.0)), seed=seed)
    strategy = strategies[seed % len(strategies)]
    # history-dependent strategies expand polynomially many summaries; keep their MDPs at two states
    mdp, target, behavior, q = random_case(seed, max_states=2 if not strategy.factorable else 4)
    if strategy.kind is Kind.COMPOSITE_GLR:
        strategy = admissible_strategies(mdp.n_states, 2, seed=seed)[-1]
    report = engine.contraction_report(mdp, target, behavior, strategy, q, TOL)
    assert report.norm_after <= report.gamma * report.norm_before + TOL
    assert report.effective_map_norm <= report.gamma + 10 * TOL
    if strategy.factorable:
        assert report.lemma2_norm <= report.gamma + 1e-8


# -- series form of the error -------------------------------------------------------------------------------


def test_lemma1_residual_examples(chain, chain_target, chain_behavior):
    strategy = TraceStrategy(Kind.RETRACE, lam=0.9)
    q_pi = exact_q_pi(chain, chain_target)
    assert engine.lemma1_residual(chain, chain_target, chain_behavior, strategy, q_pi, 30) <= 1e-9
    q = np.random.default_rng(6).normal(size=(2, 2))
    mq = engine.expected_m_markov_closed_form(chain, chain_target, chain_behavior, strategy, q)
    assert engine.lemma1_residual(chain, chain_target, chain_behavior, strategy, q, 0) == pytest.approx(sup(mq - q_pi))
    assert engine.lemma1_residual(chain, chain_target, chain_behavior, strategy, q, 30) <= 1e-6


@pytest.mark.parametrize("t_max", [1, 5, 10, 20])
def test_lemma1_residual_within_tail_bound(t_max):
    mdp, target, behavior, q = random_case(77, gamma_max=0.9)
    strategy = TraceStrategy(Kind.TREE_BACKUP, lam=0.7)
    bound = 2 * mdp.discount**t_max / (1 - mdp.discount) * sup(q - exact_q_pi(mdp, target)) + 1e-10
    assert engine.lemma1_residual(mdp, target, behavior, strategy, q, t_max) <= bound


# -- necessity of the admissibility hypothesis ------------------------------------------------


def test_stored_qlambda_witness_breaks_contraction():
    data = json.loads((FIXTURES / "qlambda_witness.json").read_text())
    mdp = mdp_from_dict(data["mdp"])
    strategy = parse_strategy(data["strategy"])
    report = engine.contraction_report(mdp, np.array(data["target"]), np.array(data["behavior"]), strategy, np.array(data["q"]))
    assert report.norm_after > report.norm_before
    assert report.norm_after > report.gamma * report.norm_before + TOL
    assert report.norm_before == pytest.approx(data["norm_before"], abs=1e-9)
    assert report.norm_after == pytest.approx(data["norm_after"], abs=1e-6)


def test_witness_search_finds_nothing_for_retrace():
    mdp = chain2(0.9)
    target = chain2_policy(0.99)
    found = engine.find_noncontraction_witness(mdp, target, uniform_policy(mdp), TraceStrategy(Kind.RETRACE), max_tries=500)
    assert found is None
