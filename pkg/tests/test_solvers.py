import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from cachecast.arrivals import (MarkovArrivalModel, deterministic_arrivals, independent_product,
                                per_user_zipf_arrivals)
from cachecast.errors import ErgodicityError, UnichainError
from cachecast.model import encode_state
from cachecast.policies import baseline_lqf
from cachecast.sim import SimOptions, simulate
from cachecast.solvers import (SOLVERS, SolveOptions, build_mdp, chain_matrix, evaluate_chain, pia,
                               policy_evaluate, rvia, solve, solve_markov_modulated, spia,
                               srvia, structured_value_update)
from conftest import bernoulli, silent_pair, nonuniform, reference_m2, uniform


def m1_instance():
    cfg = uniform((5,), cached=(1,), p=2.0)
    return cfg, independent_product([bernoulli(0.5)])


def test_rvia_m1_closed_form():
    cfg, arr = m1_instance()
    rep = rvia(cfg, arr)
    assert rep.converged
    assert rep.average_cost == pytest.approx(2.5, abs=1e-9)
    theta, _ = policy_evaluate(np.ones(6, dtype=int), cfg, arr)
    assert theta == pytest.approx(2.5, abs=1e-12)


def test_rvia_brute_force_tiny():
    cfg = uniform((1, 1), cached=(1,), c=(3.0, 3.0), p=(1.0, 2.0))
    arr = independent_product([bernoulli(0.6), bernoulli(0.3)])
    best = oracles.brute_force(oracles.Tables(cfg, arr))
    assert rvia(cfg, arr).average_cost == pytest.approx(best, abs=1e-9)
    assert pia(cfg, arr).average_cost == pytest.approx(best, abs=1e-9)


def test_zero_cost_system():
    cfg = uniform((2, 2), p=0.0, wf=0.0, wp=0.0)
    rep = rvia(cfg, deterministic_arrivals((0, 0)))
    assert rep.average_cost == 0.0
    # delay is unweighted: V is the drain cost, serving the longer queue first
    expect = [q1 + q2 + min(q1, q2) for q1 in range(3) for q2 in range(3)]
    assert np.allclose(rep.values, expect)


def test_single_state_converges_fast():
    cfg = uniform((1,), p=1.0)
    rep = srvia(cfg, deterministic_arrivals((0,)))
    # fetch 3 (uncached) plus power 1 every slot
    assert rep.iterations <= 2 and rep.average_cost == pytest.approx(4.0)


def test_reference_state_normalized(instance):
    cfg, arr = instance
    rep = rvia(cfg, arr)
    assert rep.values[0] == 0.0
    assert np.all(np.isfinite(rep.values))


def test_solver_agreement(pia_instance):
    cfg, arr = pia_instance
    reps = {name: solve(cfg, arr, name) for name in SOLVERS}
    base = reps["rvia"]
    for name, rep in reps.items():
        assert rep.converged, name
        assert rep.average_cost == pytest.approx(base.average_cost, abs=1e-6), name
        assert rep.policy.tobytes() == base.policy.tobytes(), name


def test_theta_matches_independent_policy_iteration(instance):
    cfg, arr = instance
    theta, policy, _ = oracles.policy_iteration(oracles.Tables(cfg, arr))
    rep = rvia(cfg, arr)
    assert rep.average_cost == pytest.approx(theta, abs=1e-8)
    # the oracle's greedy choice is optimal too: evaluate it independently
    P, g, _ = oracles.Tables(cfg, arr).chain(rep.policy)
    assert oracles.gain(P, g) == pytest.approx(theta, abs=1e-8)


def test_accounting_identity(pia_instance):
    cfg, arr = pia_instance
    S = cfg.num_states
    for rep in (srvia(cfg, arr), spia(cfg, arr)):
        assert all(p + s == S for p, s in zip(rep.performed, rep.skipped))


def test_srvia_skips_after_first_iteration():
    cfg = uniform((10, 10, 10), K=2, cached=(1, 2))
    rep = srvia(cfg, per_user_zipf_arrivals(cfg, 0.75), SolveOptions(span_tolerance=1e-6))
    assert rep.skipped[0] == 0
    assert sum(rep.skipped[1:]) > 0


def test_pia_single_update_when_initial_policy_optimal():
    cfg = uniform((3, 1), cached=(1,), c=100.0, p=(1.0, 1.0))
    arr = independent_product([bernoulli(0.5), bernoulli(0.5)])
    rep = pia(cfg, arr)
    assert np.all(rep.policy == 1)
    assert rep.iterations == 1


def test_structured_value_update_branches():
    cfg = uniform((3, 3), cached=(1,))
    arr = independent_product([bernoulli(0.5), bernoulli(0.5)])
    V = rvia(cfg, arr).values
    prev = np.full(16, 2)
    prev[encode_state((0, 2), cfg)] = 1
    # predecessor (0,2) -> (1,2) chose 1: skip
    res = structured_value_update((1, 2), prev, V, cfg, arr)
    assert res.skipped and res.action == 1
    # boundary state with no predecessor: full minimisation
    res = structured_value_update((0, 0), prev, V, cfg, arr)
    assert not res.skipped


def test_structured_value_update_nonuniform_guard():
    cfg = nonuniform(2)
    arr = independent_product([bernoulli(0.5)] * 4, (2, 2))
    V = np.zeros(cfg.num_states)
    prev = np.full(cfg.num_states, 2)
    # predecessor of ((0,1),(0,0)) by removing the request at user 2 is the
    # zero state, which it does not dominate: no skip even though mu(0) = 1
    prev[0] = 1
    res = structured_value_update(np.array([[0, 1], [0, 0]]), prev, V, cfg, arr)
    assert not res.skipped
    # ((1,0),(0,0)) is not dominated by ((1,1),(0,0)) either
    prev[encode_state(np.array([[1, 0], [0, 0]]), cfg)] = 1
    res = structured_value_update(np.array([[1, 1], [0, 0]]), prev, V, cfg, arr)
    assert not res.skipped
    # ((1,1),(0,0)) minus the user-1 request is ((0,1),(0,0)), which it dominates
    prev[encode_state(np.array([[0, 1], [0, 0]]), cfg)] = 1
    res = structured_value_update(np.array([[1, 1], [0, 0]]), prev, V, cfg, arr)
    assert res.skipped and res.action == 1


def test_policy_evaluate_multichain_rejected():
    cfg = uniform((2, 2), p=1.0)
    with pytest.raises(UnichainError) as exc:
        policy_evaluate(np.ones(9, dtype=int), cfg, deterministic_arrivals((0, 0)))
    assert len(exc.value.classes) >= 2


def test_policy_evaluate_single_absorbing_state():
    cfg = uniform((2,), cached=(1,), p=2.0)
    theta, V = policy_evaluate(np.ones(3, dtype=int), cfg, deterministic_arrivals((0,)))
    assert theta == pytest.approx(2.0)


def test_policy_evaluate_against_simulation():
    cfg = uniform((3, 4), cached=(2,))
    arr = per_user_zipf_arrivals(cfg, 0.75)
    policy = baseline_lqf(cfg)
    theta, _ = policy_evaluate(policy, cfg, arr)
    res = simulate(policy, cfg, arr, SimOptions(horizon=200_000, replications=8, seed=5))
    assert abs(res.mean.total - theta) < 4 * res.stderr.total


def test_iterative_evaluation_matches_dense_oracle():
    cfg = uniform((16, 16, 16), K=2, cached=(1,))
    arr = per_user_zipf_arrivals(cfg, 0.75)
    mdp = build_mdp(cfg, arr)
    assert mdp.num_states > 4096
    lqf = np.argmax(np.stack(np.unravel_index(np.arange(mdp.num_states), (17, 17, 17)), 1),
                    axis=1)
    P = chain_matrix(mdp, lqf)
    g = mdp.stage_costs(lqf)
    theta, V = evaluate_chain(P, g)
    assert theta == pytest.approx(oracles.gain(P.toarray(), g), abs=1e-7)
    assert V[0] == 0.0


def test_unknown_solver():
    cfg, arr = m1_instance()
    with pytest.raises(ValueError):
        solve(cfg, arr, "nope")


def test_report_serialization(tmp_path):
    cfg, arr = reference_m2()
    rep = srvia(cfg, arr)
    rep.save(tmp_path / "r.json")
    data = json.loads((tmp_path / "r.json").read_text())
    assert data["policy"] == rep.policy.tolist()
    assert rep.counter_rows()[0] == {"iteration": 1, "performed": cfg.num_states, "skipped": 0}


def test_pia_propagates_multichain_initial_policy():
    # content 2's second user never requests, so serving content 1 forever
    # freezes Q_{2,2}: the initial policy has one recurrent class per value
    cfg, arr = silent_pair()
    with pytest.raises(UnichainError):
        pia(cfg, arr)
    assert rvia(cfg, arr).converged


def test_non_convergence_flagged():
    cfg, arr = reference_m2()
    rep = rvia(cfg, arr, SolveOptions(max_iterations=2))
    assert not rep.converged and rep.iterations == 2


def markov_instance():
    cfg = uniform((2, 1), cached=(1,))
    model = MarkovArrivalModel(np.array([[1, 0], [0, 1]]), np.array([[0.7, 0.3], [0.4, 0.6]]))
    return cfg, model


def test_markov_single_state_equals_iid():
    cfg = uniform((3, 3), cached=(1,))
    model = MarkovArrivalModel(np.array([[1, 1]]), np.array([[1.0]]))
    a = solve_markov_modulated(cfg, model)
    b = rvia(cfg, deterministic_arrivals((1, 1)))
    assert a.average_cost == pytest.approx(b.average_cost, abs=1e-9)
    assert np.array_equal(a.policy, b.policy)


def test_markov_matches_enumeration():
    cfg, model = markov_instance()
    ref = oracles.MarkovTables(cfg, model.states, model.transition)
    best = oracles.brute_force(ref)
    rep = solve_markov_modulated(cfg, model)
    assert rep.average_cost == pytest.approx(best, abs=1e-9)
    assert solve_markov_modulated(cfg, model, SolveOptions(structured=True)).policy.tobytes() \
        == rep.policy.tobytes()


def test_markov_rejects_periodic_chain():
    cfg = uniform((2, 2))
    model = MarkovArrivalModel(np.array([[1, 0], [0, 1]]), np.array([[0.0, 1.0], [1.0, 0.0]]))
    with pytest.raises(ErgodicityError):
        solve_markov_modulated(cfg, model)


@settings(max_examples=12, deadline=None)
@given(caps=st.lists(st.integers(1, 4), min_size=2, max_size=3),
       p=st.lists(st.floats(0, 4), min_size=3, max_size=3),
       wf=st.floats(0, 3), wp=st.floats(0, 3), alpha=st.floats(0, 1.5),
       K=st.integers(1, 2), cached=st.sets(st.integers(1, 2)))
def test_solver_agreement_property(caps, p, wf, wp, alpha, K, cached):
    cfg = uniform(caps, K=K, cached=cached, p=p[:len(caps)], wf=wf, wp=wp)
    arr = per_user_zipf_arrivals(cfg, alpha)
    reps = [solve(cfg, arr, name) for name in SOLVERS]
    for rep in reps[1:]:
        assert rep.average_cost == pytest.approx(reps[0].average_cost, abs=1e-6)
        assert np.array_equal(rep.policy, reps[0].policy)
