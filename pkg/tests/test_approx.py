import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from cachecast.approx import (BasePolicy, SSAPolicy, approximate_state_action_values,
                              base_policy_residual, decompose, myopic_policy, per_content_solve,
                              ssa, transition_distinct)
from cachecast.arrivals import deterministic_arrivals, independent_product, per_user_zipf_arrivals
from cachecast.errors import UnichainError
from cachecast.model import StateSpace, decode_state, encode_state
from cachecast.policies import (extract_switch_curves, verify_partial_switch_structure,
                                verify_switch_structure)
from cachecast.sim import exact_average_cost
from cachecast.solvers import build_mdp, evaluate_randomized, greedy_policy, policy_evaluate
from conftest import SUITE, bernoulli, nonuniform, reference_m2, uniform


def zipf_base(cfg):
    return BasePolicy.zipf(cfg.num_contents, 0.75)


def local_oracle(base, m, cfg, arr):
    """Content m's chain under the base policy, built by enumeration."""
    K = oracles.width(cfg)
    caps = oracles.flat_caps(cfg)[(m - 1) * K:m * K]
    states = list(itertools.product(*(range(c + 1) for c in caps)))
    index = {q: i for i, q in enumerate(states)}
    outs = oracles.queue_outcomes(cfg, arr.outcomes)
    w = base.weights[m - 1]
    n = len(states)
    P = np.zeros((n, n))
    g = np.zeros(n)
    fetch = 0.0 if m in cfg.cached else float(cfg.fetch_base[m - 1])
    for i, q in enumerate(states):
        if cfg.is_uniform:
            power = float(cfg.power[m - 1])
        else:
            occ = [k for k in range(K) if q[k] > 0]
            power = float(cfg.power[m - 1][occ[-1]]) if occ else 0.0
        g[i] = sum(q) + w * (cfg.weight_fetch * fetch + cfg.weight_power * power)
        for a, p in zip(outs, arr.probs):
            a_m = a[(m - 1) * K:m * K]
            kept = tuple(min(x + y, c) for x, y, c in zip(q, a_m, caps))
            served = tuple(min(y, c) for y, c in zip(a_m, caps))
            P[i, index[kept]] += (1 - w) * p
            P[i, index[served]] += w * p
    return oracles.relative_values(P, g)


def test_base_policy_validation():
    with pytest.raises(ValueError):
        BasePolicy(np.array([0.5, 0.4]))
    with pytest.raises(ValueError):
        BasePolicy(np.array([1.2, -0.2]))
    assert np.allclose(BasePolicy.zipf(2, 1.0).weights, [2 / 3, 1 / 3])
    draws = BasePolicy.uniform(3).sample(np.random.default_rng(0), 1000)
    assert set(draws.tolist()) == {1, 2, 3}


@pytest.mark.parametrize("name,cfg,arr", SUITE, ids=[n for n, *_ in SUITE])
def test_per_content_matches_enumeration(name, cfg, arr):
    base = zipf_base(cfg)
    dec = decompose(base, cfg, arr)
    for m in range(1, cfg.num_contents + 1):
        theta, V = local_oracle(base, m, cfg, arr)
        c = dec.contents[m - 1]
        assert c.average_cost == pytest.approx(theta, abs=1e-9)
        assert np.allclose(c.values, V, atol=1e-8)
        single = per_content_solve(base, m, cfg, arr)
        assert single.average_cost == pytest.approx(theta, abs=1e-9)


def test_always_serve_zero_arrivals():
    cfg = uniform((3, 3), cached=(2,), c=3.0, p=(2.0, 5.0), wf=1.5, wp=0.5)
    base = BasePolicy.constant(2, 1)
    c = per_content_solve(base, 1, cfg, deterministic_arrivals((0, 0)))
    assert c.average_cost == pytest.approx(1.5 * 3.0 + 0.5 * 2.0)
    assert c.values[0] == 0.0
    # a queue of q requests is served on the next slot: V = q
    assert np.allclose(c.values, [0, 1, 2, 3])


def test_single_content_collapses_to_full_chain():
    cfg = uniform((6,), p=1.5, wp=2.0)
    arr = independent_product([{0: 0.4, 1: 0.4, 3: 0.2}])
    base = BasePolicy.constant(1, 1)
    c = per_content_solve(base, 1, cfg, arr)
    theta, V = policy_evaluate(np.ones(7, dtype=int), cfg, arr)
    assert c.average_cost == pytest.approx(theta, abs=1e-12)
    assert np.allclose(c.values, V)


def test_per_content_unichain_violation():
    cfg = uniform((2, 2), p=1.0)
    base = BasePolicy.constant(2, 1)
    # content 2 is never served and receives nothing: every level is absorbing
    with pytest.raises(UnichainError):
        per_content_solve(base, 2, cfg, deterministic_arrivals((0, 0)))


def test_per_content_argument_checks():
    cfg, arr = reference_m2()
    with pytest.raises(ValueError):
        per_content_solve(BasePolicy.uniform(3), 1, cfg, arr)
    with pytest.raises(ValueError):
        per_content_solve(BasePolicy.uniform(2), 3, cfg, arr)


@pytest.mark.parametrize("name,cfg,arr", SUITE, ids=[n for n, *_ in SUITE])
def test_decomposition_solves_joint_base_equation(name, cfg, arr):
    base = zipf_base(cfg)
    dec = decompose(base, cfg, arr)
    assert base_policy_residual(dec, cfg, arr) < 1e-8
    theta, _ = evaluate_randomized(build_mdp(cfg, arr), base.weights)
    assert dec.average_cost == pytest.approx(theta, abs=1e-9)


def test_large_local_chain_path():
    cfg = uniform((300, 2), cached=(1,))
    arr = per_user_zipf_arrivals(cfg, 0.75)
    base = zipf_base(cfg)
    dec = decompose(base, cfg, arr)
    theta, V = local_oracle(base, 1, cfg, arr)
    assert dec.contents[0].average_cost == pytest.approx(theta, abs=1e-8)


def test_ssa_single_content():
    cfg = uniform((5,), p=2.0)
    arr = independent_product([bernoulli(0.5)])
    assert np.all(ssa(cfg, arr, BasePolicy.constant(1, 1)).policy == 1)


def test_ssa_symmetric_instance_has_mirrored_curves():
    cfg = uniform((6, 6), K=2, p=2.0, c=3.0)
    arr = per_user_zipf_arrivals(cfg, 0.0)
    pol = ssa(cfg, arr, BasePolicy.uniform(2)).policy
    c1, c2 = extract_switch_curves(pol, cfg)
    # off the tie diagonal the two thresholds mirror each other
    space = StateSpace(cfg)
    for i, (q1, q2) in enumerate(space.states):
        j = encode_state((q2, q1), cfg)
        if q1 != q2:
            assert pol[i] == 3 - pol[j]
    assert c1.thresholds.shape == c2.thresholds.shape


@pytest.mark.parametrize("name,cfg,arr", SUITE, ids=[n for n, *_ in SUITE])
def test_ssa_improves_on_base(name, cfg, arr):
    base = zipf_base(cfg)
    rep = ssa(cfg, arr, base)
    ssa_cost = exact_average_cost(rep.policy, cfg, arr).total
    base_cost = exact_average_cost(base, cfg, arr).total
    assert ssa_cost < base_cost


@pytest.mark.parametrize("name,cfg,arr", SUITE, ids=[n for n, *_ in SUITE])
def test_ssa_structure(name, cfg, arr):
    pol = ssa(cfg, arr, zipf_base(cfg)).policy
    if cfg.is_uniform:
        assert verify_switch_structure(pol, cfg) == []
    else:
        assert verify_partial_switch_structure(pol, cfg) == []


@pytest.mark.parametrize("name,cfg,arr", SUITE, ids=[n for n, *_ in SUITE])
def test_ssa_structured_sweep_matches_full_minimization(name, cfg, arr):
    base = zipf_base(cfg)
    fast = ssa(cfg, arr, base)
    slow = ssa(cfg, arr, base, structured=False)
    assert np.array_equal(fast.policy, slow.policy)
    assert slow.skipped == 0 and fast.performed + fast.skipped == cfg.num_states
    dec = decompose(base, cfg, arr)
    J = approximate_state_action_values(dec, cfg, arr)
    assert np.array_equal(greedy_policy(J) + 1, slow.policy)


LAZY = SUITE[:3] + SUITE[-2:]


@pytest.mark.parametrize("name,cfg,arr", LAZY, ids=[n for n, *_ in LAZY])
def test_lazy_policy_matches_table(name, cfg, arr):
    base = zipf_base(cfg)
    table = ssa(cfg, arr, base).policy
    lazy = SSAPolicy.build(cfg, arr, base)
    rng = np.random.default_rng(0)
    for i in rng.choice(cfg.num_states, size=min(200, cfg.num_states), replace=False):
        assert lazy.action(decode_state(int(i), cfg)) == table[i]


@pytest.mark.parametrize("name,cfg,arr", [e for e in SUITE if e[1].is_uniform],
                         ids=[n for n, c, _ in SUITE if c.is_uniform])
def test_approximate_difference_inequality(name, cfg, arr):
    J = approximate_state_action_values(decompose(zipf_base(cfg), cfg, arr), cfg, arr)
    space = StateSpace(cfg)
    for u in range(cfg.num_contents):
        lo = np.flatnonzero(space.states[:, u] < cfg.caps[u])
        hi = lo + space.strides[u]
        for v in range(cfg.num_contents):
            if v != u:
                assert np.all(J[hi, u] - J[hi, v] <= J[lo, u] - J[lo, v] + 1e-9)


def test_transition_distinct_fails_at_zero_state():
    cfg, arr = reference_m2()
    d = transition_distinct(build_mdp(cfg, arr))
    assert not d[0]
    assert d[1:].all()


def test_myopic_policy_matches_direct_evaluation():
    cfg = nonuniform(3, cached=(1,), p=(2.0, 4.0), wf=1.3, wp=0.7)
    pol = myopic_policy(cfg)
    for i, q in enumerate(StateSpace(cfg).states):
        C = []
        for u in (1, 2):
            d, p, f = oracles.cost(tuple(q), u, cfg)
            served = int(q[(u - 1) * 2:u * 2].sum())
            C.append(cfg.weight_fetch * f + cfg.weight_power * p - served)
        assert pol[i] == int(np.argmin(C)) + 1


@settings(max_examples=10, deadline=None)
@given(caps=st.lists(st.integers(1, 5), min_size=2, max_size=3), alpha=st.floats(0, 1.5),
       wf=st.floats(0, 3), wp=st.floats(0, 3))
def test_decomposition_identity_property(caps, alpha, wf, wp):
    cfg = uniform(caps, K=2, cached=(1,), wf=wf, wp=wp)
    arr = per_user_zipf_arrivals(cfg, alpha)
    dec = decompose(BasePolicy.zipf(len(caps), alpha), cfg, arr)
    assert base_policy_residual(dec, cfg, arr) < 1e-8
