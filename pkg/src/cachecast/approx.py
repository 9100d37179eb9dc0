"""Decomposition-based approximate solution.

A state-independent randomised base policy decouples the queues: under it
every content evolves as its own Markov chain, so the base policy's value
function is a sum of per-content value functions.  One greedy step over that
sum gives the SSA policy.

The fetch cost of the base policy is attributed to the content being
scheduled (``w_f f(m)`` with probability ``w_m``), so the per-content average
costs add up to the joint one.  The per-content value functions are the
same as with any other attribution of that state-independent term.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix

from . import _kernels
from .arrivals import zipf_pmf
from .model import DEFAULT_MAX_STATES, StateSpace, per_stage_cost, stage_cost_table
from .solvers import (DEFAULT_TIE_TOLERANCE, build_mdp, evaluate_chain,
                      greedy_policy, state_action_values)

NORMALIZATION_TOL = 1e-12
# the compiled dense path checks reachability in O(n^3)
SMALL_CHAIN = 256


@dataclass(eq=False)
class BasePolicy:
    """Probability of scheduling each content, independent of the state."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or np.any(w < 0) or abs(w.sum() - 1) > NORMALIZATION_TOL:
            raise ValueError("base policy must be a probability vector over 1..M")
        self.weights = w

    @classmethod
    def zipf(cls, num_contents, alpha):
        return cls(zipf_pmf(num_contents, alpha))

    @classmethod
    def uniform(cls, num_contents):
        return cls(np.full(num_contents, 1.0 / num_contents))

    @classmethod
    def constant(cls, num_contents, u):
        w = np.zeros(num_contents)
        w[u - 1] = 1.0
        return cls(w)

    @property
    def num_contents(self):
        return len(self.weights)

    def sample(self, rng, size):
        """1-based actions drawn i.i.d. from the base distribution."""
        return rng.choice(self.num_contents, size=size, p=self.weights) + 1


def _strides(caps):
    r = np.asarray(caps, dtype=np.int64) + 1
    return np.concatenate([np.cumprod(r[::-1])[-2::-1], [1]]).astype(np.int64)


def _local_caps(config, m):
    if config.is_uniform:
        return config.caps[m - 1:m]
    return config.caps[m - 1]


@dataclass(eq=False)
class ContentValue:
    """Relative values of one content's queue(s) under the base policy.

    ``values`` is indexed by the mixed-radix index of the content's local
    state (a scalar queue, or the K user queues of the content).
    """

    content: int
    caps: np.ndarray
    values: np.ndarray
    average_cost: float
    keep: np.ndarray
    serve: float

    @property
    def strides(self):
        return _strides(self.caps)

    def value(self, local_state):
        return float(self.values[np.asarray(local_state, dtype=np.int64).ravel() @ self.strides])


@dataclass(eq=False)
class PerContentValue:
    """All per-content solutions of one base policy."""

    base: BasePolicy
    contents: list
    keep: np.ndarray = None
    serve: np.ndarray = None
    local_strides: np.ndarray = None

    def __post_init__(self):
        if self.local_strides is None:
            self.local_strides = np.concatenate([c.strides for c in self.contents])
        if self.keep is None:
            width = max(len(c.keep) for c in self.contents)
            self.keep = np.zeros((len(self.contents), width))
            for i, c in enumerate(self.contents):
                self.keep[i, :len(c.keep)] = c.keep
        if self.serve is None:
            self.serve = np.array([c.serve for c in self.contents])

    @property
    def average_cost(self):
        return float(sum(c.average_cost for c in self.contents))

    def local_indices(self, config, space):
        """Per-content local index of every joint state, shape ``(S, M)``."""
        width = 1 if config.is_uniform else config.num_users
        states = space.states
        cols = [states[:, i * width:(i + 1) * width] @ c.strides
                for i, c in enumerate(self.contents)]
        return np.stack(cols, axis=1)

    def joint_values(self, config, space=None):
        """V(Q) = sum_m V_m(Q_m) over the joint state space."""
        space = space or StateSpace(config, max_states=None)
        local = self.local_indices(config, space)
        return sum(c.values[local[:, i]] for i, c in enumerate(self.contents))



def per_content_solve(base, m, config, arrivals):
    """Solve content ``m``'s (1-based) chain under the base policy."""
    if base.num_contents != config.num_contents:
        raise ValueError("base policy and config disagree on the number of contents")
    if not 1 <= m <= config.num_contents:
        raise ValueError(f"content {m} outside 1..{config.num_contents}")
    arrivals.validate()
    return _content_value(base, m, config, arrivals)


def _content_value(base, m, config, arrivals):
    caps = np.asarray(_local_caps(config, m), dtype=np.int64)
    radices = caps + 1
    local = np.stack(np.unravel_index(np.arange(int(np.prod(radices))), tuple(radices)), axis=1)
    if config.is_uniform:
        totals = arrivals.outcomes[:, m - 1]
        if totals.ndim == 2:
            totals = totals.sum(axis=1)
        probs = np.bincount(totals, weights=arrivals.probs)
        values = np.flatnonzero(probs)
        probs = probs[values]
    else:
        values, probs = arrivals.marginal(m)
    values = values.reshape(len(values), -1)
    strides = _strides(caps)
    keep_next = np.minimum(local[:, None, :] + values[None, :, :], caps) @ strides
    serve_next = np.minimum(values, caps) @ strides
    n = len(local)
    w = float(base.weights[m - 1])

    if config.is_uniform:
        power = np.full(n, config.power[m - 1])
    else:
        occupied = local > 0
        last = caps.size - 1 - np.argmax(occupied[:, ::-1], axis=1)
        power = np.where(occupied.any(axis=1), config.power[m - 1][last], 0.0)
    fetch = config.fetch_costs[m - 1]
    cost = local.sum(axis=1) + w * (config.weight_fetch * fetch + config.weight_power * power)
    theta, V = _solve_content(keep_next, serve_next, probs, w, cost)
    return ContentValue(m, caps, V, theta, V[keep_next] @ probs, float(V[serve_next] @ probs))


def _solve_content(keep_next, serve_next, probs, w, cost):
    n = len(cost)
    if n <= SMALL_CHAIN:
        theta, V, a, b = _kernels.content_chain(keep_next, serve_next, probs, w, cost)
        if a < 0:
            return float(theta), V
    # large chains, and the error path with its class report
    rows = np.repeat(np.arange(n), len(probs))
    P = csr_matrix(((1 - w) * np.tile(probs, n), (rows, keep_next.ravel())), shape=(n, n))
    P = P + csr_matrix((w * np.tile(probs, n), (rows, np.tile(serve_next, n))), shape=(n, n))
    return evaluate_chain(P.tocsr(), cost, 0)


def decompose(base, config, arrivals):
    if base.num_contents != config.num_contents:
        raise ValueError("base policy and config disagree on the number of contents")
    arrivals.validate()
    M = config.num_contents
    local_caps = [np.asarray(_local_caps(config, m), dtype=np.int64) for m in range(1, M + 1)]
    sizes = [math.prod((c + 1).tolist()) for c in local_caps]
    if max(sizes) > SMALL_CHAIN:
        return PerContentValue(base, [_content_value(base, m, config, arrivals)
                                      for m in range(1, M + 1)])
    width = 1 if config.is_uniform else config.num_users
    theta, V, keep, serve, bad = _kernels.decompose_small(
        config.caps.ravel(), width, config.is_uniform, arrivals.queue_outcomes(config),
        arrivals.probs, base.weights, config.power.reshape(M, width), config.fetch_costs,
        config.weight_fetch, config.weight_power, max(sizes))
    contents = []
    for i in range(M):
        if bad[i]:
            # rerun on the general path, which reports the recurrent classes
            contents.append(_content_value(base, i + 1, config, arrivals))
            continue
        n = sizes[i]
        contents.append(ContentValue(i + 1, local_caps[i], V[i, :n], float(theta[i]),
                                     keep[i, :n], float(serve[i])))
    r = config.caps.reshape(M, width) + 1
    strides = np.ones_like(r)
    strides[:, :-1] = np.cumprod(r[:, :0:-1], axis=1)[:, ::-1]
    return PerContentValue(base, contents, keep, serve, strides.ravel())


def base_policy_residual(decomposition, config, arrivals):
    """Max |theta + V(Q) - sum_u w_u (g(Q,u) + E[V(Q')])| over joint states,
    with V the sum of per-content values."""
    mdp = build_mdp(config, arrivals)
    V = decomposition.joint_values(config)
    J = state_action_values(mdp, V)
    rhs = J @ decomposition.base.weights
    return float(np.max(np.abs(decomposition.average_cost + V - rhs)))


@dataclass
class SSAReport:
    policy: np.ndarray
    decomposition: PerContentValue
    performed: int
    skipped: int
    wall_time: float

    @property
    def skip_fraction(self):
        total = self.performed + self.skipped
        return self.skipped / total if total else 0.0


def ssa(config, arrivals, base=None, *, structured=True, tie_tolerance=DEFAULT_TIE_TOLERANCE,
        max_states=DEFAULT_MAX_STATES, alpha=None):
    """Greedy policy (1-based table) over the summed per-content values.

    ``base`` defaults to the Zipf distribution with exponent ``alpha`` (or the
    uniform distribution when ``alpha`` is None).
    """
    start = time.perf_counter()
    if base is None:
        base = (BasePolicy.uniform(config.num_contents) if alpha is None
                else BasePolicy.zipf(config.num_contents, alpha))
    dec = decompose(base, config, arrivals)
    space = StateSpace(config, max_states=max_states)
    pol = np.full(space.size, -1, dtype=np.int64)
    skipped = _kernels.separable_sweep(*_separable_args(config, dec), space.strides, structured,
                                       tie_tolerance, pol)
    return SSAReport(pol + 1, dec, space.size - int(skipped), int(skipped),
                     time.perf_counter() - start)


def _separable_args(config, dec):
    """Arguments shared by the compiled sweep and the trajectory simulator."""
    width = 1 if config.is_uniform else config.num_users
    return (config.caps.ravel(), width, config.is_uniform,
            config.power.reshape(config.num_contents, width), config.fetch_costs,
            config.weight_fetch, config.weight_power, dec.keep, dec.serve, dec.local_strides)


def approximate_state_action_values(decomposition, config, arrivals):
    """J_hat(Q, u) = g(Q, u) + E[sum_m V_m(Q'_m)] for every joint state."""
    mdp = build_mdp(config, arrivals)
    return state_action_values(mdp, decomposition.joint_values(config))


@dataclass(eq=False)
class SSAPolicy:
    """SSA actions computed on demand, for state spaces too large to tabulate."""

    config: object
    decomposition: PerContentValue
    tie_tolerance: float = DEFAULT_TIE_TOLERANCE

    @classmethod
    def build(cls, config, arrivals, base):
        return cls(config, decompose(base, config, arrivals))

    def action(self, state):
        cfg = self.config
        q = np.asarray(state, dtype=np.int64).reshape(cfg.queue_shape)
        dec = self.decomposition
        keep = np.array([c.keep[q[i].ravel() @ c.strides] for i, c in enumerate(dec.contents)])
        serve = dec.serve
        J = np.empty(cfg.num_contents)
        for u in range(1, cfg.num_contents + 1):
            J[u - 1] = (per_stage_cost(q, u, cfg).total + keep.sum() - keep[u - 1]
                        + serve[u - 1])
        return int(greedy_policy(J[None, :], self.tie_tolerance)[0]) + 1


def myopic_policy(config, max_states=DEFAULT_MAX_STATES):
    """argmin_u w_f f(u) + w_p p(Q,u) - (requests served by u), lowest index on ties."""
    space = StateSpace(config, max_states=max_states)
    width = 1 if config.is_uniform else config.num_users
    served = space.states.reshape(space.size, config.num_contents, width).sum(axis=2)
    C = stage_cost_table(config, space) - space.states.sum(axis=1)[:, None] - served
    return greedy_policy(C, 1e-12) + 1


def transition_distinct(mdp):
    """Per state: do all actions induce pairwise different next-state laws?"""
    S, M = mdp.num_states, mdp.n_contents
    out = np.ones(S, dtype=bool)
    laws = []
    for u in range(M):
        rows = np.repeat(np.arange(S), mdp.succ.shape[2])
        P = csr_matrix((np.asarray(mdp.probs).ravel(), (rows, mdp.succ[u].ravel())),
                       shape=(S, S))
        P.sum_duplicates()
        laws.append(P)
    for u in range(M):
        for v in range(u + 1, M):
            diff = abs(laws[u] - laws[v])
            out &= np.asarray(diff.max(axis=1).todense()).ravel() > 1e-15
    return out
