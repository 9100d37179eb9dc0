"""Monte Carlo simulation and exact stationary evaluation of policies.

Replication ``r`` of a run seeded with ``seed`` draws from a Philox
generator keyed by ``SeedSequence([seed, r])``, so each replication is
reproducible on its own and independent of the replication count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import identity
from scipy.sparse.linalg import spsolve

from . import _kernels
from .approx import BasePolicy, SSAPolicy
from .model import DEFAULT_MAX_STATES, IDLE, CostBreakdown, StateSpace
from .policies import RandomPolicy, RulePolicy
from .solvers import (DEFAULT_TIE_TOLERANCE, _as_internal, build_mdp, chain_matrix,
                      check_unichain)


@dataclass
class SimOptions:
    horizon: int = 100_000
    warmup: int | None = None
    replications: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.warmup is None:
            self.warmup = self.horizon // 10
        if not self.horizon > self.warmup >= 0:
            raise ValueError("need horizon > warmup >= 0")
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")


@dataclass
class SimResult:
    mean: CostBreakdown
    stderr: CostBreakdown
    replications: list = field(default_factory=list)

    def rows(self, **labels):
        """CSV-ready dicts: one per replication plus mean and stderr rows."""
        out = []
        for r, c in enumerate(self.replications):
            out.append({**labels, "row": f"rep{r}", **c.as_dict()})
        out.append({**labels, "row": "mean", **self.mean.as_dict()})
        out.append({**labels, "row": "stderr", **self.stderr.as_dict()})
        return out


def replication_rng(seed, replication):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, replication])))


def _mode_args(policy, config, max_states):
    """Kernel mode and its tables for a policy handle."""
    empty_i = np.zeros(0, dtype=np.int64)
    keep = np.zeros((1, 1))
    serve = np.zeros(1)
    if isinstance(policy, BasePolicy):
        policy = RandomPolicy(policy)
    if isinstance(policy, RandomPolicy):
        return _kernels.MODE_SEQUENCE, empty_i, empty_i, keep, serve, empty_i, policy
    if isinstance(policy, RulePolicy):
        mode = _kernels.MODE_LQF if policy.kind == "lqf" else _kernels.MODE_MYOPIC
        return mode, empty_i, empty_i, keep, serve, empty_i, None
    if isinstance(policy, SSAPolicy):
        dec = policy.decomposition
        return _kernels.MODE_SEPARABLE, empty_i, empty_i, dec.keep, dec.serve, dec.local_strides, None
    space = StateSpace(config, max_states=max_states)
    table = np.asarray(policy, dtype=np.int64)
    if table.shape != (space.size,):
        raise ValueError("policy table does not cover the state space")
    if np.any(table < IDLE) or np.any(table > config.num_contents):
        raise ValueError("policy actions must lie in 0..M")
    return _kernels.MODE_TABLE, table - 1, space.strides, keep, serve, empty_i, None


def simulate(policy, config, arrivals, options=None, *, max_states=DEFAULT_MAX_STATES):
    """Time-averaged cost components over ``options.replications`` runs.

    ``policy`` is a 1-based table, a :class:`RandomPolicy` (or bare
    :class:`BasePolicy`), a :class:`RulePolicy`, or an :class:`SSAPolicy`.
    """
    options = options or SimOptions()
    arrivals.validate()
    mode, table, strides, keep, serve, local, stochastic = _mode_args(policy, config, max_states)
    outcomes = np.ascontiguousarray(arrivals.queue_outcomes(config), dtype=np.int64)
    caps = config.caps.ravel().astype(np.int64)
    width = 1 if config.is_uniform else config.num_users
    power = config.power.reshape(config.num_contents, -1).astype(float)
    fetch = config.fetch_costs.astype(float)
    T, warm = options.horizon, options.warmup
    reps = []
    for r in range(options.replications):
        rng = replication_rng(options.seed, r)
        draws = rng.choice(len(arrivals.probs), size=T, p=arrivals.probs).astype(np.int64)
        actions = (stochastic.actions(T, rng) - 1 if stochastic is not None
                   else np.zeros(0, dtype=np.int64))
        d, p, f = _kernels.simulate_queues(mode, caps, width, config.is_uniform, outcomes, draws,
                                           actions, table, strides, power, fetch,
                                           config.weight_fetch, config.weight_power, keep, serve,
                                           local, DEFAULT_TIE_TOLERANCE, warm)
        n = T - warm
        reps.append(CostBreakdown.combine(d / n, p / n, f / n, config.weight_fetch,
                                          config.weight_power))
    arr = np.array([[c.delay, c.power, c.fetch] for c in reps])
    mean = CostBreakdown.combine(*arr.mean(axis=0), config.weight_fetch, config.weight_power)
    return SimResult(mean, _stderr(arr, config), reps)


def _stderr(arr, config):
    """Standard errors of the replication means; NaN with one replication."""
    n = len(arr)
    if n < 2:
        return CostBreakdown(np.nan, np.nan, np.nan, np.nan)
    se = arr.std(axis=0, ddof=1) / np.sqrt(n)
    totals = arr[:, 0] + config.weight_fetch * arr[:, 2] + config.weight_power * arr[:, 1]
    return CostBreakdown(*se, float(totals.std(ddof=1) / np.sqrt(n)))


def stationary_law(P):
    """Stationary distribution of a unichain sparse transition matrix."""
    check_unichain(P)
    S = P.shape[0]
    A = (identity(S, format="csr") - P).T.tolil()
    A[0, :] = np.ones(S)
    b = np.zeros(S)
    b[0] = 1.0
    pi = spsolve(A.tocsc(), b)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def exact_average_cost(policy, config, arrivals, *, max_states=DEFAULT_MAX_STATES):
    """Long-run average delay, power and fetch cost of a deterministic table
    or a state-independent randomised policy."""
    if isinstance(policy, RandomPolicy):
        policy = policy.base
    if isinstance(policy, BasePolicy):
        mdp = build_mdp(config, arrivals, max_states=max_states)
        w = policy.weights
        pi = stationary_law(chain_matrix(mdp, weights=w))
        return CostBreakdown.combine(pi @ mdp.delay, pi @ (mdp.power[:, :len(w)] @ w),
                                     w @ mdp.fetch[:len(w)], config.weight_fetch,
                                     config.weight_power)
    table = np.asarray(policy, dtype=np.int64)
    mdp = build_mdp(config, arrivals, include_idle=bool(np.any(table == IDLE)),
                    max_states=max_states)
    actions = _as_internal(table, mdp)
    pi = stationary_law(chain_matrix(mdp, actions))
    s = np.arange(mdp.num_states)
    return CostBreakdown.combine(pi @ mdp.delay, pi @ mdp.power[s, actions],
                                 pi @ mdp.fetch[actions], config.weight_fetch,
                                 config.weight_power)
