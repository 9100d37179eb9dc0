"""Policy tables, switch-curve extraction, structure verifiers, the monotone
policy counter, and the baseline policies.

A policy table is a 1-D integer array with one 1-based action per encoded
state (``IDLE`` = 0 is allowed only for the threshold baseline).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .approx import BasePolicy, myopic_policy
from .errors import StructureError
from .model import DEFAULT_MAX_STATES, IDLE, StateSpace

INFINITY = math.inf


@dataclass(frozen=True)
class Violation:
    state: tuple
    action: int
    successor: tuple
    successor_action: int
    arrival_state: int = 0


def _space(config):
    return StateSpace(config, max_states=None)


def _check_table(policy, size):
    p = np.asarray(policy, dtype=np.int64)
    if p.ndim != 1 or len(p) != size:
        raise ValueError(f"policy table must have {size} entries, got shape {p.shape}")
    return p


def _as_tuple(state):
    return tuple(np.asarray(state).ravel().tolist())


def verify_switch_structure(policy, config, arrival_states=1):
    """All (Q, u) with mu(Q) = u but mu(Q + e_u) != u (uniform case).

    With ``arrival_states`` > 1 the table is over augmented states
    ``q * L + a`` and the implication is checked within each arrival state.
    """
    if not config.is_uniform:
        raise ValueError("verify_switch_structure needs a uniform config")
    space = _space(config)
    L = int(arrival_states)
    table = _check_table(policy, space.size * L).reshape(space.size, L)
    states = space.states
    out = []
    for u in range(1, config.num_contents + 1):
        col = u - 1
        rows = np.flatnonzero(states[:, col] < config.caps[col])
        nxt = rows + space.strides[col]
        bad_r, bad_a = np.nonzero((table[rows] == u) & (table[nxt] != u))
        for r, a in zip(bad_r, bad_a):
            out.append(Violation(_as_tuple(states[rows[r]]), u, _as_tuple(states[nxt[r]]),
                                 int(table[nxt[r], a]), int(a)))
    return sorted(out, key=lambda v: (v.arrival_state, v.state, v.action))


def dominates(upper, lower):
    """``upper`` dominates ``lower`` in the partial order of the nonuniform case.

    Per content row: entries up to the last occupied user of ``lower`` may
    only grow, entries beyond it must be equal.
    """
    hi = np.atleast_2d(np.asarray(upper))
    lo = np.atleast_2d(np.asarray(lower))
    if hi.shape != lo.shape:
        raise ValueError("states must have the same shape")
    K = hi.shape[1]
    for m in range(hi.shape[0]):
        occ = np.flatnonzero(lo[m] > 0)
        last = occ[-1] if len(occ) else -1
        k = np.arange(K)
        if np.any((k <= last) & (hi[m] < lo[m])) or np.any((k > last) & (hi[m] != lo[m])):
            return False
    return True


def verify_partial_switch_structure(policy, config, arrival_states=1):
    """All (Q, u, k) with mu(Q) = u, Q + E_{u,k} dominating Q, and
    mu(Q + E_{u,k}) != u (nonuniform case)."""
    if config.is_uniform:
        raise ValueError("verify_partial_switch_structure needs a nonuniform config")
    space = _space(config)
    L = int(arrival_states)
    table = _check_table(policy, space.size * L).reshape(space.size, L)
    M, K = config.num_contents, config.num_users
    states = space.states
    q = states.reshape(space.size, M, K)
    caps = config.caps.ravel()
    out = []
    for u in range(1, M + 1):
        row = q[:, u - 1, :]
        for k in range(K):
            d = (u - 1) * K + k
            # adding at user k keeps the order iff some user >= k is occupied
            guarded = np.any(row[:, k:] > 0, axis=1) & (states[:, d] < caps[d])
            rows = np.flatnonzero(guarded)
            nxt = rows + space.strides[d]
            bad_r, bad_a = np.nonzero((table[rows] == u) & (table[nxt] != u))
            for r, a in zip(bad_r, bad_a):
                out.append(Violation(_as_tuple(states[rows[r]]), u,
                                     _as_tuple(states[nxt[r]]), int(table[nxt[r], a]),
                                     int(a)))
    return sorted(out, key=lambda v: (v.arrival_state, v.state, v.action))


def verify_structure(policy, config, arrival_states=1):
    if config.is_uniform:
        return verify_switch_structure(policy, config, arrival_states)
    return verify_partial_switch_structure(policy, config, arrival_states)


@dataclass(eq=False)
class SwitchCurve:
    """Threshold of one content over the configurations of the other queues.

    ``thresholds`` has one axis per other content (in content order) and
    holds ``inf`` where the content is never scheduled.
    """

    content: int
    caps: np.ndarray
    thresholds: np.ndarray

    def at(self, others):
        return float(self.thresholds[tuple(others)])

    def sentinel(self):
        """Integer thresholds with ``inf`` replaced by ``cap + 1``."""
        cap = int(self.caps[self.content - 1])
        t = np.where(np.isinf(self.thresholds), cap + 1, self.thresholds)
        return t.astype(np.int64)


def extract_switch_curves(policy, config):
    """Switch curve of every content; refuses policies without switch structure."""
    violations = verify_switch_structure(policy, config)
    if violations:
        raise StructureError(f"policy has {len(violations)} switch violations", violations)
    space = _space(config)
    table = np.asarray(policy).reshape(tuple(space.radices))
    curves = []
    for u in range(1, config.num_contents + 1):
        hit = np.moveaxis(table == u, u - 1, -1)
        first = np.argmax(hit, axis=-1).astype(float)
        first[~hit.any(axis=-1)] = INFINITY
        curves.append(SwitchCurve(u, config.caps.copy(), first))
    return curves


def policy_from_curves(curves, config):
    """Rebuild a policy table from switch curves (lowest content wins overlaps)."""
    space = _space(config)
    states = space.states
    out = np.zeros(space.size, dtype=np.int64)
    for curve in reversed(curves):
        u = curve.content
        others = np.delete(states, u - 1, axis=1)
        th = curve.thresholds[tuple(others.T)]
        out[states[:, u - 1] >= th] = u
    if np.any(out == 0):
        raise ValueError("curves leave some states without an action")
    return out


def verify_monotone_curve(curve):
    """True iff the thresholds never decrease along the other content's queue.

    Accepts a :class:`SwitchCurve` or a 1-D sequence of thresholds.
    """
    t = np.asarray(curve.thresholds if isinstance(curve, SwitchCurve) else curve, dtype=float)
    if t.ndim != 1:
        raise ValueError("monotonicity is only defined for two-content curves")
    return all(b >= a for a, b in zip(t, t[1:]))


def count_monotone_policies(n1, n2):
    """Number of two-content policies with non-decreasing switch curves."""
    if n1 < 1 or n2 < 1:
        raise ValueError("caps must be >= 1")
    return math.comb(n1 + n2 + 2, n1 + 1)


@dataclass(eq=False)
class RandomPolicy:
    """Stochastic baseline: each slot's action drawn from a base distribution."""

    base: BasePolicy

    def actions(self, size, rng):
        return self.base.sample(rng, size)


def baseline_random(base):
    return RandomPolicy(base)


def baseline_lqf(config, max_states=DEFAULT_MAX_STATES):
    """Serve the content with the most pending requests; lowest index on ties."""
    space = StateSpace(config, max_states=max_states)
    width = 1 if config.is_uniform else config.num_users
    load = space.states.reshape(space.size, config.num_contents, width).sum(axis=2)
    return np.argmax(load, axis=1) + 1


def baseline_myopic(config, max_states=DEFAULT_MAX_STATES):
    return myopic_policy(config, max_states)


@dataclass(frozen=True)
class RulePolicy:
    """State-feedback baseline evaluated on the fly (``lqf`` or ``myopic``)."""

    kind: str

    def __post_init__(self):
        if self.kind not in ("lqf", "myopic"):
            raise ValueError(f"unknown rule {self.kind!r}")


def baseline_threshold(config, thresholds, fallback="lowest", max_states=DEFAULT_MAX_STATES):
    """Serve the lowest-index content whose load reaches its threshold.

    When none qualifies, ``fallback="lowest"`` schedules content 1 anyway
    (its costs are charged) and ``fallback="idle"`` schedules nothing.
    """
    if fallback not in ("lowest", "idle"):
        raise ValueError("fallback must be 'lowest' or 'idle'")
    th = np.broadcast_to(np.asarray(thresholds), (config.num_contents,))
    space = StateSpace(config, max_states=max_states)
    width = 1 if config.is_uniform else config.num_users
    load = space.states.reshape(space.size, config.num_contents, width).sum(axis=2)
    ok = load >= th[None, :]
    out = np.where(ok.any(axis=1), np.argmax(ok, axis=1) + 1, 1 if fallback == "lowest" else IDLE)
    return out.astype(np.int64)


def write_policy_csv(policy, config, path, arrival_states=1):
    """One row per state: queue entries, (arrival state), action."""
    space = _space(config)
    L = int(arrival_states)
    table = _check_table(policy, space.size * L)
    names = _queue_names(config)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["state_index"] + names + (["arrival_state"] if L > 1 else []) + ["action"])
        for i in range(space.size * L):
            q, a = divmod(i, L)
            w.writerow([i] + space.states[q].tolist() + ([a] if L > 1 else []) + [table[i]])


def write_curves_csv(curves, config, path):
    """One row per (content, configuration of the other queues); infinite
    thresholds are written as ``cap + 1``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        others = [f"other_{i}" for i in range(1, config.num_contents)]
        w.writerow(["content"] + others + ["threshold"])
        for c in curves:
            sent = c.sentinel()
            for idx in np.ndindex(sent.shape):
                w.writerow([c.content] + list(idx) + [int(sent[idx])])


def write_violations_csv(violations, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arrival_state", "state", "action", "successor", "successor_action"])
        for v in violations:
            w.writerow([v.arrival_state, " ".join(map(str, v.state)), v.action,
                        " ".join(map(str, v.successor)), v.successor_action])


def _queue_names(config):
    if config.is_uniform:
        return [f"q{m}" for m in range(1, config.num_contents + 1)]
    return [f"q{m}_{k}" for m in range(1, config.num_contents + 1)
            for k in range(1, config.num_users + 1)]
