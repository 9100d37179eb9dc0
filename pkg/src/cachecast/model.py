"""System description, per-stage costs, queue dynamics and state encoding.

Contents and users are 1-based in every public function (``u = 1..M``,
``k = 1..K``).  Action ``IDLE`` (0) serves nothing and costs nothing; it is
only produced by the threshold baseline, never by the solvers.

States are encoded with a mixed radix whose most significant digit is the
first content (uniform) or the first (content, user) pair in content-major
order (nonuniform), i.e. ``numpy.ravel_multi_index`` in C order over the
radices ``cap + 1``.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CapacityError

UNIFORM = "uniform"
NONUNIFORM = "nonuniform"
IDLE = 0

DEFAULT_MAX_STATES = 5_000_000


@dataclass(eq=False)
class SystemConfig:
    """Complete instance description.

    ``caps`` and ``power`` have shape ``(M,)`` in the uniform case and
    ``(M, K)`` in the nonuniform case.  ``cached`` holds 1-based content
    indices.
    """

    num_contents: int
    num_users: int
    cached: frozenset
    caps: np.ndarray
    fetch_base: np.ndarray
    power: np.ndarray
    weight_fetch: float = 1.0
    weight_power: float = 1.0
    case_kind: str = UNIFORM

    def __post_init__(self):
        M, K = int(self.num_contents), int(self.num_users)
        if M < 1 or K < 1:
            raise ValueError("num_contents and num_users must be positive")
        self.num_contents, self.num_users = M, K
        self.cached = frozenset(int(m) for m in self.cached)
        if not self.cached <= set(range(1, M + 1)):
            raise ValueError(f"cached set {sorted(self.cached)} not within 1..{M}")
        if self.case_kind not in (UNIFORM, NONUNIFORM):
            raise ValueError(f"unknown case_kind {self.case_kind!r}")
        shape = (M,) if self.case_kind == UNIFORM else (M, K)
        caps = np.array(self.caps, dtype=np.int64)
        if caps.ndim == 0:
            caps = np.full(shape, int(caps), dtype=np.int64)
        power = np.array(self.power, dtype=float)
        if power.ndim == 0:
            power = np.full(shape, float(power))
        if caps.shape != shape or power.shape != shape:
            raise ValueError(f"caps and power must have shape {shape}")
        if np.any(caps < 1):
            raise ValueError("all caps must be >= 1")
        if np.any(power < 0):
            raise ValueError("power costs must be non-negative")
        if self.case_kind == NONUNIFORM and np.any(np.diff(power, axis=1) < 0):
            raise ValueError("power[m, :] must be non-decreasing in the user index")
        fetch = np.array(self.fetch_base, dtype=float)
        if fetch.ndim == 0:
            fetch = np.full(M, float(fetch))
        if fetch.shape != (M,) or np.any(fetch < 0):
            raise ValueError("fetch_base must be M non-negative values")
        if self.weight_fetch < 0 or self.weight_power < 0:
            raise ValueError("weights must be non-negative")
        self.caps, self.power, self.fetch_base = caps, power, fetch
        self.weight_fetch = float(self.weight_fetch)
        self.weight_power = float(self.weight_power)

    @classmethod
    def uniform(cls, caps, *, cached=(), fetch_base=0.0, power=0.0, num_users=1,
                weight_fetch=1.0, weight_power=1.0):
        caps = np.atleast_1d(np.asarray(caps, dtype=np.int64))
        return cls(len(caps), num_users, frozenset(cached), caps, fetch_base, power,
                   weight_fetch, weight_power, UNIFORM)

    @classmethod
    def nonuniform(cls, caps, *, cached=(), fetch_base=0.0, power=0.0,
                   weight_fetch=1.0, weight_power=1.0):
        caps = np.atleast_2d(np.asarray(caps, dtype=np.int64))
        M, K = caps.shape
        return cls(M, K, frozenset(cached), caps, fetch_base, power,
                   weight_fetch, weight_power, NONUNIFORM)

    @property
    def is_uniform(self):
        return self.case_kind == UNIFORM

    @property
    def queue_shape(self):
        return tuple(self.caps.shape)

    @property
    def radices(self):
        return self.caps.ravel() + 1

    @property
    def num_states(self):
        return math.prod(self.radices.tolist())

    @property
    def fetch_costs(self):
        """f(u) for u = 1..M as an array indexed from 0."""
        mask = np.array([m + 1 not in self.cached for m in range(self.num_contents)])
        return np.where(mask, self.fetch_base, 0.0)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return {
            "case_kind": self.case_kind,
            "num_contents": self.num_contents,
            "num_users": self.num_users,
            "cached": sorted(self.cached),
            "caps": self.caps.tolist(),
            "fetch_base": self.fetch_base.tolist(),
            "power": self.power.tolist(),
            "weight_fetch": self.weight_fetch,
            "weight_power": self.weight_power,
        }

    @classmethod
    def from_dict(cls, data):
        kind = data.get("case_kind", UNIFORM)
        M = int(data["num_contents"])
        K = int(data.get("num_users", 1))
        shape = (M,) if kind == UNIFORM else (M, K)
        caps = np.broadcast_to(np.asarray(data["caps"], dtype=np.int64), shape)
        power = np.broadcast_to(np.asarray(data.get("power", 0.0), dtype=float), shape)
        fetch = np.broadcast_to(np.asarray(data.get("fetch_base", 0.0), dtype=float), (M,))
        return cls(M, K, frozenset(data.get("cached", ())), caps, fetch, power,
                   data.get("weight_fetch", 1.0), data.get("weight_power", 1.0), kind)


def load_config(path):
    """Read a JSON instance file; returns ``(config, raw_dict)``."""
    raw = json.loads(Path(path).read_text())
    instance = raw.get("instance", raw)
    return SystemConfig.from_dict(instance), raw


@dataclass(frozen=True)
class CostBreakdown:
    delay: float
    power: float
    fetch: float
    total: float

    @classmethod
    def combine(cls, delay, power, fetch, weight_fetch, weight_power):
        delay, power, fetch = float(delay), float(power), float(fetch)
        return cls(delay, power, fetch, delay + weight_fetch * fetch + weight_power * power)

    @property
    def service(self):
        return self.total - self.delay

    def as_dict(self):
        return dataclasses.asdict(self)


class StateSpace:
    """Mixed-radix enumeration of the in-range queue states of a config."""

    def __init__(self, config, max_states=DEFAULT_MAX_STATES):
        self.config = config
        self.radices = config.radices
        size = config.num_states
        if max_states is not None and size > max_states:
            raise CapacityError(
                f"state space has {size} states, above the bound {max_states}",
                required=size, limit=max_states)
        self.size = int(size)
        strides = np.ones(len(self.radices), dtype=np.int64)
        for d in range(len(self.radices) - 2, -1, -1):
            strides[d] = strides[d + 1] * self.radices[d + 1]
        self.strides = strides
        self._states = None

    @property
    def dims(self):
        return len(self.radices)

    @property
    def states(self):
        """All states as an ``(S, D)`` array in index order."""
        if self._states is None:
            grids = np.unravel_index(np.arange(self.size), tuple(self.radices))
            self._states = np.stack(grids, axis=1).astype(np.int64)
        return self._states

    def encode(self, flat):
        return np.asarray(flat, dtype=np.int64) @ self.strides

    def decode(self, index):
        return self.states[index].reshape(self.config.queue_shape)


def _flat_state(state, config):
    q = np.asarray(state, dtype=np.int64)
    if q.shape != config.queue_shape:
        raise ValueError(f"state shape {q.shape} != {config.queue_shape}")
    if np.any(q < 0) or np.any(q > config.caps):
        raise ValueError(f"state {q.tolist()} out of range for caps {config.caps.tolist()}")
    return q.ravel()


def encode_state(state, config):
    """Mixed-radix index of an in-range queue state."""
    q = _flat_state(state, config)
    return int(np.ravel_multi_index(tuple(q), tuple(config.radices)))


def decode_state(index, config):
    size = config.num_states
    if not 0 <= index < size:
        raise ValueError(f"index {index} outside [0, {size})")
    digits = np.unravel_index(int(index), tuple(config.radices))
    return np.array(digits, dtype=np.int64).reshape(config.queue_shape)


def _check_action(u, config):
    if not 0 <= u <= config.num_contents:
        raise ValueError(f"action {u} outside 1..{config.num_contents}")


def fetch_cost(u, config):
    """Backhaul cost of scheduling content ``u``; zero when cached."""
    _check_action(u, config)
    if u == IDLE:
        return 0.0
    return float(config.fetch_costs[u - 1])


def worst_user(row):
    """1-based index of the last user with a pending request, 0 if none."""
    nz = np.flatnonzero(np.asarray(row) > 0)
    return int(nz[-1]) + 1 if len(nz) else 0


def power_cost(state, u, config):
    _check_action(u, config)
    if u == IDLE:
        return 0.0
    if config.is_uniform:
        return float(config.power[u - 1])
    q = np.asarray(state)
    k = worst_user(q[u - 1])
    return float(config.power[u - 1, k - 1]) if k else 0.0


def per_stage_cost(state, u, config):
    q = _flat_state(state, config)
    return CostBreakdown.combine(q.sum(), power_cost(np.asarray(state), u, config),
                                 fetch_cost(u, config), config.weight_fetch, config.weight_power)


def queue_step(state, u, arrival, config):
    """Serve content ``u`` (emptying its queues), then add arrivals and cap.

    ``arrival`` may be given per content (shape ``(M,)``) or per pair
    (shape ``(M, K)``); in the uniform case a pair matrix is summed over users.
    """
    _check_action(u, config)
    q = np.array(state, dtype=np.int64).reshape(config.queue_shape)
    a = np.asarray(arrival, dtype=np.int64)
    if np.any(a < 0):
        raise ValueError("arrivals must be non-negative")
    if config.is_uniform and a.ndim == 2:
        a = a.sum(axis=1)
    if a.shape != config.queue_shape:
        raise ValueError(f"arrival shape {a.shape} != {config.queue_shape}")
    if u != IDLE:
        q[u - 1] = 0
    return np.minimum(q + a, config.caps)


def transition_expectation(values, state, u, arrivals, config):
    """E[V(Q')] for one state-action pair under an arrival distribution."""
    arrivals.validate()
    space = StateSpace(config, max_states=None)
    v = np.asarray(values, dtype=float)
    if v.shape != (space.size,):
        raise ValueError("value table does not cover the state space")
    outcomes = arrivals.queue_outcomes(config)
    total = 0.0
    for a, p in zip(outcomes, arrivals.probs):
        total += p * v[encode_state(queue_step(state, u, a.reshape(config.queue_shape), config),
                                    config)]
    return float(total)


# Vectorised tables shared by the solvers and the simulator.

def delay_vector(config, space):
    return space.states.sum(axis=1).astype(float)


def power_table(config, space):
    """Power cost for every (state, content); shape ``(S, M)``."""
    S, M = space.size, config.num_contents
    if config.is_uniform:
        return np.broadcast_to(config.power, (S, M)).copy()
    K = config.num_users
    rows = space.states.reshape(S, M, K) > 0
    # last occupied user per (state, content); -1 when the row is empty
    last = K - 1 - np.argmax(rows[:, :, ::-1], axis=2)
    last = np.where(rows.any(axis=2), last, -1)
    out = config.power[np.arange(M)[None, :], np.maximum(last, 0)]
    return np.where(last >= 0, out, 0.0)


def cost_tables(config, space):
    """Per-stage delay ``(S,)``, power ``(S, M)`` and fetch ``(M,)`` components."""
    return delay_vector(config, space), power_table(config, space), config.fetch_costs


def stage_cost_table(config, space):
    delay, power, fetch = cost_tables(config, space)
    return delay[:, None] + config.weight_fetch * fetch[None, :] + config.weight_power * power


def successor_table(config, space, outcomes, include_idle=False):
    """Next-state index for every (action, state, outcome).

    ``outcomes`` is ``(O, D)`` in flat queue layout.  Returns an int64 array of
    shape ``(A, S, O)`` where actions are 0-based contents, plus a trailing
    idle action when ``include_idle``.
    """
    states = space.states
    caps = config.caps.ravel()
    M = config.num_contents
    per_content = space.dims // M
    n_actions = M + int(include_idle)
    out = np.empty((n_actions, space.size, len(outcomes)), dtype=np.int64)
    for u in range(n_actions):
        kept = states.copy()
        if u < M:
            kept[:, u * per_content:(u + 1) * per_content] = 0
        nxt = np.minimum(kept[:, None, :] + outcomes[None, :, :], caps)
        out[u] = nxt @ space.strides
    return out
