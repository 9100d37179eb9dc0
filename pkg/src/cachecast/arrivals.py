"""Finite joint distributions of per-slot request arrivals."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse import csgraph, csr_matrix

from .errors import CapacityError, ErgodicityError

DEFAULT_MAX_SUPPORT = 100_000
NORMALIZATION_TOL = 1e-12


def zipf_pmf(num_contents, alpha):
    """Normalised Zipf popularity ``P_m ∝ m^-alpha`` for m = 1..M."""
    if num_contents < 1:
        raise ValueError("num_contents must be >= 1")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    w = np.arange(1, num_contents + 1, dtype=float) ** (-float(alpha))
    return w / w.sum()


@dataclass(eq=False)
class ArrivalDistribution:
    """Explicit finite support of arrival outcomes.

    ``outcomes`` has shape ``(O, M)`` (per-content totals) or ``(O, M, K)``
    (per content-user pair).
    """

    outcomes: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        self.outcomes = np.asarray(self.outcomes, dtype=np.int64)
        self.probs = np.asarray(self.probs, dtype=float)
        if self.outcomes.ndim not in (2, 3) or len(self.outcomes) != len(self.probs):
            raise ValueError("outcomes must be (O, M) or (O, M, K) matching probs")
        self.validate()

    def validate(self):
        if self.outcomes.min() < 0:
            raise ValueError("arrival counts must be non-negative")
        if not 0 < self.probs.min() <= self.probs.max() <= 1:
            raise ValueError("probabilities must lie in (0, 1]")
        total = self.probs.sum()
        if abs(total - 1.0) > NORMALIZATION_TOL:
            raise ValueError(f"probabilities sum to {total!r}, not 1")
        return self

    @property
    def event_shape(self):
        return self.outcomes.shape[1:]

    @property
    def support_size(self):
        return len(self.probs)

    @property
    def per_pair(self):
        return self.outcomes.ndim == 3

    def collapse(self):
        """Merge identical outcomes, summing their probabilities."""
        return _merge(self.outcomes, self.probs)

    def aggregate(self):
        """Per-content totals ``A_m = sum_k A_{m,k}``, merged."""
        if not self.per_pair:
            return self.collapse()
        return _merge(self.outcomes.sum(axis=2), self.probs)

    def queue_outcomes(self, config):
        """Outcomes in the flat queue layout of ``config``: ``(O, D)``."""
        return queue_layout(self.outcomes, config)

    def marginal(self, m):
        """Distribution of content ``m``'s arrivals (1-based) as (values, probs).

        Values are scalars ``(O',)`` for per-content outcomes, ``(O', K)`` for
        per-pair outcomes.
        """
        vals = self.outcomes[:, m - 1]
        flat = vals.reshape(len(vals), -1)
        uniq, inv = np.unique(flat, axis=0, return_inverse=True)
        probs = np.bincount(inv.ravel(), weights=self.probs, minlength=len(uniq))
        if vals.ndim == 1:
            uniq = uniq[:, 0]
        return uniq, probs

    def expectation(self, fn):
        return float(sum(p * fn(a) for a, p in zip(self.outcomes, self.probs)))

    def sample_indices(self, rng, size):
        return rng.choice(len(self.probs), size=size, p=self.probs)


def queue_layout(outcomes, config):
    """Reshape ``(O, M)`` or ``(O, M, K)`` outcomes to the flat queue layout."""
    M = config.num_contents
    if outcomes.shape[1] != M:
        raise ValueError(f"arrivals cover {outcomes.shape[1]} contents, config has {M}")
    if config.is_uniform:
        out = outcomes.sum(axis=2) if outcomes.ndim == 3 else outcomes
        return out.reshape(len(out), M)
    if outcomes.ndim != 3 or outcomes.shape[2] != config.num_users:
        raise ValueError("nonuniform configs need per-pair (O, M, K) arrivals")
    return outcomes.reshape(len(outcomes), -1)


def _merge(outcomes, probs):
    flat = outcomes.reshape(len(outcomes), -1)
    uniq, inv = np.unique(flat, axis=0, return_inverse=True)
    merged = np.bincount(inv.ravel(), weights=probs, minlength=len(uniq))
    return ArrivalDistribution(uniq.reshape((len(uniq),) + outcomes.shape[1:]), merged)


def _compositions(total, parts):
    """All tuples of ``parts`` non-negative ints summing to ``total``."""
    if parts == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


def per_user_arrivals(config, popularity, *, max_support=DEFAULT_MAX_SUPPORT):
    """Each user requests exactly one content per slot, independently.

    Uniform configs get the multinomial aggregate over contents; nonuniform
    configs get the full per-pair support ``M**K``.
    """
    P = np.asarray(popularity, dtype=float)
    M, K = config.num_contents, config.num_users
    if P.shape != (M,) or abs(P.sum() - 1) > NORMALIZATION_TOL or np.any(P < 0):
        raise ValueError("popularity must be a probability vector over the contents")
    if config.is_uniform:
        size = math.comb(K + M - 1, M - 1)
        if size > max_support:
            raise CapacityError(f"multinomial support {size} exceeds {max_support}",
                                required=size, limit=max_support)
        outcomes, probs = [], []
        logk = math.lgamma(K + 1)
        for counts in _compositions(K, M):
            if any(c > 0 and P[m] == 0 for m, c in enumerate(counts)):
                continue
            lp = logk + sum(c * math.log(P[m]) - math.lgamma(c + 1)
                            for m, c in enumerate(counts) if c)
            outcomes.append(counts)
            probs.append(math.exp(lp))
        probs = np.array(probs)
        return ArrivalDistribution(np.array(outcomes), probs / probs.sum())
    size = M ** K
    if size > max_support:
        raise CapacityError(f"per-user support {size} exceeds {max_support}",
                            required=size, limit=max_support)
    outcomes, probs = [], []
    for choice in itertools.product(range(M), repeat=K):
        p = float(np.prod(P[list(choice)]))
        if p == 0:
            continue
        a = np.zeros((M, K), dtype=np.int64)
        a[list(choice), np.arange(K)] = 1
        outcomes.append(a)
        probs.append(p)
    probs = np.array(probs)
    return ArrivalDistribution(np.array(outcomes), probs / probs.sum())


def per_user_zipf_arrivals(config, alpha, *, max_support=DEFAULT_MAX_SUPPORT):
    return per_user_arrivals(config, zipf_pmf(config.num_contents, alpha),
                             max_support=max_support)


def scalar_distribution(spec):
    """Normalise a scalar distribution given as ``{value: prob}`` or ``(values, probs)``."""
    if isinstance(spec, dict):
        values, probs = zip(*sorted((int(k), float(v)) for k, v in spec.items()))
    else:
        values, probs = spec
    values = np.asarray(values, dtype=np.int64)
    probs = np.asarray(probs, dtype=float)
    keep = probs > 0
    values, probs = values[keep], probs[keep]
    if abs(probs.sum() - 1) > NORMALIZATION_TOL:
        raise ValueError("scalar distribution is not normalised")
    return values, probs


def independent_product(per_queue, shape=None, *, max_support=DEFAULT_MAX_SUPPORT):
    """Cartesian product of independent scalar distributions.

    ``per_queue`` lists one distribution per content (uniform) or per
    content-user pair in content-major order; ``shape`` gives the event shape
    (defaults to ``(len(per_queue),)``).
    """
    dists = [scalar_distribution(d) for d in per_queue]
    shape = tuple(shape) if shape is not None else (len(dists),)
    if int(np.prod(shape)) != len(dists):
        raise ValueError(f"{len(dists)} distributions do not fill shape {shape}")
    size = int(np.prod([len(v) for v, _ in dists], dtype=object))
    if size > max_support:
        raise CapacityError(f"product support {size} exceeds {max_support}",
                            required=size, limit=max_support)
    grids = np.meshgrid(*[np.arange(len(v)) for v, _ in dists], indexing="ij")
    idx = np.stack([g.ravel() for g in grids], axis=1)
    outcomes = np.stack([dists[j][0][idx[:, j]] for j in range(len(dists))], axis=1)
    probs = np.prod([dists[j][1][idx[:, j]] for j in range(len(dists))], axis=0)
    return _merge(outcomes.reshape((size,) + shape), probs)


def deterministic_arrivals(outcome):
    a = np.asarray(outcome, dtype=np.int64)
    return ArrivalDistribution(a[None], np.ones(1))


@dataclass(eq=False)
class MarkovArrivalModel:
    """Arrival outcome that evolves as a finite Markov chain across slots."""

    states: np.ndarray
    transition: np.ndarray

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.int64)
        self.transition = np.asarray(self.transition, dtype=float)
        n = len(self.states)
        if self.transition.shape != (n, n):
            raise ValueError("transition matrix must be square over the arrival states")

    @property
    def num_states(self):
        return len(self.states)

    def queue_outcomes(self, config):
        return queue_layout(self.states, config)


@dataclass(frozen=True)
class MarkovValidation:
    stationary: np.ndarray
    period: int
    irreducible: bool


def chain_period(adjacency):
    """Period of an irreducible chain from BFS levels of its graph."""
    n = adjacency.shape[0]
    level = np.full(n, -1)
    level[0] = 0
    frontier = [0]
    g = 0
    rows = [np.flatnonzero(adjacency[i]) for i in range(n)]
    while frontier:
        nxt = []
        for i in frontier:
            for j in rows[i]:
                if level[j] < 0:
                    level[j] = level[i] + 1
                    nxt.append(j)
        frontier = nxt
    for i in range(n):
        for j in rows[i]:
            g = math.gcd(g, int(level[i] + 1 - level[j]))
    return g


def stationary_distribution(P):
    """Stationary vector of an irreducible row-stochastic matrix."""
    n = P.shape[0]
    A = (np.eye(n) - P).T
    A[-1, :] = 1.0
    b = np.zeros(n)
    b[-1] = 1.0
    pi = np.linalg.solve(A, b)
    return np.clip(pi, 0.0, None) / np.clip(pi, 0.0, None).sum()


def validate_markov_model(model):
    """Check row-stochasticity and ergodicity; return the stationary law."""
    P = model.transition
    if np.any(P < 0):
        raise ValueError("transition probabilities must be non-negative")
    rows = P.sum(axis=1)
    if np.any(np.abs(rows - 1) > NORMALIZATION_TOL):
        raise ValueError(f"transition rows sum to {rows.tolist()}")
    adjacency = P > 0
    n_comp, _ = csgraph.connected_components(csr_matrix(adjacency), directed=True,
                                             connection="strong")
    if n_comp != 1:
        raise ErgodicityError(f"arrival chain is reducible ({n_comp} communicating classes)")
    period = chain_period(adjacency)
    if period != 1:
        raise ErgodicityError(f"arrival chain is periodic with period {period}")
    return MarkovValidation(stationary_distribution(P), period, True)
