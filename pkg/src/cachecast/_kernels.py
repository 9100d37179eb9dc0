"""Compiled inner loops.  States are swept in increasing index order, so a
predecessor ``Q - e_u`` (smaller index) is always decided before ``Q``."""

import numpy as np
from numba import njit


@njit(cache=True)
def _backup(g, succ, probs, V, s, u):
    acc = g[s, u]
    for o in range(succ.shape[2]):
        acc += probs[s, o] * V[succ[u, s, o]]
    return acc


@njit(cache=True)
def _predicted(pol, pred, pred_act, s):
    for j in range(pred.shape[1]):
        p = pred[s, j]
        if p >= 0 and pol[p] == pred_act[j]:
            return pred_act[j]
    return -1


@njit(cache=True)
def _first_within(J, tie_tol):
    """Lowest index whose value is within the relative tolerance of the min."""
    best = J.min()
    bound = best + tie_tol * max(1.0, abs(best))
    for u in range(J.shape[0]):
        if J[u] <= bound:
            return u
    return 0


@njit(cache=True)
def value_sweep(g, succ, probs, V, n_actions, pred, pred_act, structured, tie_tol, Vout, pol):
    """One Bellman sweep; returns the number of skipped minimisations."""
    skipped = 0
    J = np.empty(n_actions)
    for s in range(g.shape[0]):
        a = _predicted(pol, pred, pred_act, s) if structured else -1
        if a >= 0:
            Vout[s] = _backup(g, succ, probs, V, s, a)
            pol[s] = a
            skipped += 1
            continue
        for u in range(n_actions):
            J[u] = _backup(g, succ, probs, V, s, u)
        Vout[s] = J.min()
        pol[s] = _first_within(J, tie_tol)
    return skipped


@njit(cache=True)
def policy_sweep(g, succ, probs, V, n_actions, pred, pred_act, structured, current, tie_tol,
                 new):
    """Greedy policy update that keeps the current action on (near) ties."""
    skipped = 0
    J = np.empty(n_actions)
    for s in range(g.shape[0]):
        a = _predicted(new, pred, pred_act, s) if structured else -1
        if a >= 0:
            new[s] = a
            skipped += 1
            continue
        for u in range(n_actions):
            J[u] = _backup(g, succ, probs, V, s, u)
        best = J.min()
        cur = current[s]
        if J[cur] <= best + tie_tol * max(1.0, abs(best)):
            new[s] = cur
        else:
            new[s] = _first_within(J, tie_tol)
    return skipped


MODE_TABLE = 0
MODE_SEQUENCE = 1
MODE_SEPARABLE = 2
MODE_LQF = 3
MODE_MYOPIC = 4


@njit(cache=True)
def _power(q, u, width, uniform, power):
    if uniform:
        return power[u, 0]
    for k in range(width - 1, -1, -1):
        if q[u * width + k] > 0:
            return power[u, k]
    return 0.0


@njit(cache=True)
def _separable_values(q, delay, width, uniform, power, fetch, w_f, w_p, keep, serve,
                      local_strides, J):
    """J[u] = g(Q, u) + sum_m E[V_m(Q'_m)] for an additive value function.

    ``keep[m, i]`` is E[V_m(Q'_m)] from local state index i when m is not
    served; ``serve[m]`` is the same when it is.
    """
    M = J.shape[0]
    total = 0.0
    for m in range(M):
        li = 0
        for k in range(width):
            li += q[m * width + k] * local_strides[m * width + k]
        J[m] = serve[m] - keep[m, li]
        total += keep[m, li]
    for m in range(M):
        J[m] += delay + total + w_f * fetch[m] + w_p * _power(q, m, width, uniform, power)


@njit(cache=True)
def _structured_hint(q, s, pol, strides, width):
    """Action u of a predecessor Q - E_{u,k} that chose u and is dominated by Q.

    In the uniform case (width 1) every in-range predecessor qualifies.
    """
    for d in range(q.shape[0]):
        if q[d] == 0:
            continue
        u = d // width
        if pol[s - strides[d]] != u:
            continue
        k = d - u * width
        if width == 1 or q[d] > 1:
            return u
        for i in range(k + 1, width):
            if q[u * width + i] > 0:
                return u
    return -1


@njit(cache=True)
def separable_sweep(caps, width, uniform, power, fetch, w_f, w_p, keep, serve, local_strides,
                    strides, structured, tie_tol, pol):
    """Greedy policy over an additive value function for every state, in
    index order; returns the number of skipped minimisations."""
    D = caps.shape[0]
    M = D // width
    q = np.zeros(D, dtype=np.int64)
    J = np.empty(M)
    skipped = 0
    delay = 0
    for s in range(pol.shape[0]):
        a = _structured_hint(q, s, pol, strides, width) if structured else -1
        if a >= 0:
            pol[s] = a
            skipped += 1
        else:
            _separable_values(q, float(delay), width, uniform, power, fetch, w_f, w_p, keep,
                              serve, local_strides, J)
            pol[s] = _first_within(J, tie_tol)
        # advance the mixed-radix counter, last digit fastest
        d = D - 1
        while d >= 0 and q[d] == caps[d]:
            delay -= q[d]
            q[d] = 0
            d -= 1
        if d >= 0:
            q[d] += 1
            delay += 1
    return skipped


@njit(cache=True)
def simulate_queues(mode, caps, width, uniform, outcomes, draws, actions, table, strides,
                    power, fetch, w_f, w_p, keep, serve, local_strides, tie_tol, warmup):
    """Run one trajectory from the zero state on the flat queue vector.

    ``width`` is the number of queues per content (1 uniform, K nonuniform).
    Returns post-warmup sums of (delay, power, fetch).  Actions are 0-based
    with -1 meaning idle.
    """
    D = caps.shape[0]
    M = D // width
    q = np.zeros(D, dtype=np.int64)
    J = np.empty(M)
    d_sum = 0.0
    p_sum = 0.0
    f_sum = 0.0
    for t in range(draws.shape[0]):
        delay = 0.0
        for d in range(D):
            delay += q[d]
        if mode == MODE_TABLE:
            idx = 0
            for d in range(D):
                idx += q[d] * strides[d]
            u = table[idx]
        elif mode == MODE_SEQUENCE:
            u = actions[t]
        elif mode == MODE_SEPARABLE:
            _separable_values(q, delay, width, uniform, power, fetch, w_f, w_p, keep, serve,
                              local_strides, J)
        else:
            for m in range(M):
                load = 0.0
                for k in range(width):
                    load += q[m * width + k]
                if mode == MODE_LQF:
                    J[m] = -load
                else:
                    J[m] = w_f * fetch[m] + w_p * _power(q, m, width, uniform, power) - load
        if mode >= MODE_SEPARABLE:
            u = _first_within(J, tie_tol)
        if t >= warmup:
            d_sum += delay
            if u >= 0:
                p_sum += _power(q, u, width, uniform, power)
                f_sum += fetch[u]
        a = outcomes[draws[t]]
        for d in range(D):
            kept = 0 if (u >= 0 and d // width == u) else q[d]
            q[d] = min(kept + a[d], caps[d])
    return d_sum, p_sum, f_sum


@njit(cache=True)
def content_chain(keep_next, serve_next, probs, w, cost):
    """Dense relative values of a small single-content chain.

    The chain moves to ``keep_next[i, o]`` w.p. ``(1 - w) probs[o]`` and to
    ``serve_next[o]`` w.p. ``w probs[o]``.  Returns ``(theta, V, a, b)``;
    ``a, b >= 0`` are states of two different recurrent classes when the
    chain is not unichain (``theta`` and ``V`` are then meaningless).
    """
    n = keep_next.shape[0]
    P = np.zeros((n, n))
    for i in range(n):
        for o in range(probs.shape[0]):
            P[i, keep_next[i, o]] += (1.0 - w) * probs[o]
            P[i, serve_next[o]] += w * probs[o]
    reach = np.zeros((n, n), dtype=np.bool_)
    stack = np.empty(n, dtype=np.int64)
    for src in range(n):
        reach[src, src] = True
        top = 1
        stack[0] = src
        while top > 0:
            top -= 1
            i = stack[top]
            for j in range(n):
                if P[i, j] > 0.0 and not reach[src, j]:
                    reach[src, j] = True
                    stack[top] = j
                    top += 1
    first = -1
    for i in range(n):
        recurrent = True
        for j in range(n):
            if reach[i, j] and not reach[j, i]:
                recurrent = False
                break
        if recurrent:
            if first < 0:
                first = i
            elif not reach[first, i]:
                return 0.0, np.zeros(n), first, i
    A = -P
    for i in range(n):
        A[i, i] += 1.0
        A[i, 0] = 1.0
    x = np.linalg.solve(A, cost)
    theta = x[0]
    x[0] = 0.0
    return theta, x, -1, -1


@njit(cache=True)
def decompose_small(caps, width, uniform, outcomes, probs, weights, power, fetch, w_f, w_p,
                    n_max):
    """Per-content chains under a randomised base policy, all solved densely.

    Returns ``(theta, V, keep, serve, bad)`` with ``V`` and ``keep`` padded to
    ``n_max`` local states; ``bad[m]`` is True when content m's chain is not
    unichain.
    """
    M = weights.shape[0]
    O = probs.shape[0]
    theta = np.zeros(M)
    V = np.zeros((M, n_max))
    keep = np.zeros((M, n_max))
    serve = np.zeros(M)
    bad = np.zeros(M, dtype=np.bool_)
    for m in range(M):
        lc = caps[m * width:(m + 1) * width]
        ls = np.ones(width, dtype=np.int64)
        for k in range(width - 2, -1, -1):
            ls[k] = ls[k + 1] * (lc[k + 1] + 1)
        n = ls[0] * (lc[0] + 1)
        keep_next = np.empty((n, O), dtype=np.int64)
        serve_next = np.zeros(O, dtype=np.int64)
        cost = np.empty(n)
        for o in range(O):
            for k in range(width):
                serve_next[o] += min(outcomes[o, m * width + k], lc[k]) * ls[k]
        q = np.empty(width, dtype=np.int64)
        for i in range(n):
            rem = i
            load = 0.0
            last = -1
            for k in range(width):
                q[k] = rem // ls[k]
                rem -= q[k] * ls[k]
                load += q[k]
                if q[k] > 0:
                    last = k
            if uniform:
                pw = power[m, 0]
            else:
                pw = power[m, last] if last >= 0 else 0.0
            cost[i] = load + weights[m] * (w_f * fetch[m] + w_p * pw)
            for o in range(O):
                idx = 0
                for k in range(width):
                    idx += min(q[k] + outcomes[o, m * width + k], lc[k]) * ls[k]
                keep_next[i, o] = idx
        th, v, a, b = content_chain(keep_next, serve_next, probs, weights[m], cost)
        if a >= 0:
            bad[m] = True
            continue
        theta[m] = th
        V[m, :n] = v
        for i in range(n):
            acc = 0.0
            for o in range(O):
                acc += probs[o] * v[keep_next[i, o]]
            keep[m, i] = acc
        acc = 0.0
        for o in range(O):
            acc += probs[o] * v[serve_next[o]]
        serve[m] = acc
    return theta, V, keep, serve, bad
