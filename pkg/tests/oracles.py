"""Independent brute-force reference implementations.

Nothing here calls into the code under test except record types, so the
oracles stay a second route to every number they check.
"""
from __future__ import annotations

import math
from functools import lru_cache
from itertools import permutations

import numpy as np


def oracle_local(step, event, cid, lam, d_type) -> float:
    if step.stage not in event.skeleton_hits:
        return -d_type
    req = step.required_roles
    if not req:
        return 1.0
    roles = [a.role for a in event.arguments]
    sat = sum(1 for r in req if r in roles) / len(req)
    viol = 0
    if "Agent" in req:
        viol = 0 if any(a.role == "Agent" and a.entity_id == cid for a in event.arguments) else 1
    return sat - lam * viol


def alignment_paths(m: int, t: int):
    """Every monotone move sequence from (0, 0) to (m, t)."""
    @lru_cache(maxsize=None)
    def go(k, j):
        if k == m and j == t:
            return [()]
        out = []
        if k < m and j < t:
            out += [("match",) + p for p in go(k + 1, j + 1)]
        if j < t:
            out += [("skip",) + p for p in go(k, j + 1)]
        if k < m:
            out += [("miss",) + p for p in go(k + 1, j)]
        return out
    return go(0, 0)


def brute_force_alignment(skeleton, events, cid, lam=0.5, d_type=1.0, d_miss=1.0,
                          d_skip=0.25) -> float:
    steps = skeleton.steps
    best = -np.inf
    for path in alignment_paths(len(steps), len(events)):
        k = j = 0
        total = 0.0
        for move in path:
            if move == "match":
                total += oracle_local(steps[k], events[j], cid, lam, d_type)
                k += 1
                j += 1
            elif move == "skip":
                total -= d_skip
                j += 1
            else:
                total -= d_miss
                k += 1
        best = max(best, total)
    return best


@lru_cache(maxsize=None)
def _perms(n: int, r: int) -> np.ndarray:
    return np.array(list(permutations(range(n), r)), dtype=int).reshape(-1, r)


def brute_force_assignment(w) -> float:
    """Max total over matchings of size min(rows, cols)."""
    w = np.asarray(w, dtype=float)
    n, m = w.shape
    if n == 0 or m == 0:
        return 0.0
    if n <= m:
        p = _perms(m, n)
        return float(w[np.arange(n), p].sum(axis=1).max())
    p = _perms(n, m)
    return float(w[p, np.arange(m)].sum(axis=1).max())


def dcg(gains, k) -> float:
    return float(sum(g / np.log2(i + 2) for i, g in enumerate(gains[:k])))


def central_difference(f, theta, h=1e-5) -> np.ndarray:
    grad = np.zeros_like(theta)
    for i in range(len(theta)):
        e = np.zeros_like(theta)
        e[i] = h
        grad[i] = (f(theta + e) - f(theta - e)) / (2 * h)
    return grad


L3 = 1 / math.log2(3)
L4 = 1 / math.log2(4)
L5 = 1 / math.log2(5)

# (ranked, positives, k, hit, map, ndcg), all worked out by hand
METRIC_FIXTURES = [
    (["a", "b", "c"], {"a"}, 3, 1.0, 1.0, 1.0),
    (["b", "a", "c"], {"a"}, 10, 1.0, 0.5, L3),
    (["a", "b"], set(), 2, 0.0, 0.0, 0.0),
    (["a", "c", "b"], {"a", "b"}, 3, 1.0, (1 + 2 / 3) / 2, (1 + L4) / (1 + L3)),
    (["x", "a"], {"a", "b", "c"}, 2, 1.0, 0.25, L3 / (1 + L3)),
    (["x", "y", "a"], {"a"}, 2, 0.0, 0.0, 0.0),
    (["a", "b"], {"a", "b"}, 2, 1.0, 1.0, 1.0),
    (["a", "c", "d", "b"], {"b"}, 4, 1.0, 0.25, L5),
    (["b", "a", "d", "c"], {"a", "c"}, 4, 1.0, 0.5, (L3 + L5) / (1 + L3)),
    (["a", "b"], {"a"}, 0, 0.0, 0.0, 0.0),
    (["a", "b"], {"a", "b", "c", "d"}, 2, 1.0, 1.0, 1.0),
    (["a", "b", "c"], {"z"}, 3, 0.0, 0.0, 0.0),
    (["c", "a", "b"], {"a", "b"}, 3, 1.0, (1 / 2 + 2 / 3) / 2, (L3 + L4) / (1 + L3)),
]
