"""Brute-force enumeration oracles, independent of the library's fast paths."""

import itertools

import numpy as np


def iter_paths(kernel, n):
    """Yield (probability, positions) over all length-n paths from 0."""
    steps = [tuple(int(c) for c in s) for s in kernel.steps]
    probs = [float(p) for p in kernel.probs]
    d = kernel.d
    for choice in itertools.product(range(len(steps)), repeat=n):
        prob = 1.0
        pos = (0,) * d
        path = [pos]
        for idx in choice:
            prob *= probs[idx]
            pos = tuple(a + b for a, b in zip(pos, steps[idx]))
            path.append(pos)
        yield prob, path


def exact_range_mean(kernel, n):
    """E|X_[0,n]| by full enumeration."""
    total = 0.0
    for prob, path in iter_paths(kernel, n):
        total += prob * len(set(path))
    return total


def exact_bridge_range_mean(kernel, n, x):
    """E(|X_[0,n]| | X_n = x) by full enumeration; None if unreachable."""
    x = tuple(int(c) for c in x)
    num = den = 0.0
    for prob, path in iter_paths(kernel, n):
        if path[-1] == x:
            num += prob * len(set(path))
            den += prob
    return num / den if den > 0 else None


def exact_pmf(kernel, n):
    """p_n as a dict site -> probability."""
    out = {}
    for prob, path in iter_paths(kernel, n):
        out[path[-1]] = out.get(path[-1], 0.0) + prob
    return out


def exact_sausage_green(kernel, p, x, n_max):
    """sum_{n<=n_max} E[1(X_n=x) (1-p)^{|X_[0,n]|}] by enumeration."""
    x = tuple(int(c) for c in x)
    total = 0.0
    for n in range(n_max + 1):
        for prob, path in iter_paths(kernel, n):
            if path[-1] == x:
                total += prob * (1.0 - p) ** len(set(path))
    return total


def exact_survival(kernel, p, x, n_max):
    """E[(1-p)^{|X_[0,T_x]|}; T_x <= n_max] by enumeration."""
    x = tuple(int(c) for c in x)
    total = 0.0
    # sum over first-hit paths: no earlier visit to x
    for n in range(n_max + 1):
        for prob, path in iter_paths(kernel, n):
            if path[-1] == x and x not in path[:-1]:
                total += prob * (1.0 - p) ** len(set(path))
    return total


def exact_first_returns(kernel, L):
    """q_l for l = 1..L by enumeration (origin avoided strictly between)."""
    out = np.zeros(L + 1)
    origin = (0,) * kernel.d
    for n in range(1, L + 1):
        for prob, path in iter_paths(kernel, n):
            if path[-1] == origin and origin not in path[1:-1]:
                out[n] += prob
    return out
