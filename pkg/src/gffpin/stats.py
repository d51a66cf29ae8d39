"""Monte Carlo bookkeeping: estimates, deterministic seeding, binomial bounds.

Every sampling operation in the toolkit derives its generators through
``replica_rng`` so that results are a pure function of (master seed, replica
index), independent of how replicas are scheduled across workers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats as _sps


@dataclass(frozen=True)
class Estimate:
    """A Monte Carlo statistic with its provenance."""

    mean: float
    stderr: float
    n: int
    seed: object = None  # int or tuple of ints

    def within(self, target: float, k: float = 3.0) -> bool:
        """True if `target` lies within k standard errors of the mean."""
        return abs(self.mean - target) <= k * self.stderr


def _flatten_seed(seed, out):
    if isinstance(seed, (tuple, list)):
        for s in seed:
            _flatten_seed(s, out)
    else:
        out.append(int(seed))


def replica_rng(seed, *index) -> np.random.Generator:
    """Counter-derived generator: deterministic in (seed, index), collision-free
    across distinct indices. `seed` may be an int or a nested tuple of ints."""
    entropy: list[int] = []
    _flatten_seed(seed, entropy)
    _flatten_seed(index, entropy)
    return np.random.default_rng(np.random.SeedSequence(entropy))


def estimate_from_samples(samples, seed=None) -> Estimate:
    x = np.asarray(samples, dtype=float)
    n = x.size
    if n == 0:
        raise ValueError("no samples")
    se = float(x.std(ddof=1) / np.sqrt(n)) if n > 1 else float("inf")
    return Estimate(mean=float(x.mean()), stderr=se, n=n, seed=seed)


def merge_moments(parts):
    """Associative merge of (sum, sum_sq, count) triples -> Estimate fields."""
    s = sum(p[0] for p in parts)
    ss = sum(p[1] for p in parts)
    n = sum(p[2] for p in parts)
    mean = s / n
    var = max(ss / n - mean * mean, 0.0) * (n / (n - 1)) if n > 1 else float("inf")
    return mean, float(np.sqrt(var / n)), n


def binom_upper(successes: int, trials: int, conf: float = 0.95) -> float:
    """Clopper-Pearson upper bound at two-sided confidence `conf`.

    With zero successes this reduces to 1 - (alpha/2)**(1/n), the textbook
    rule-of-3.7 bound.
    """
    alpha = 1.0 - conf
    if successes >= trials:
        return 1.0
    return float(_sps.beta.ppf(1.0 - alpha / 2.0, successes + 1, trials - successes))


def parallel_map(fn, items, jobs=1):
    """Map over independent tasks, preserving order; results are identical
    for any worker count because tasks share no mutable state."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def batch_stderr(values, batches: int = 20) -> float:
    """Batch-means standard error for autocorrelated sequences."""
    x = np.asarray(values, dtype=float)
    b = min(batches, x.size)
    if b < 2:
        return float("inf")
    cut = (x.size // b) * b
    means = x[:cut].reshape(b, -1).mean(axis=1)
    return float(means.std(ddof=1) / np.sqrt(b))
