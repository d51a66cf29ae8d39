"""The one-dimensional pinned chain via renewal theory.

Pinned sites form a renewal process whose spacing density is eps * f(k)
tilted by exp(-lambda k), where f(k) = 1/sqrt(2 pi k) is the k-fold
convolution of the unit Gaussian step at height zero. The tilt lambda(eps)
normalizing the density is simultaneously the mass of the chain; the field
between pins is a Gaussian bridge with E(S_m^2 | S_n = 0) = m (n - m)/n.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erfc

from .errors import NumericalError, ValidationError
from .stats import replica_rng

TOL = 1e-12


def f_pmf(k) -> float:
    """Return-height density f(k) = 1/sqrt(2 pi k) for the Gaussian step."""
    k = np.asarray(k)
    if np.any(k < 1):
        raise ValidationError("k must be >= 1")
    return 1.0 / np.sqrt(2.0 * np.pi * k)


def _tail_bound(lam, k_max):
    # integral comparison: sum_{k>K} e^{-lam k}/sqrt(2 pi k)
    #   <= int_K^inf e^{-lam x}/sqrt(2 pi x) dx = erfc(sqrt(lam K))/sqrt(4 lam)
    return float(erfc(math.sqrt(lam * k_max)) / math.sqrt(4.0 * lam))


def _k_for_tail(lam, tol):
    # erfc(z) <= exp(-z^2), so z = sqrt(-log(tol sqrt(4 lam))) suffices
    z2 = -math.log(max(tol * math.sqrt(4.0 * lam), 1e-280))
    return int(math.ceil(max(z2, 1.0) / lam)) + 1


def _tilted_sum(eps, lam, k_max):
    k = np.arange(1, k_max + 1, dtype=float)
    return float(eps * np.sum(np.exp(-lam * k) / np.sqrt(2.0 * np.pi * k)))


def solve_lambda(eps, k_max=None, tol=TOL) -> float:
    """Unique lambda > 0 with eps * sum_k e^{-lambda k} f(k) = 1, by bisection.

    k_max grows adaptively until the analytic Gaussian tail of the tilted sum
    is below tol; the defining-equation residual at the returned root is
    below tol as well.
    """
    if eps <= 0:
        raise ValidationError("epsilon must be positive")
    lam_guess = max(eps * eps / 2.0, 1e-12)
    for _ in range(80):
        lam_floor = lam_guess / 4.0
        k_cap = k_max if k_max is not None else _k_for_tail(lam_floor, tol / 10.0)
        if eps * _tail_bound(lam_floor, k_cap) > tol:
            if k_max is not None:
                raise ValidationError(
                    f"k_max={k_max} leaves a tilted tail above {tol}")
            k_cap = _k_for_tail(lam_floor, tol / 10.0)
        k = np.arange(1, k_cap + 1, dtype=float)
        fk = eps / np.sqrt(2.0 * np.pi * k)

        def g(lam):
            return float(np.dot(fk, np.exp(-lam * k))) - 1.0

        lo, hi = lam_floor, max(4.0 * lam_guess, 4.0 * math.log(1.0 + eps))
        flo, fhi = g(lo), g(hi)
        grow = 0
        while flo < 0.0 and grow < 200:
            lo /= 4.0
            flo = g(lo)
            grow += 1
        while fhi > 0.0 and grow < 400:
            hi *= 4.0
            fhi = g(hi)
            grow += 1
        if flo < 0.0 or fhi > 0.0:
            raise NumericalError("failed to bracket the tilt")
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if mid == lo or mid == hi:  # bracket at machine precision
                break
            if g(mid) > 0.0:
                lo = mid
            else:
                hi = mid
        lam = 0.5 * (lo + hi)
        if abs(g(lam)) <= tol and abs(lam - lam_guess) <= 0.5 * lam:
            return lam
        lam_guess = lam
    raise NumericalError("tilt iteration did not stabilize")


@dataclass(frozen=True)
class RenewalModel:
    eps: float
    lam: float
    k_max: int
    tilted: np.ndarray  # f_lambda(k) = e^{-lam k} f(k), k = 1..k_max

    @property
    def spacing_pmf(self) -> np.ndarray:
        """eps * f_lambda, the normalized spacing distribution."""
        return self.eps * self.tilted

    def residual(self) -> float:
        return abs(float(self.spacing_pmf.sum()) - 1.0)


def renewal_model(eps, k_max=None, tol=TOL) -> RenewalModel:
    lam = solve_lambda(eps, k_max=k_max, tol=tol)
    k_cap = k_max if k_max is not None else _k_for_tail(lam, tol / 10.0)
    k = np.arange(1, k_cap + 1, dtype=float)
    tilted = np.exp(-lam * k) / np.sqrt(2.0 * np.pi * k)
    return RenewalModel(eps=float(eps), lam=float(lam), k_max=int(k_cap),
                        tilted=tilted)


def renewal_mean(model: RenewalModel) -> float:
    """Size-biased normalizer M = sum_j j f_lambda(j), asymptotically 1/eps^3."""
    k = np.arange(1, model.k_max + 1, dtype=float)
    return float(np.sum(k * model.tilted))


def variance_1d(model: RenewalModel) -> float:
    """Height variance at the origin: (1/M) sum_n f_lambda(n) (n^2 - 1)/6.

    Uses the exact Gaussian bridge second moment E(S_m^2 | S_n = 0)
    = m (n - m)/n, whose sum over m < n is (n^2 - 1)/6.
    """
    k = np.arange(1, model.k_max + 1, dtype=float)
    num = float(np.sum(model.tilted * (k * k - 1.0) / 6.0))
    return num / renewal_mean(model)


def mass_1d(eps, k_max=None, tol=TOL) -> float:
    """The 1D mass equals the tilt lambda(eps) ~ eps^2/2."""
    return solve_lambda(eps, k_max=k_max, tol=tol)


def bridge_second_moment(m: int, n: int) -> float:
    """E(S_m^2 | S_n = 0) = m (n - m) / n for the Gaussian bridge."""
    if not 0 <= m <= n or n < 1:
        raise ValidationError("need 0 <= m <= n, n >= 1")
    return m * (n - m) / n


def simulate_gaps(model: RenewalModel, count, seed) -> np.ndarray:
    """Draw renewal spacings from eps * f_lambda by inverse CDF."""
    cdf = np.cumsum(model.spacing_pmf)
    cdf /= cdf[-1]
    u = replica_rng(seed).random(count)
    return np.searchsorted(cdf, u) + 1


def gap_tail_rate(gaps, lo_quantile=0.5, hi_quantile=0.99, bins=25) -> tuple[float, float]:
    """Exponential rate of the simulated gap law: bin the tail window and fit
    log(bin count * sqrt(k) / width) = a - lambda k, weights from counts.

    Binning keeps per-point counts large; fitting bare per-k counts with a
    count floor would select upward fluctuations in the far tail.
    """
    gaps = np.asarray(gaps, dtype=np.int64)
    lo = float(np.quantile(gaps, lo_quantile))
    hi = float(np.quantile(gaps, hi_quantile))
    edges = np.unique(np.round(np.linspace(lo, hi, bins + 1)).astype(np.int64))
    if len(edges) < 5:
        raise ValidationError("gap sample too narrow for a tail fit")
    counts, _ = np.histogram(gaps, bins=edges)
    widths = np.diff(edges)
    centers = (edges[:-1] + edges[1:] - 1) / 2.0
    sel = counts >= 20
    if sel.sum() < 3:
        raise ValidationError("not enough occupied bins for a tail fit")
    x = centers[sel]
    y = np.log(counts[sel] / widths[sel] * np.sqrt(x))
    w = counts[sel].astype(float)  # Poisson: var(log n) ~ 1/n
    sw = w.sum()
    xb = (w * x).sum() / sw
    yb = (w * y).sum() / sw
    sxx = (w * (x - xb) ** 2).sum()
    slope = (w * (x - xb) * (y - yb)).sum() / sxx
    return -float(slope), float(1.0 / math.sqrt(sxx))
