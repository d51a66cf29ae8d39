"""The delta-pinning measure: exact enumeration, Gibbs sampling, field draws,
and domination diagnostics.

The law of the pinned set A on a box L is nu(A) ~ eps^|A| Z_{L\\A}, with Z the
Gaussian partition function given zeros on A and on the exterior. The sampler
is a systematic-scan heat bath whose single-site odds eps*g/(1+eps*g), with
g the conditional density of the field at zero height, match the exact
single-flip ratio of nu, so detailed balance holds by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla
from scipy.linalg.blas import dger
from scipy.special import logsumexp

from .errors import NumericalError, ResourceError, ValidationError
from .green import Region, box_region
from .stats import Estimate, parallel_map, replica_rng

ENUM_LIMIT = 16  # subsets are enumerated for at most 2^16 pinnable sites
PAIR_LIMIT = 9  # exhaustive lattice-condition pair checks
AUDIT_TOL = 1e-2
_AUDIT_VISITS = (1, 13, 137, 1371, 13711, 137111, 1371111)
_REFRESH_CHANGES = 5000


# ---------------------------------------------------------------------------
# heat-bath chain


class GibbsChain:
    """Systematic-scan heat bath for the pinned-site law on a region.

    Maintains the dense inverse of (I - P) restricted to the currently
    unpinned sites, updated by rank-1 pin/unpin formulas, so every
    conditional variance it uses equals the fresh-solve value up to float
    drift; periodic refreshes and scheduled audits keep that drift audited.
    """

    def __init__(self, region: Region, eps: float, seed: int, replica: int = 0,
                 window_radius: int | None = None):
        if eps <= 0:
            raise ValidationError("epsilon must be positive")
        self.region = region
        self.eps = float(eps)
        self.seed = seed
        self.replica = int(replica)
        self.rng = replica_rng(seed, replica)
        self.beta = region.beta
        self.window_radius = window_radius
        n = region.n_alive
        m = region.matrix
        self.diag = 1.0 - region.kernel.p0
        csr = m.tocsr()
        self.nbr_idx = []
        self.nbr_w = []
        for i in range(n):
            sl = slice(csr.indptr[i], csr.indptr[i + 1])
            cols = csr.indices[sl]
            vals = csr.data[sl]
            off = cols != i
            self.nbr_idx.append(cols[off].astype(np.int64))
            self.nbr_w.append(-vals[off])
        self.alive = np.ones(n, dtype=bool)
        self.pinned = np.zeros(n, dtype=bool)
        self.sigma = np.asfortranarray(np.linalg.inv(m.toarray()))
        self.sweeps = 0
        self._visits = 0
        self._changes_since_refresh = 0
        self.audit_max_rel_err = 0.0
        self._site_order = np.arange(n)  # region.sites is lexicographic

    # -- conditional variance bookkeeping ----------------------------------

    def _addback(self, i):
        """Schur diagonal of site i if it were unpinned, at beta = 1."""
        idx = self.nbr_idx[i]
        live = self.alive[idx]
        if not live.any():
            return 1.0 / self.diag
        idx = idx[live]
        w = self.nbr_w[i][live]
        quad = w @ self.sigma[np.ix_(idx, idx)] @ w
        denom = self.diag - quad
        if denom <= 0:
            raise NumericalError("lost positive definiteness; audit the chain")
        return 1.0 / denom

    def _window_sigma(self, i):
        # fresh Dirichlet solve on the sub-box of radius window_radius
        center = self.region.sites[i]
        w = self.window_radius
        near = np.all(np.abs(self.region.sites - center) <= w, axis=1)
        keep = np.flatnonzero(near & (self.alive | (np.arange(len(near)) == i)))
        sub = self.region.matrix[np.ix_(keep, keep)].toarray()
        rhs = np.zeros(len(keep))
        rhs[int(np.searchsorted(keep, i))] = 1.0
        g = sla.cho_solve(sla.cho_factor(sub), rhs)
        return float(g[int(np.searchsorted(keep, i))])

    def raw_variance(self, i) -> float:
        """Conditional variance at site i given the other pins, beta = 1."""
        if self.window_radius is not None:
            s = self._window_sigma(i)
        elif self.alive[i]:
            s = float(self.sigma[i, i])
        else:
            s = self._addback(i)
        self._visits += 1
        if self._visits in _AUDIT_VISITS:
            self._audit(i, s)
        return s

    def _audit(self, i, s):
        fresh = self._fresh_variance(i)
        rel = abs(s - fresh) / fresh
        self.audit_max_rel_err = max(self.audit_max_rel_err, rel)
        if rel > AUDIT_TOL:
            raise NumericalError(
                f"audit failed at site {i}: maintained {s!r} vs fresh {fresh!r}"
            )

    def _fresh_variance(self, i):
        keep = np.flatnonzero(self.alive | (np.arange(len(self.alive)) == i))
        sub = self.region.matrix[np.ix_(keep, keep)].tocsc()
        rhs = np.zeros(len(keep))
        pos = int(np.searchsorted(keep, i))
        rhs[pos] = 1.0
        return float(spla.spsolve(sub, rhs)[pos])

    # -- state changes ------------------------------------------------------

    def _pin(self, i):
        col = self.sigma[:, i].copy()
        self.sigma = dger(-1.0 / col[i], col, col, a=self.sigma, overwrite_a=1)
        self.alive[i] = False
        self.pinned[i] = True
        self._after_change()

    def _unpin(self, i):
        idx = self.nbr_idx[i]
        live = self.alive[idx]
        n = self.sigma.shape[0]
        if live.any():
            idx = idx[live]
            w = self.nbr_w[i][live]
            u = self.sigma[:, idx] @ w
            u[~self.alive] = 0.0
            quad = float(w @ u[idx])
        else:
            u = np.zeros(n)
            quad = 0.0
        s = 1.0 / (self.diag - quad)
        if s <= 0:
            raise NumericalError("lost positive definiteness; audit the chain")
        self.sigma = dger(s, u, u, a=self.sigma, overwrite_a=1)
        # block inverse: cross terms are -Sigma b s with b = -w at the
        # neighbors, i.e. +s u
        self.sigma[:, i] = s * u
        self.sigma[i, :] = s * u
        self.sigma[i, i] = s
        self.alive[i] = True
        self.pinned[i] = False
        self._after_change()

    def _after_change(self):
        self._changes_since_refresh += 1
        if self._changes_since_refresh >= _REFRESH_CHANGES:
            self._refresh()

    def _refresh(self):
        keep = np.flatnonzero(self.alive)
        sub = self.region.matrix[np.ix_(keep, keep)].toarray()
        self.sigma[np.ix_(keep, keep)] = np.linalg.inv(sub)
        self._changes_since_refresh = 0

    # -- public surface -----------------------------------------------------

    def pin_probability(self, i) -> float:
        g = math.sqrt(self.beta / (2.0 * math.pi * self.raw_variance(i)))
        return self.eps * g / (1.0 + self.eps * g)

    def sweep(self):
        """One lexicographic heat-bath scan; exactly one uniform per site."""
        rng = self.rng
        for i in self._site_order:
            pr = self.pin_probability(i)
            want = rng.random() < pr
            if want and not self.pinned[i]:
                if self.window_radius is not None:
                    self._pin_nosigma(i)
                else:
                    self._pin(i)
            elif not want and self.pinned[i]:
                if self.window_radius is not None:
                    self._unpin_nosigma(i)
                else:
                    self._unpin(i)
        self.sweeps += 1

    def _pin_nosigma(self, i):
        self.alive[i] = False
        self.pinned[i] = True

    def _unpin_nosigma(self, i):
        self.alive[i] = True
        self.pinned[i] = False

    def run(self, sweeps):
        for _ in range(int(sweeps)):
            self.sweep()

    def covariance(self, i, j) -> float:
        """G_{A^c}(i, j)/beta for the current pin set; zero if either pinned."""
        if self.pinned[i] or self.pinned[j]:
            return 0.0
        if self.window_radius is not None:
            keep = np.flatnonzero(self.alive)
            sub = self.region.matrix[np.ix_(keep, keep)].tocsc()
            rhs = np.zeros(len(keep))
            rhs[int(np.searchsorted(keep, j))] = 1.0
            g = spla.spsolve(sub, rhs)
            return float(g[int(np.searchsorted(keep, i))]) / self.beta
        return float(self.sigma[i, j]) / self.beta

    def pin_code(self) -> int:
        """Bitmask of the pin set in site order (at most 63 sites)."""
        if len(self.pinned) > 63:
            raise ResourceError("pin_code needs at most 63 sites")
        return int(sum(1 << int(k) for k in np.flatnonzero(self.pinned)))


@dataclass
class PinState:
    """Final state of a heat-bath run plus optional recorded sweeps."""

    region: Region
    pins: np.ndarray  # bool over region sites
    eps: float
    sweeps: int
    seed: int
    burnin: int
    samples: np.ndarray | None = None  # (recorded, n_sites) uint8
    audit_max_rel_err: float = 0.0


def sample_pins(region, eps, sweeps, seed, burnin=None, record=False,
                window_radius=None, replica=0) -> PinState:
    """Run the heat bath for `sweeps` sweeps; record post-burn-in pin rows.

    Burn-in defaults to half the sweeps. Deterministic in (seed, replica).
    """
    if sweeps < 1:
        raise ValidationError("sweeps must be >= 1")
    burnin = sweeps // 2 if burnin is None else int(burnin)
    if not 0 <= burnin <= sweeps:
        raise ValidationError("burnin must lie in [0, sweeps]")
    chain = GibbsChain(region, eps, seed, replica=replica,
                       window_radius=window_radius)
    chain.run(burnin)
    rows = None
    if record:
        rows = np.empty((sweeps - burnin, region.n_alive), dtype=np.uint8)
        for r in range(sweeps - burnin):
            chain.sweep()
            rows[r] = chain.pinned
    else:
        chain.run(sweeps - burnin)
    return PinState(region=region, pins=chain.pinned.copy(), eps=eps,
                    sweeps=sweeps, seed=seed, burnin=burnin, samples=rows,
                    audit_max_rel_err=chain.audit_max_rel_err)


# ---------------------------------------------------------------------------
# exact enumeration


@dataclass
class ExactPinTable:
    """nu restricted to pin sets inside a window, by full enumeration."""

    region: Region
    eps: float
    window: np.ndarray  # site indices allowed to pin
    probs: np.ndarray  # (2^m,), indexed by bitmask over window order
    log_partition: float

    @property
    def n_window(self) -> int:
        return len(self.window)

    def marginal(self, site_index: int) -> float:
        w = int(np.flatnonzero(self.window == site_index)[0])
        masks = np.arange(len(self.probs), dtype=np.uint64)
        return float(self.probs[(masks >> w) & 1 == 1].sum())

    def empty_probability(self, site_indices) -> float:
        bits = 0
        for s in site_indices:
            w = np.flatnonzero(self.window == s)
            if len(w):
                bits |= 1 << int(w[0])
        masks = np.arange(len(self.probs), dtype=np.uint64)
        return float(self.probs[(masks & np.uint64(bits)) == 0].sum())


def _window_indices(region, pin_window):
    if pin_window is None:
        return np.arange(region.n_alive)
    idx = []
    for site in pin_window:
        i = region.site_index(site)
        if i < 0:
            raise ValidationError(f"window site {tuple(site)} is not alive")
        idx.append(i)
    return np.asarray(sorted(set(idx)), dtype=np.int64)


def _mask_members(mask, window):
    return window[[k for k in range(len(window)) if (mask >> k) & 1]]


def exact_pin_measure(region, eps, pin_window=None) -> ExactPinTable:
    """Enumerate nu(A) over all pin sets A inside the window (all alive sites
    by default). Weights: eps^|A| (2 pi)^{|A^c|/2} det(beta (I-P)|_{A^c})^{-1/2}."""
    if eps <= 0:
        raise ValidationError("epsilon must be positive")
    window = _window_indices(region, pin_window)
    m = len(window)
    if m > ENUM_LIMIT:
        raise ResourceError(f"box too large: 2^{m} subsets exceed 2^{ENUM_LIMIT}")
    n = region.n_alive
    mat = region.matrix.toarray()
    sign, logdet_m = np.linalg.slogdet(mat)
    if sign <= 0:
        raise NumericalError("precision matrix is not positive definite")
    sigma = np.linalg.inv(mat)
    log2pi = math.log(2.0 * math.pi)
    logbeta = math.log(region.beta)
    logeps = math.log(eps)
    logw = np.empty(1 << m)
    for mask in range(1 << m):
        a_idx = _mask_members(mask, window)
        k = len(a_idx)
        if k:
            s, ld = np.linalg.slogdet(sigma[np.ix_(a_idx, a_idx)])
            if s <= 0:
                raise NumericalError("subset covariance not positive definite")
        else:
            ld = 0.0
        logz = ((n - k) / 2.0) * (log2pi - logbeta) - 0.5 * (logdet_m + ld)
        logw[mask] = k * logeps + logz
    logz_total = float(logsumexp(logw))
    probs = np.exp(logw - logz_total)
    probs /= probs.sum()
    return ExactPinTable(region=region, eps=eps, window=window, probs=probs,
                         log_partition=logz_total)


def subset_green_table(region, window, probes) -> np.ndarray:
    """G_{A^c}(x, y)/beta for every pin subset of the window and each probe.

    probes: list of (x, y) site-coordinate pairs. Returns (2^m, n_probes).
    """
    window = np.asarray(window, dtype=np.int64)
    m = len(window)
    if m > ENUM_LIMIT:
        raise ResourceError("window too large for subset enumeration")
    sigma = np.linalg.inv(region.matrix.toarray())
    pr_idx = []
    for x, y in probes:
        ix, iy = region.site_index(x), region.site_index(y)
        if ix < 0 or iy < 0:
            raise ValidationError("probe sites must be alive")
        pr_idx.append((ix, iy))
    out = np.empty((1 << m, len(pr_idx)))
    for mask in range(1 << m):
        a_idx = _mask_members(mask, window)
        if len(a_idx):
            block = np.linalg.inv(sigma[np.ix_(a_idx, a_idx)])
        for p, (ix, iy) in enumerate(pr_idx):
            if ix in a_idx or iy in a_idx:
                out[mask, p] = 0.0
            elif len(a_idx):
                out[mask, p] = (sigma[ix, iy]
                                - sigma[ix, a_idx] @ block @ sigma[a_idx, iy])
            else:
                out[mask, p] = sigma[ix, iy]
    return out / region.beta


def gibbs_pin_prob(region, pins, x, eps) -> float:
    """Heat-bath probability that x is pinned given the other pins:
    eps*g/(1 + eps*g) with g the conditional density of phi_x at 0."""
    if eps < 0:
        raise ValidationError("epsilon must be nonnegative")
    if eps == 0:
        return 0.0
    ix = region.site_index(x)
    if ix < 0:
        raise ValidationError("x must belong to the region")
    others = [tuple(region.sites[region.site_index(p)])
              for p in pins if region.site_index(p) != ix]
    sub = Region(region.kernel, region.lo, region.hi, pins=others,
                 beta=region.beta)
    rhs = np.zeros(sub.n_alive)
    rhs[sub.site_index(x)] = 1.0
    g_vec, _ = sub.solve(rhs)
    sigma2 = float(g_vec[sub.site_index(x)]) / region.beta
    g = 1.0 / math.sqrt(2.0 * math.pi * sigma2)
    return eps * g / (1.0 + eps * g)


# ---------------------------------------------------------------------------
# field sampling


def sample_field(region, pins, seed) -> np.ndarray:
    """Exact Gaussian draw given the pin set; zero on pins and outside.

    Returns an array over the full box shape.
    """
    pin_sites = [tuple(map(int, region.sites[i]))
                 for i in np.flatnonzero(np.asarray(pins, dtype=bool))] \
        if isinstance(pins, np.ndarray) else [tuple(map(int, p)) for p in pins]
    sub = Region(region.kernel, region.lo, region.hi, pins=pin_sites,
                 beta=region.beta)
    out = np.zeros(region.shape)
    if sub.n_alive == 0:
        return out
    mat = sub.matrix.toarray()
    try:
        chol = np.linalg.cholesky(mat)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("precision factorization failed") from exc
    z = replica_rng(seed).standard_normal(sub.n_alive)
    phi = sla.solve_triangular(chol.T, z, lower=False) / math.sqrt(region.beta)
    for val, site in zip(phi, sub.sites):
        out[tuple(int(c - l) for c, l in zip(site, region.lo))] = val
    return out


# ---------------------------------------------------------------------------
# FKG lattice condition


@dataclass(frozen=True)
class LatticeCheck:
    min_ratio: float
    argmin_pair: tuple
    pairs_checked: int


def check_lattice_condition(region, eps) -> LatticeCheck:
    """Exhaustive check of nu(AuB) nu(AnB) >= nu(A) nu(B) over all pairs."""
    n = region.n_alive
    if n > PAIR_LIMIT:
        raise ResourceError(f"box too large: need at most {PAIR_LIMIT} sites")
    table = exact_pin_measure(region, eps)
    lw = np.log(table.probs)
    masks = np.arange(1 << n, dtype=np.uint32)
    orm = masks[:, None] | masks[None, :]
    andm = masks[:, None] & masks[None, :]
    diff = lw[orm] + lw[andm] - lw[masks][:, None] - lw[masks][None, :]
    i, j = np.unravel_index(int(np.argmin(diff)), diff.shape)
    return LatticeCheck(min_ratio=float(np.exp(diff[i, j])),
                        argmin_pair=(int(masks[i]), int(masks[j])),
                        pairs_checked=diff.size)


# ---------------------------------------------------------------------------
# Monte Carlo estimators over pin samples


def _chain_average(region, eps, record_fn, samples, seed, replicas=4,
                   burnin=None, window_radius=None):
    per = int(math.ceil(samples / replicas))
    means = []
    for r in range(replicas):
        chain = GibbsChain(region, eps, seed, replica=r,
                           window_radius=window_radius)
        chain.run(per if burnin is None else burnin)
        acc = 0.0
        for _ in range(per):
            chain.sweep()
            acc += record_fn(chain)
        means.append(acc / per)
    means = np.asarray(means)
    stderr = float(means.std(ddof=1) / math.sqrt(replicas)) if replicas > 1 \
        else float("inf")
    return Estimate(mean=float(means.mean()), stderr=stderr,
                    n=per * replicas, seed=seed)


def variance_origin(region, eps, samples, seed, replicas=4, burnin=None,
                    window_radius=None) -> Estimate:
    """Rao-Blackwellized mu(phi_0^2): average of G_{A^c}(0,0)/beta over the
    pin chain; no field draws involved."""
    origin = region.site_index((0,) * region.kernel.d)
    if origin < 0:
        raise ValidationError("origin must be alive in the region")
    return _chain_average(region, eps, lambda ch: ch.covariance(origin, origin),
                          samples, seed, replicas=replicas, burnin=burnin,
                          window_radius=window_radius)


def covariance(region, eps, x, y, samples, seed, replicas=4, burnin=None,
               window_radius=None) -> Estimate:
    """mu(phi_x phi_y) as the chain average of G_{A^c}(x,y)/beta."""
    ix, iy = region.site_index(x), region.site_index(y)
    if ix < 0 or iy < 0:
        raise ValidationError("x and y must be alive in the region")
    return _chain_average(region, eps, lambda ch: ch.covariance(ix, iy),
                          samples, seed, replicas=replicas, burnin=burnin,
                          window_radius=window_radius)


def domination_densities(region, eps, sites) -> tuple[float, float]:
    """Model-fitted Bernoulli densities (p_lo, p_hi) bracketing every
    conditional pin probability on `sites`.

    The conditional variance given other pins is largest with no pins and
    smallest with everything else pinned, so the heat-bath odds at those
    extremes bound the conditionals uniformly; the sandwich constants are
    fitted from the model rather than asserted.
    """
    beta = region.beta
    g_hi = 1.0 / math.sqrt(2.0 * math.pi / (beta * (1.0 - region.kernel.p0)))
    sigma_max = 0.0
    rhs = np.zeros(region.n_alive)
    for s in sites:
        i = region.site_index(s)
        if i < 0:
            raise ValidationError(f"site {tuple(s)} is not alive")
        rhs[:] = 0.0
        rhs[i] = 1.0
        g_vec, _ = region.solve(rhs)
        sigma_max = max(sigma_max, float(g_vec[i]) / beta)
    g_lo = 1.0 / math.sqrt(2.0 * math.pi * sigma_max)
    p_hi = eps * g_hi / (1.0 + eps * g_hi)
    p_lo = eps * g_lo / (1.0 + eps * g_lo)
    return p_lo, p_hi


@dataclass(frozen=True)
class EmptyProbability:
    estimate: Estimate
    lower_curve: float  # (1 - p_hi)^|B|
    upper_curve: float  # (1 - p_lo)^|B|
    density_lo: float
    density_hi: float


def empty_probability(region, eps, sites, samples, seed, replicas=4,
                      burnin=None) -> EmptyProbability:
    """nu(A n B = empty) by Monte Carlo plus the fitted Bernoulli curves."""
    idx = [region.site_index(s) for s in sites]
    if any(i < 0 for i in idx):
        raise ValidationError("all of B must be alive in the region")
    if not idx:
        return EmptyProbability(Estimate(1.0, 0.0, 0, seed), 1.0, 1.0, 0.0, 0.0)
    idx = np.asarray(idx)
    est = _chain_average(
        region, eps, lambda ch: float(not ch.pinned[idx].any()),
        samples, seed, replicas=replicas, burnin=burnin)
    p_lo, p_hi = domination_densities(region, eps, sites)
    b = len(idx)
    return EmptyProbability(est, (1.0 - p_hi) ** b, (1.0 - p_lo) ** b,
                            p_lo, p_hi)


@dataclass(frozen=True)
class StabilityRow:
    radius: int
    value: Estimate


def box_stability(kernel, eps, radii, probe, samples, seed, replicas=4,
                  beta=None, jobs=1) -> list[StabilityRow]:
    """Track a probe across nested boxes; same master seed at every size."""
    if list(radii) != sorted(set(int(r) for r in radii)):
        raise ValidationError("radii must be strictly increasing")
    if probe not in ("unpinned-marginal", "variance"):
        raise ValidationError(f"unknown probe {probe!r}")

    def row(radius):
        region = box_region(kernel, radius, beta=beta)
        origin = region.site_index((0,) * kernel.d)
        if probe == "unpinned-marginal":
            fn = lambda ch: float(not ch.pinned[origin])  # noqa: E731
        else:
            fn = lambda ch: ch.covariance(origin, origin)  # noqa: E731
        return StabilityRow(int(radius),
                            _chain_average(region, eps, fn, samples, seed,
                                           replicas=replicas))

    return parallel_map(row, [int(r) for r in radii], jobs)
