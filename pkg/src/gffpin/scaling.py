"""Critical-behavior estimators: Bernoulli-environment survival weights,
exponential mass fits, and parameter scans for the variance and the mass.

The Bernoulli surrogate replaces the pinned-site law by independent traps of
density p(eps); a walk surviving among annealed traps carries the weight
(1-p)^{number of distinct sites visited}, and the decay rate of the weighted
hitting probability plays the role of the inverse correlation length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ValidationError
from .green import box_region, green_nstep
from .stats import Estimate, estimate_from_samples, parallel_map, replica_rng
from .walk import _CHUNK, _path_positions, _site_codes
from . import pinning

TRUNCATION_KAPPA = 0.1


# ---------------------------------------------------------------------------
# path ensembles with range tracking


def _range_profile(codes):
    """Cumulative number of distinct sites along each row of site codes."""
    order = np.argsort(codes, axis=1, kind="stable")
    sorted_codes = np.take_along_axis(codes, order, axis=1)
    first_sorted = np.ones_like(codes, dtype=bool)
    first_sorted[:, 1:] = np.diff(sorted_codes, axis=1) != 0
    is_first = np.empty_like(first_sorted)
    np.put_along_axis(is_first, order, first_sorted, axis=1)
    return np.cumsum(is_first, axis=1)


def _ensemble_chunks(kernel, n_max, reps, seed):
    span = n_max * kernel.max_step
    for c, start in enumerate(range(0, reps, _CHUNK)):
        b = min(_CHUNK, reps - start)
        pos = _path_positions(kernel, n_max, b, replica_rng(seed, c))
        codes = _site_codes(pos, span)
        yield pos, codes, _range_profile(codes)


def sausage_samples(kernel, p, x, reps, n_max, seed) -> np.ndarray:
    """Per-path values of sum_{n<=n_max} 1(X_n = x) (1-p)^{|X_[0,n]|}."""
    x = np.asarray(x, dtype=np.int64)
    out = np.empty(reps)
    pos = 0
    for chunk_pos, _codes, ranges in _ensemble_chunks(kernel, n_max, reps, seed):
        hit = np.all(chunk_pos == x, axis=2)
        w = np.where(hit, (1.0 - p) ** ranges, 0.0).sum(axis=1)
        out[pos:pos + len(w)] = w
        pos += len(w)
    return out


def survival_samples(kernel, p, targets, reps, n_max, seed) -> np.ndarray:
    """Per-path weights (1-p)^{|X_[0,T_x]|} 1(T_x <= n_max), one column per
    target. p = 0 reduces each column to the plain hitting indicator."""
    tg = np.asarray(targets, dtype=np.int64)
    if tg.ndim == 1:
        tg = tg[None, :]
    out = np.zeros((reps, len(tg)))
    pos = 0
    for chunk_pos, _codes, ranges in _ensemble_chunks(kernel, n_max, reps, seed):
        b = chunk_pos.shape[0]
        for t, target in enumerate(tg):
            hit = np.all(chunk_pos == target, axis=2)
            any_hit = hit.any(axis=1)
            t_hit = np.argmax(hit, axis=1)
            w = np.where(any_hit, (1.0 - p) ** ranges[np.arange(b), t_hit], 0.0)
            out[pos:pos + b, t] = w
        pos += b
    return out


def truncation_bound(p, n_max) -> float:
    """Reported tail heuristic (1-p)^{kappa n_max / log n_max}, kappa = 0.1."""
    if n_max < 3:
        return 1.0
    return float((1.0 - p) ** (TRUNCATION_KAPPA * n_max / math.log(n_max)))


@dataclass(frozen=True)
class WeightedEstimate:
    estimate: Estimate
    truncation: float
    flagged: bool


def sausage_green(kernel, p, x, reps, n_max, seed) -> WeightedEstimate:
    """Monte Carlo Green function of the walk among Bernoulli(p) traps."""
    if not 0.0 < p <= 1.0:
        if p == 0.0 and kernel.d >= 3:
            pass  # transient walks have a finite trap-free Green function
        else:
            raise ValidationError("need 0 < p <= 1 (p = 0 diverges for d <= 2)")
    samples = sausage_samples(kernel, p, x, reps, n_max, seed)
    est = estimate_from_samples(samples, seed=seed)
    tb = truncation_bound(p, n_max)
    return WeightedEstimate(est, tb, flagged=tb > 0.05 * max(est.mean, 1e-300))


def survival_to_target(kernel, p, x, reps, n_max, seed) -> WeightedEstimate:
    """E[(1-p)^{|X_[0,T_x]|}; T_x <= n_max] for a single target x != 0."""
    if not 0.0 < p < 1.0:
        raise ValidationError("need 0 < p < 1")
    if not any(int(c) for c in x):
        raise ValidationError("target must differ from the origin")
    samples = survival_samples(kernel, p, x, reps, n_max, seed)[:, 0]
    est = estimate_from_samples(samples, seed=seed)
    tb = truncation_bound(p, n_max)
    return WeightedEstimate(est, tb, flagged=tb > 0.05 * max(est.mean, 1e-300))


# ---------------------------------------------------------------------------
# exponential fits


@dataclass(frozen=True)
class MassCurve:
    r: np.ndarray
    values: np.ndarray
    stderr: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.r, dtype=float)
        if np.any(np.diff(r) <= 0):
            raise ValidationError("distances must be increasing")


@dataclass(frozen=True)
class MassFit:
    mass: float
    stderr: float
    intercept: float
    chi2: float
    dof: int
    window: tuple
    monotone_ok: bool


def _wls_line(x, y, sigma):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.all(sigma == 0.0):
        w = np.ones_like(x)
        exact = True
    elif np.any(sigma <= 0.0):
        raise ValidationError("mixed zero and positive error bars")
    else:
        w = 1.0 / sigma**2
        exact = False
    sw = w.sum()
    xbar = (w * x).sum() / sw
    ybar = (w * y).sum() / sw
    sxx = (w * (x - xbar) ** 2).sum()
    if sxx == 0.0:
        raise ValidationError("degenerate abscissa")
    slope = (w * (x - xbar) * (y - ybar)).sum() / sxx
    intercept = ybar - slope * xbar
    resid = y - intercept - slope * x
    chi2 = float((w * resid**2).sum())
    dof = len(x) - 2
    if exact:
        var = chi2 / dof / sxx if dof > 0 else 0.0
    else:
        var = 1.0 / sxx
    return float(slope), float(intercept), float(math.sqrt(max(var, 0.0))), chi2, dof


def mass_fit(curve: MassCurve, window=None) -> MassFit:
    """Weighted least squares of -log C(r) against r; slope is the mass."""
    lo, hi = (0, len(curve.r)) if window is None else window
    r = np.asarray(curve.r, dtype=float)[lo:hi]
    c = np.asarray(curve.values, dtype=float)[lo:hi]
    s = np.asarray(curve.stderr, dtype=float)[lo:hi]
    good = c > 0
    if not good.all():
        raise ValidationError("non-positive curve values in the fit window")
    if len(r) < 3:
        raise ValidationError("need at least 3 points in the fit window")
    y = -np.log(c)
    sy = np.where(c > 0, s / c, 0.0)
    slope, intercept, se, chi2, dof = _wls_line(r, y, sy)
    monotone = True
    prev_m, prev_se = None, None
    for j in range(3, len(r) + 1):
        m_j, _, se_j, _, _ = _wls_line(r[:j], y[:j], sy[:j])
        if prev_m is not None and m_j < prev_m - 2.0 * (se_j + prev_se):
            monotone = False
        prev_m, prev_se = m_j, se_j
    return MassFit(mass=slope, stderr=se, intercept=-intercept, chi2=chi2,
                   dof=dof, window=(lo, hi), monotone_ok=monotone)


# ---------------------------------------------------------------------------
# scans


@dataclass
class ScanResult:
    eps: np.ndarray
    values: list  # per-point Estimate (mass or variance)
    slope: float
    slope_stderr: float
    flags: list
    diagnostics: dict = field(default_factory=dict)


def _check_grid(eps_grid):
    eps = np.asarray(list(eps_grid), dtype=float)
    if len(eps) < 3:
        raise ValidationError("scan grid needs at least 3 points")
    if np.any(np.diff(eps) >= 0) or np.any(eps <= 0):
        raise ValidationError("epsilon grid must be positive, strictly decreasing")
    return eps


def surrogate_density(eps, d, mapping="default") -> float:
    """Trap density for the Bernoulli surrogate; the paper-style mapping uses
    eps/sqrt|log eps| in d = 2 (constants set to 1 and recorded)."""
    if mapping == "direct":
        return float(eps)
    if mapping == "default":
        if d >= 3:
            return float(eps)
        return float(eps / math.sqrt(abs(math.log(eps))))
    raise ValidationError(f"unknown surrogate mapping {mapping!r}")


_MIN_HITS = 50  # drop fit points supported by fewer surviving paths
_JACK_GROUPS = 10
_FIT_LO = 3.0  # fit window, in units of the guessed correlation length
_FIT_HI = 6.0


def _survival_curve(kernel, p, rs, budget, n_max, seed):
    targets = np.zeros((len(rs), kernel.d), dtype=np.int64)
    targets[:, 0] = rs
    weights = survival_samples(kernel, p, targets, budget, n_max, seed)
    vals = weights.mean(axis=0)
    errs = weights.std(axis=0, ddof=1) / math.sqrt(budget)
    counts = (weights > 0).sum(axis=0)
    return weights, vals, errs, counts


def _window(m, lo=_FIT_LO, hi=_FIT_HI, points=6):
    r_lo = max(2, int(math.ceil(lo / m)))
    r_hi = max(r_lo + 4, int(math.ceil(hi / m)))
    return np.unique(np.round(np.linspace(r_lo, r_hi, points)).astype(int))


def _steps_needed(m, sigma1, r_hi):
    # cover 3x the saddle arrival time r/(m sigma1^2) at the far target;
    # 20/m alone undershoots it badly at small trap density
    return int(math.ceil(max(20.0 / m, 3.0 * r_hi / (m * sigma1))))


def _surrogate_point(kernel, eps, budget, seed, mapping, point_index):
    p = surrogate_density(eps, kernel.d, mapping)
    sigma1 = float(kernel.cov[0, 0])
    m_guess = math.sqrt(p / sigma1)
    # pilot pass: recenter the fit window on the measured decay rate
    rs0 = _window(m_guess, hi=8.0, points=5)
    n0 = _steps_needed(m_guess, sigma1, rs0[-1])
    _, v0, e0, c0 = _survival_curve(kernel, p, rs0, max(budget // 4, 4000),
                                    n0, (seed, point_index, 0))
    keep0 = (c0 >= _MIN_HITS) & (v0 > 0)
    if keep0.sum() >= 3:
        m_guess = max(mass_fit(MassCurve(rs0[keep0].astype(float), v0[keep0],
                                         e0[keep0])).mass, 1e-3)
    rs = _window(m_guess)
    n_max = _steps_needed(m_guess, sigma1, rs[-1])
    weights, vals, errs, counts = _survival_curve(
        kernel, p, rs, budget, n_max, (seed, point_index, 1))
    keep = (counts >= _MIN_HITS) & (vals > 0)
    if keep.sum() < 3:
        raise NumericalError(
            f"only {int(keep.sum())} usable distances at eps={eps}")
    curve = MassCurve(rs[keep].astype(float), vals[keep], errs[keep])
    fit = mass_fit(curve)
    # jackknife over path groups: the distances share one ensemble, so the
    # plain WLS slope error understates the mass uncertainty
    groups = np.array_split(np.arange(weights.shape[0]), _JACK_GROUPS)
    jack = []
    for g in groups:
        rest = np.ones(weights.shape[0], dtype=bool)
        rest[g] = False
        v = weights[rest].mean(axis=0)
        e = weights[rest].std(axis=0, ddof=1) / math.sqrt(rest.sum())
        ok = keep & (v > 0)
        if ok.sum() >= 3:
            jack.append(mass_fit(MassCurve(rs[ok].astype(float), v[ok],
                                           e[ok])).mass)
    if len(jack) >= 3:
        jack = np.asarray(jack)
        g = len(jack)
        se = math.sqrt((g - 1) / g * ((jack - jack.mean()) ** 2).sum())
        fit = MassFit(mass=fit.mass, stderr=max(fit.stderr, se),
                      intercept=fit.intercept, chi2=fit.chi2, dof=fit.dof,
                      window=fit.window, monotone_ok=fit.monotone_ok)
    return p, n_max, rs, curve, fit


def mass_scan(kernel, eps_grid, mode="bernoulli-surrogate", budget=20000,
              seed=0, mapping="default", region_radius=None, samples=None,
              jobs=1) -> ScanResult:
    """Mass versus epsilon, with the fitted log-log exponent.

    Modes: "bernoulli-surrogate" simulates annealed traps of density p(eps);
    "pinning-exact" measures the pinned two-point function on a box.
    """
    eps = _check_grid(eps_grid)
    if mode not in ("bernoulli-surrogate", "pinning-exact"):
        raise ValidationError(f"unknown mode {mode!r}")

    def point(arg):
        i, e = arg
        try:
            if mode == "bernoulli-surrogate":
                p, n_max, rs, _curve, fit = _surrogate_point(
                    kernel, e, budget, seed, mapping, i)
                extra = {"density": p, "n_max": n_max, "r_grid": rs.tolist(),
                         "monotone_ok": fit.monotone_ok,
                         "truncation": truncation_bound(p, n_max)}
            else:
                fit = _pinned_mass_point(kernel, e, budget, seed, i,
                                         region_radius, samples)
                extra = {"density": None, "n_max": None, "r_grid": None,
                         "monotone_ok": fit.monotone_ok, "truncation": None}
            return Estimate(fit.mass, fit.stderr, budget, seed), "", extra
        except (ValidationError, NumericalError) as exc:
            return (Estimate(float("nan"), float("inf"), 0, seed),
                    f"fit-failed: {exc}", {})

    results = parallel_map(point, list(enumerate(eps)), jobs)
    masses = [r[0] for r in results]
    flags = [r[1] for r in results]
    diag = {"mode": mode, "mapping": mapping}
    for key in ("density", "n_max", "r_grid", "monotone_ok", "truncation"):
        diag[key] = [r[2].get(key) for r in results]
    ok = [i for i, m in enumerate(masses) if np.isfinite(m.mean) and m.mean > 0]
    if len(ok) < 3:
        raise NumericalError("fewer than 3 usable scan points")
    lx = np.log(eps[ok])
    ly = np.log([masses[i].mean for i in ok])
    sy = np.array([masses[i].stderr / masses[i].mean for i in ok])
    slope, _, se, chi2, dof = _wls_line(lx, ly, sy)
    if kernel.d == 2:
        ratio = np.array([masses[i].mean / math.sqrt(eps[i]) for i in ok])
        diag["m_over_sqrt_eps"] = ratio.tolist()
        # a negative log-power correction makes m/sqrt(eps) grow with eps
        diag["log_correction_monotone"] = bool(np.all(np.diff(ratio) < 0))
    diag["chi2"] = chi2
    diag["dof"] = dof
    return ScanResult(eps=eps, values=masses, slope=float(slope),
                      slope_stderr=float(se), flags=flags, diagnostics=diag)


def _pinned_mass_point(kernel, eps, budget, seed, point_index, region_radius,
                       samples):
    xi_guess = 1.0 / math.sqrt(eps)
    radius = int(region_radius or max(10, math.ceil(4 * xi_guess)))
    region = box_region(kernel, radius)
    rs = np.unique(np.round(np.linspace(2, max(6, radius - 2), 5)).astype(int))
    vals, errs = [], []
    nrec = samples or 400
    for r in rs:
        est = pinning.covariance(region, eps, (0,) * kernel.d,
                                 (int(r),) + (0,) * (kernel.d - 1),
                                 samples=nrec, seed=(seed, point_index, int(r)))
        vals.append(est.mean)
        errs.append(est.stderr)
    vals = np.asarray(vals)
    errs = np.asarray(errs)
    keep = vals > 0
    if keep.sum() < 3:
        raise NumericalError("pinned covariance curve has too few positive points")
    return mass_fit(MassCurve(rs[keep].astype(float), vals[keep], errs[keep]))


def variance_slope_reference(kernel) -> float:
    """(2 pi sqrt(det Q))^{-1} at the beta = 1 normalization; invariant under
    lazification because beta_eff doubles while det Q drops by 2^d/..."""
    return 1.0 / (2.0 * math.pi * kernel.beta_eff * kernel.sqrt_det_cov)


def variance_box_policy(eps, c=1.5, min_radius=8) -> int:
    """Box radius floor c * eps^{-1/2} |log eps| keeping the finite-volume
    error subdominant."""
    return max(int(min_radius), int(math.ceil(c * abs(math.log(eps)) / math.sqrt(eps))))


def variance_scan(kernel, eps_grid, budget=400, seed=0, replicas=4,
                  policy_c=1.5, min_radius=8, box_radius=None, eta=3.0,
                  beta=None, jobs=1) -> ScanResult:
    """Variance at the origin versus |log eps|, with the fitted slope and the
    n0-step Green cross-check value per point."""
    eps = _check_grid(eps_grid)
    policy = f"radius >= {policy_c} * eps^-1/2 |log eps|"
    radii = []
    for e in eps:
        radius = variance_box_policy(e, policy_c, min_radius)
        if box_radius is not None:
            if int(box_radius) < radius:
                raise ValidationError(
                    f"box radius {box_radius} below the policy floor {radius} "
                    f"for eps={e} ({policy})")
            radius = int(box_radius)
        radii.append(radius)

    def point(arg):
        i, e = arg
        region = box_region(kernel, radii[i], beta=beta)
        est = pinning.variance_origin(region, e, samples=budget,
                                      seed=(seed, i), replicas=replicas)
        n0 = int(math.ceil(abs(math.log(e)) ** eta / e))
        return est, n0, green_nstep(kernel, n0) / kernel.beta_eff

    results = parallel_map(point, list(enumerate(eps)), jobs)
    values = [r[0] for r in results]
    flags = ["" for _ in results]
    diag = {"box_radius": radii, "policy": policy,
            "n0": [r[1] for r in results], "gn0": [r[2] for r in results],
            "offsets": [], "slope_reference": variance_slope_reference(kernel)}
    lx = np.abs(np.log(eps))
    ly = np.array([v.mean for v in values])
    sy = np.array([v.stderr for v in values])
    slope, intercept, se, chi2, dof = _wls_line(lx, ly, sy)
    diag["offsets"] = (ly - diag["slope_reference"] * lx).tolist()
    diag["chi2"] = chi2
    diag["dof"] = dof
    return ScanResult(eps=eps, values=values, slope=float(slope),
                      slope_stderr=float(se), flags=flags, diagnostics=diag)
