"""Lattice step kernels and exact single-walk quantities.

Everything here is either exact (dynamic-programming convolutions, renewal
recursions, tied-down identities) or controlled-approximation (saddle-point
pmf, truncated potential-kernel sums with a reported tail estimate), plus
seeded Monte Carlo for range statistics.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ResourceError, ValidationError, WindowTooSmall
from .stats import Estimate, estimate_from_samples, replica_rng

MASS_TOL = 1e-12
_TAIL_SIGMAS = 10.0  # DP window half-width in units of sigma*sqrt(n)
_CHUNK = 256  # paths per sub-seeded replica chunk; part of the seeding scheme


# ---------------------------------------------------------------------------
# kernels


@dataclass(frozen=True, eq=False)
class StepKernel:
    """Symmetric finite-support step distribution on Z^d."""

    d: int
    steps: np.ndarray  # (k, d) int64 support vectors
    probs: np.ndarray  # (k,) probabilities, sum 1
    cov: np.ndarray  # (d, d) second-moment matrix Q
    lazy: bool
    beta_eff: float
    aperiodic: bool

    @property
    def max_step(self) -> int:
        return int(np.abs(self.steps).max(initial=0))

    @property
    def p0(self) -> float:
        at0 = np.all(self.steps == 0, axis=1)
        return float(self.probs[at0].sum())

    @property
    def sqrt_det_cov(self) -> float:
        return float(np.sqrt(np.linalg.det(self.cov)))

    @property
    def sigma_max(self) -> float:
        return float(np.sqrt(np.linalg.eigvalsh(self.cov).max()))

    def support(self):
        """List of (vector, probability) pairs."""
        return [(tuple(int(c) for c in s), float(p))
                for s, p in zip(self.steps, self.probs)]

    def char_deficit(self, *thetas):
        """1 - phi(theta), computed stably as sum_s 2 p(s) sin^2(theta.s / 2)."""
        out = 0.0
        for s, p in zip(self.steps, self.probs):
            dot = sum(th * float(si) for th, si in zip(thetas, s))
            out = out + 2.0 * p * np.sin(dot / 2.0) ** 2
        return out


def _int_det(mat):
    """Exact integer determinant (fraction-free Bareiss)."""
    a = [[int(v) for v in row] for row in mat]
    n = len(a)
    sign = 1
    prev = 1
    for k in range(n - 1):
        if a[k][k] == 0:
            for i in range(k + 1, n):
                if a[i][k] != 0:
                    a[k], a[i] = a[i], a[k]
                    sign = -sign
                    break
            else:
                return 0
        for i in range(k + 1, n):
            for j in range(k + 1, n):
                a[i][j] = (a[i][j] * a[k][k] - a[i][k] * a[k][j]) // prev
        prev = a[k][k]
    return sign * a[n - 1][n - 1]


def _generates_lattice(steps) -> bool:
    # Subgroup generated by the (symmetric) support is Z^d iff the gcd of all
    # dxd minors of the support matrix is 1.
    vecs = [tuple(v) for v in steps if any(v)]
    if not vecs:
        return False
    d = len(vecs[0])
    g = 0
    for comb in itertools.combinations(vecs, d):
        g = math.gcd(g, abs(_int_det(comb)))
        if g == 1:
            return True
    return False


def _is_aperiodic(steps, probs) -> bool:
    # Symmetric irreducible walks have period 1 or 2; period 2 iff some
    # parity functional v in {0,1}^d is odd on every support point.
    at0 = np.all(steps == 0, axis=1)
    if probs[at0].sum() > 0:
        return True
    d = steps.shape[1]
    offsets = steps % 2
    for bits in itertools.product((0, 1), repeat=d):
        if not any(bits):
            continue
        v = np.array(bits)
        if np.all((offsets @ v) % 2 == 1):
            return False
    return True


def make_kernel(spec, d, lazify=False, beta=1.0, symmetrize=False) -> StepKernel:
    """Build a StepKernel from (vector, weight) pairs.

    Parameters
    ----------
    spec : iterable of (vector, weight)
        Finite support; weights nonnegative, not all zero. Must be symmetric
        under negation unless ``symmetrize`` is set.
    d : int
        Lattice dimension.
    lazify : bool
        Apply the aperiodicity transform: move mass 1/2 to the origin and
        double the temperature multiplier. Leaves the field model unchanged.
    beta : float
        Temperature multiplier of the model before lazification.
    """
    if beta <= 0:
        raise ValidationError("beta must be positive")
    acc: dict[tuple, float] = {}
    for vec, w in spec:
        v = tuple(int(c) for c in vec)
        if len(v) != d:
            raise ValidationError(f"support vector {v} is not {d}-dimensional")
        if w < 0:
            raise ValidationError("weights must be nonnegative")
        acc[v] = acc.get(v, 0.0) + float(w)
    if symmetrize:
        sym = {}
        for v, w in acc.items():
            neg = tuple(-c for c in v)
            sym[v] = sym.get(v, 0.0) + w / 2.0
            sym[neg] = sym.get(neg, 0.0) + w / 2.0
        acc = sym
    total = sum(acc.values())
    if total <= 0:
        raise ValidationError("zero total weight")
    for v, w in acc.items():
        neg = tuple(-c for c in v)
        if not math.isclose(w, acc.get(neg, 0.0), rel_tol=1e-12, abs_tol=1e-15):
            raise ValidationError(
                f"support is not symmetric under negation at {v}; "
                "pass symmetrize=True to symmetrize"
            )
    probs = {v: w / total for v, w in acc.items()}
    beta_eff = float(beta)
    if lazify:
        probs = {v: w / 2.0 for v, w in probs.items()}
        probs[(0,) * d] = probs.get((0,) * d, 0.0) + 0.5
        beta_eff *= 2.0

    items = sorted(probs.items())
    steps = np.array([v for v, _ in items], dtype=np.int64)
    pvec = np.array([p for _, p in items], dtype=float)
    pvec = pvec[np.abs(pvec) > 0]
    steps = steps[np.array([p > 0 for _, p in items])]

    if not _generates_lattice(steps):
        raise ValidationError("support does not generate the full lattice")

    cov = (steps.T * pvec) @ steps.astype(float)
    if np.linalg.eigvalsh(cov).min() <= 0:
        raise ValidationError("covariance matrix is not positive definite")

    return StepKernel(
        d=d,
        steps=steps,
        probs=pvec,
        cov=cov,
        lazy=bool(lazify),
        beta_eff=beta_eff,
        aperiodic=_is_aperiodic(steps, pvec),
    )


def simple_random_walk(d=2, lazify=False, beta=1.0) -> StepKernel:
    """Nearest-neighbour walk with weight 1/(2d) per direction."""
    spec = []
    for i in range(d):
        e = [0] * d
        e[i] = 1
        spec.append((tuple(e), 1.0))
        spec.append((tuple(-c for c in e), 1.0))
    return make_kernel(spec, d, lazify=lazify, beta=beta)


def kernel_from_file(path) -> StepKernel:
    """Parse the plain-text kernel format: header keys dim/lazify/beta, then
    one `x1 ... xd weight` line per support point."""
    header = {"lazify": "0", "beta": "1.0"}
    rows = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            if tokens[0] in ("dim", "lazify", "beta"):
                if len(tokens) != 2:
                    raise ValidationError(f"{path}:{lineno}: bad header line")
                header[tokens[0]] = tokens[1]
            else:
                rows.append((lineno, tokens))
    if "dim" not in header:
        raise ValidationError(f"{path}: missing 'dim' header")
    d = int(header["dim"])
    spec = []
    for lineno, tokens in rows:
        if len(tokens) != d + 1:
            raise ValidationError(
                f"{path}:{lineno}: expected {d} coordinates and a weight"
            )
        spec.append((tuple(int(t) for t in tokens[:d]), float(tokens[-1])))
    return make_kernel(
        spec, d, lazify=header["lazify"].lower() in ("1", "true", "yes"),
        beta=float(header["beta"]),
    )


def write_kernel_file(path, support, d, lazify=False, beta=1.0):
    with open(path, "w") as fh:
        fh.write(f"dim {d}\n")
        fh.write(f"lazify {1 if lazify else 0}\n")
        fh.write(f"beta {beta!r}\n")
        for vec, w in support:
            fh.write(" ".join(str(int(c)) for c in vec) + f" {w!r}\n")


# ---------------------------------------------------------------------------
# exact n-step distributions


@dataclass(frozen=True)
class LatticeArray:
    """Values on the centered cube [-radius, radius]^d."""

    values: np.ndarray
    radius: int

    @property
    def d(self) -> int:
        return self.values.ndim

    def at(self, x) -> float:
        idx = tuple(int(c) + self.radius for c in x)
        if any(i < 0 or i > 2 * self.radius for i in idx):
            return 0.0
        return float(self.values[idx])

    def total(self) -> float:
        return float(self.values.sum())

    def rows(self):
        """Yield (coordinates..., value) for every nonzero entry."""
        for idx in np.argwhere(self.values != 0.0):
            coords = tuple(int(i) - self.radius for i in idx)
            yield (*coords, float(self.values[tuple(idx)]))


def _shifted_add(dst, src, shift, weight):
    # dst[x + shift] += weight * src[x], zero flux through the boundary
    dsl, ssl = [], []
    for ax, s in enumerate(shift):
        n = src.shape[ax]
        s = int(s)
        if abs(s) >= n:
            return
        if s >= 0:
            dsl.append(slice(s, n))
            ssl.append(slice(0, n - s))
        else:
            dsl.append(slice(0, n + s))
            ssl.append(slice(-s, n))
    dst[tuple(dsl)] += weight * src[tuple(ssl)]


def _auto_radius(kernel, n):
    exact = n * kernel.max_step
    clt = int(np.ceil(_TAIL_SIGMAS * kernel.sigma_max * np.sqrt(max(n, 1)))) + kernel.max_step
    return max(kernel.max_step, min(exact, clt))


def _dp_run(kernel, n, radius, record=None):
    """Convolve forward n steps on the centered cube of given radius.

    record: optional list of lattice points whose per-step values are kept.
    Returns (final LatticeArray, {point: np.ndarray of length n+1}).
    """
    side = 2 * radius + 1
    if side**kernel.d > 80_000_000:
        raise ResourceError(f"DP window {side}^{kernel.d} too large")
    cur = np.zeros((side,) * kernel.d)
    cur[(radius,) * kernel.d] = 1.0
    rec_idx = {}
    series = {}
    if record:
        for pt in record:
            key = tuple(int(c) for c in pt)
            rec_idx[key] = tuple(c + radius for c in key)
            series[key] = np.zeros(n + 1)
            if all(0 <= i < side for i in rec_idx[key]):
                series[key][0] = cur[rec_idx[key]]
    for m in range(1, n + 1):
        nxt = np.zeros_like(cur)
        for s, p in zip(kernel.steps, kernel.probs):
            _shifted_add(nxt, cur, s, p)
        cur = nxt
        for key, idx in rec_idx.items():
            if all(0 <= i < side for i in idx):
                series[key][m] = cur[idx]
    return LatticeArray(cur, radius), series


def step_pmf_n(kernel, n, window=None) -> LatticeArray:
    """Exact n-step pmf by dynamic programming.

    The window auto-grows until it captures at least 1 - 1e-12 of the mass;
    an explicit too-small window raises WindowTooSmall with the captured mass.
    """
    if n < 0:
        raise ValidationError("n must be >= 0")
    if window is not None:
        arr, _ = _dp_run(kernel, n, int(window))
        if arr.total() < 1.0 - MASS_TOL:
            raise WindowTooSmall(int(window), arr.total())
        return arr
    radius = _auto_radius(kernel, n)
    while True:
        arr, _ = _dp_run(kernel, n, radius)
        if arr.total() >= 1.0 - MASS_TOL or radius >= n * kernel.max_step:
            return arr
        radius = min(max(radius + 1, int(radius * 1.5)), n * kernel.max_step)


def pmf_series(kernel, n_max, points=((0,),)) -> dict:
    """p_m(x) for m = 0..n_max at each requested lattice point, exact DP."""
    pts = [tuple(int(c) for c in p) for p in points]
    if any(len(p) != kernel.d for p in pts):
        raise ValidationError("point dimension mismatch")
    radius = _auto_radius(kernel, n_max)
    need = max((max(abs(c) for c in p) for p in pts), default=0)
    radius = max(radius, need + kernel.max_step)
    while True:
        arr, series = _dp_run(kernel, n_max, radius, record=pts)
        if arr.total() >= 1.0 - MASS_TOL or radius >= n_max * kernel.max_step:
            return series
        radius = min(max(radius + 1, int(radius * 1.5)), n_max * kernel.max_step)


def pmf_origin_series(kernel, n_max) -> np.ndarray:
    origin = (0,) * kernel.d
    return pmf_series(kernel, n_max, points=[origin])[origin]


# ---------------------------------------------------------------------------
# first returns and tied-down range


def first_return_pmf(kernel, L, origin_series=None) -> np.ndarray:
    """First-return probabilities q_1..q_L from the renewal recursion
    p_n(0) = sum_{l<=n} q_l p_{n-l}(0). Entry 0 of the result is unused."""
    if L < 1:
        raise ValidationError("L must be >= 1")
    p0 = origin_series if origin_series is not None else pmf_origin_series(kernel, L)
    q = np.zeros(L + 1)
    for n in range(1, L + 1):
        s = float(np.dot(q[1:n], p0[n - 1:0:-1]))
        q[n] = max(p0[n] - s, 0.0)
    return q


def tied_down_range_mean(kernel, n, x) -> float:
    """Exact expected range of the bridge from 0 to x in n steps."""
    x = tuple(int(c) for c in x)
    series = pmf_series(kernel, n, points=[(0,) * kernel.d, x])
    px = series[x]
    if px[n] <= 0.0:
        raise ValidationError(f"p_{n}({x}) = 0: conditioning undefined")
    if n == 0:
        return 1.0
    q = first_return_pmf(kernel, n, origin_series=series[(0,) * kernel.d])
    ls = np.arange(1, n + 1)
    correction = float(np.sum((n - ls + 1) * q[1:] * px[n - ls] / px[n]))
    return n + 1 - correction


# ---------------------------------------------------------------------------
# potential kernel (d = 2)


@dataclass(frozen=True)
class PartialSum:
    value: float
    tail_estimate: float


def _fourier_mesh_size(kernel, n_max, x):
    reach = int(np.ceil(_TAIL_SIGMAS * kernel.sigma_max * np.sqrt(n_max)))
    reach += kernel.max_step + int(np.abs(np.asarray(x)).max(initial=0))
    m = 2 * reach + 2
    m += m % 2
    if m > (1 << 14):
        raise ResourceError(f"Fourier mesh {m} exceeds the 16384 limit")
    return max(m, 16)


def potential_kernel(kernel, x, n_max) -> PartialSum:
    """Partial sum a_N(x) = sum_{n<=N} (p_n(0) - p_n(x)), d = 2 only.

    Evaluated through the dual-torus identity
        a_N(x) = M^-2 sum_theta (1 - cos theta.x) * sum_{n<=N} phi(theta)^n,
    whose aliasing error is the wrapped probability mass, far below the
    reported truncation tail for the automatic mesh size.
    """
    if kernel.d != 2:
        raise ValidationError("potential kernel is defined for d = 2 only")
    x = np.asarray(x, dtype=float)
    if not np.any(x):
        return PartialSum(0.0, 0.0)
    m = _fourier_mesh_size(kernel, n_max, x)
    theta = 2.0 * np.pi * np.arange(m) / m
    total = 0.0
    block = 128
    for lo in range(0, m, block):
        t1 = theta[lo:lo + block][:, None]
        t2 = theta[None, :]
        u = kernel.char_deficit(t1, t2)
        w = 2.0 * np.sin((t1 * x[0] + t2 * x[1]) / 2.0) ** 2
        base = 1.0 - u
        geo = np.empty_like(u)
        nz = u != 0.0
        geo[~nz] = n_max + 1.0
        geo[nz] = (1.0 - np.sign(base[nz]) ** (n_max + 1)
                   * np.exp((n_max + 1) * np.log(np.abs(base[nz]) + 1e-300))) / u[nz]
        total += float(np.sum(w * geo))
    value = total / m**2
    qnorm = float(x @ np.linalg.solve(kernel.cov, x))
    tail = qnorm / (4.0 * np.pi * kernel.sqrt_det_cov * n_max)
    return PartialSum(value, tail)


# ---------------------------------------------------------------------------
# rate function and saddle-point pmf


@dataclass(frozen=True)
class RateFunctionPoint:
    velocity: np.ndarray
    tilt: np.ndarray
    rate: float
    tilted_cov: np.ndarray


def rate_function(kernel, xi, tol=1e-10, max_iter=50) -> RateFunctionPoint:
    """Solve grad log z(lambda) = xi by damped Newton; returns the Legendre
    rate I(xi) = (lambda, xi) - log z(lambda) and the tilted covariance."""
    xi = np.asarray(xi, dtype=float)
    steps = kernel.steps.astype(float)
    probs = kernel.probs

    def moments(lam):
        expo = steps @ lam
        shift = expo.max()
        w = probs * np.exp(expo - shift)
        z = w.sum()
        mean = steps.T @ w / z
        cov = (steps.T * w) @ steps / z - np.outer(mean, mean)
        logz = np.log(z) + shift
        return logz, mean, cov

    lam = np.linalg.solve(kernel.cov, xi)
    logz, mean, cov = moments(lam)
    res = np.linalg.norm(mean - xi)
    for _ in range(max_iter):
        if res <= tol:
            break
        try:
            delta = np.linalg.solve(cov, xi - mean)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("singular tilted covariance") from exc
        t = 1.0
        while t > 1e-14:
            cand = lam + t * delta
            logz_c, mean_c, cov_c = moments(cand)
            res_c = np.linalg.norm(mean_c - xi)
            if np.isfinite(res_c) and res_c < res:
                lam, logz, mean, cov, res = cand, logz_c, mean_c, cov_c, res_c
                break
            t /= 2.0
        else:
            raise NumericalError(
                f"Newton stalled at residual {res:.3e}: velocity {tuple(xi)} "
                "outside the achievable domain"
            )
    else:
        raise NumericalError(
            f"Newton did not converge in {max_iter} iterations: velocity "
            f"{tuple(xi)} outside the achievable domain"
        )
    rate = float(lam @ xi - logz)
    return RateFunctionPoint(velocity=xi, tilt=lam, rate=rate, tilted_cov=cov)


def saddle_pmf_approx(kernel, n, x) -> float:
    """Saddle-point approximation of p_n(x); requires an aperiodic kernel."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    if not kernel.aperiodic:
        raise ValidationError(
            "saddle-point pmf uses the aperiodic local CLT; lazify the kernel"
        )
    x = np.asarray(x, dtype=float)
    rf = rate_function(kernel, x / n)
    det = np.linalg.det(rf.tilted_cov)
    if det <= 0:
        raise NumericalError("tilted covariance not positive definite")
    return float(np.exp(-n * rf.rate) / ((2.0 * np.pi * n) ** (kernel.d / 2.0) * np.sqrt(det)))


# ---------------------------------------------------------------------------
# Monte Carlo range statistics


def _site_codes(positions, span):
    # positions: (..., d) ints with |coordinate| <= span
    mult = 2 * span + 1
    code = positions[..., 0].astype(np.int64) + span
    for ax in range(1, positions.shape[-1]):
        code = code * mult + (positions[..., ax].astype(np.int64) + span)
    return code


def _path_positions(kernel, n, b, rng):
    idx = rng.choice(len(kernel.probs), size=(b, n), p=kernel.probs)
    steps = kernel.steps[idx]
    pos = np.zeros((b, n + 1, kernel.d), dtype=np.int64)
    np.cumsum(steps, axis=1, out=pos[:, 1:, :])
    return pos


def range_samples(kernel, n, reps, seed) -> np.ndarray:
    """Number of distinct sites visited by each of `reps` seeded paths."""
    if n < 0 or reps < 1:
        raise ValidationError("need n >= 0 and reps >= 1")
    if n == 0:
        return np.ones(reps, dtype=np.int64)
    out = np.empty(reps, dtype=np.int64)
    span = n * kernel.max_step
    for c, start in enumerate(range(0, reps, _CHUNK)):
        b = min(_CHUNK, reps - start)
        pos = _path_positions(kernel, n, b, replica_rng(seed, c))
        codes = np.sort(_site_codes(pos, span), axis=1)
        out[start:start + b] = 1 + np.count_nonzero(np.diff(codes, axis=1), axis=1)
    return out


def simulate_range(kernel, n, reps, seed):
    """Range samples plus the Estimate of E|X_[0,n]|."""
    samples = range_samples(kernel, n, reps, seed)
    return samples, estimate_from_samples(samples, seed=seed)


@dataclass(frozen=True)
class TailProbability:
    estimate: Estimate
    upper95: float
    threshold: float
    successes: int


def range_tail(kernel, n, kappa, reps, seed) -> TailProbability:
    """Empirical P(|X_[0,n]| <= kappa n / log n) with a binomial upper bound."""
    if n < 3:
        raise ValidationError("need n >= 3 so that log n > 1")
    if kappa <= 0:
        raise ValidationError("kappa must be positive")
    from .stats import binom_upper

    threshold = kappa * n / math.log(n)
    samples = range_samples(kernel, n, reps, seed)
    hits = int(np.count_nonzero(samples <= threshold))
    est = Estimate(
        mean=hits / reps,
        stderr=float(np.sqrt(max(hits / reps * (1 - hits / reps), 0.0) / reps)),
        n=reps,
        seed=seed,
    )
    return TailProbability(est, binom_upper(hits, reps), threshold, hits)


def crossing_cells(kernel, n, K, reps, seed, block=4096) -> np.ndarray:
    """Samples of the number of side-K cells visited before leaving the
    centered box {-nK+1, ..., nK}^d. The starting cell always counts."""
    if n < 1 or K < 1 or reps < 1:
        raise ValidationError("need n, K, reps >= 1")
    lo, hi = -n * K + 1, n * K
    nsup = len(kernel.probs)
    out = np.empty(reps, dtype=np.int64)
    cell_mult = 2 * n + 2
    for r in range(reps):
        rng = replica_rng(seed, r)
        pos = np.zeros(kernel.d, dtype=np.int64)
        visited = set()

        def cell_code(pts):
            c = (pts - 1) // K + n  # in [0, 2n) while inside the box
            code = c[..., 0].astype(np.int64)
            for ax in range(1, kernel.d):
                code = code * cell_mult + c[..., ax]
            return code

        visited.add(int(cell_code(pos[None, :])[0]))
        while True:
            idx = rng.choice(nsup, size=block, p=kernel.probs)
            traj = pos + np.cumsum(kernel.steps[idx], axis=0)
            inside = np.all((traj >= lo) & (traj <= hi), axis=1)
            if inside.all():
                visited.update(np.unique(cell_code(traj)).tolist())
                pos = traj[-1]
                continue
            exit_at = int(np.argmin(inside))
            if exit_at > 0:
                visited.update(np.unique(cell_code(traj[:exit_at])).tolist())
            break
        out[r] = len(visited)
    return out
