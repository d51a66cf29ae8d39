"""Exact Green functions of the killed walk on finite regions.

A Region is a box with a dead-site mask (exterior plus any pinned sites);
Green values solve (I - P) restricted to the alive sites, so they are
simultaneously the covariances of the free field given the dead set, after
the 1/beta_eff scaling. All solves run at beta = 1 internally.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import NumericalError, ValidationError
from .walk import PartialSum, StepKernel, pmf_origin_series, potential_kernel

DENSE_LIMIT = 2000
RESIDUAL_TARGET = 1e-10


class Region:
    """Box [lo, hi] with dead sites; immutable once built.

    Everything outside the box is dead (the walk is killed on any step that
    leaves it, so multi-cell jumps cannot escape), and the optional ``pins``
    are dead sites inside the box.
    """

    def __init__(self, kernel: StepKernel, lo, hi, pins=(), beta=None):
        self.kernel = kernel
        self.lo = np.asarray(lo, dtype=np.int64)
        self.hi = np.asarray(hi, dtype=np.int64)
        if self.lo.shape != (kernel.d,) or np.any(self.hi < self.lo):
            raise ValidationError("bad box bounds")
        self.beta = float(kernel.beta_eff if beta is None else beta)
        if self.beta <= 0:
            raise ValidationError("beta must be positive")
        shape = tuple(int(h - l + 1) for l, h in zip(self.lo, self.hi))
        alive = np.ones(shape, dtype=bool)
        for pin in pins:
            idx = tuple(int(c) - int(l) for c, l in zip(pin, self.lo))
            if any(i < 0 or i >= s for i, s in zip(idx, shape)):
                raise ValidationError(f"pin {tuple(pin)} outside the box")
            alive[idx] = False
        self.shape = shape
        self.alive = alive
        self.index = np.full(shape, -1, dtype=np.int64)
        self.sites = np.argwhere(alive) + self.lo  # lexicographic order
        self.index[alive] = np.arange(len(self.sites))
        self.n_alive = len(self.sites)
        self._matrix = self._build_matrix()
        self._dense_factor = None

    def site_index(self, x) -> int:
        idx = tuple(int(c) - int(l) for c, l in zip(x, self.lo))
        if any(i < 0 or i >= s for i, s in zip(idx, self.shape)):
            return -1
        return int(self.index[idx])

    def _build_matrix(self):
        n = self.n_alive
        grid = self.index
        rows, cols, vals = [], [], []
        for s, p in zip(self.kernel.steps, self.kernel.probs):
            if not np.any(s):
                continue
            src_sl, dst_sl = [], []
            ok = True
            for ax, sh in enumerate(s):
                sh = int(sh)
                size = self.shape[ax]
                if abs(sh) >= size:
                    ok = False
                    break
                if sh >= 0:
                    src_sl.append(slice(0, size - sh))
                    dst_sl.append(slice(sh, size))
                else:
                    src_sl.append(slice(-sh, size))
                    dst_sl.append(slice(0, size + sh))
            if not ok:
                continue
            a = grid[tuple(src_sl)].ravel()
            b = grid[tuple(dst_sl)].ravel()
            mask = (a >= 0) & (b >= 0)
            rows.append(a[mask])
            cols.append(b[mask])
            vals.append(np.full(mask.sum(), -p))
        rows = np.concatenate(rows) if rows else np.empty(0, dtype=np.int64)
        cols = np.concatenate(cols) if cols else np.empty(0, dtype=np.int64)
        vals = np.concatenate(vals) if vals else np.empty(0)
        diag = np.full(n, 1.0 - self.kernel.p0)
        m = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
        m += sp.diags(diag)
        return m.tocsr()

    @property
    def matrix(self):
        """(I - P) restricted to alive sites, beta = 1."""
        return self._matrix

    def solve(self, rhs):
        """Solve (I - P)|alive g = rhs; returns (g, relative residual)."""
        rhs = np.asarray(rhs, dtype=float)
        if self.n_alive < DENSE_LIMIT:
            if self._dense_factor is None:
                self._dense_factor = sla.cho_factor(self._matrix.toarray())
            g = sla.cho_solve(self._dense_factor, rhs)
        else:
            # symmetric positive definite; diagonal is constant so the
            # diagonal preconditioner is a pure scaling
            g, info = spla.cg(self._matrix, rhs, rtol=1e-13, atol=0.0,
                              maxiter=200_000)
            if info != 0:
                raise NumericalError(f"CG failed to converge (info={info})")
        scale = float(np.linalg.norm(rhs))
        resid = float(np.linalg.norm(self._matrix @ g - rhs)) / (scale or 1.0)
        if resid > RESIDUAL_TARGET:
            raise NumericalError(f"solve residual {resid:.3e} above target")
        return g, resid

    def dense_covariance(self):
        """Full (I - P)|alive^-1 / beta as a dense array."""
        if self.n_alive > 5000:
            raise ValidationError("region too large for dense covariance")
        return np.linalg.inv(self._matrix.toarray()) / self.beta


def box_region(kernel, radius, pins=(), beta=None) -> Region:
    """Centered cube of side 2*radius + 1."""
    r = int(radius)
    return Region(kernel, [-r] * kernel.d, [r] * kernel.d, pins=pins, beta=beta)


@dataclass(frozen=True)
class GreenProbe:
    x: tuple
    y: tuple
    value: float
    residual: float


def green_killed(region: Region, x, y) -> GreenProbe:
    """Field covariance G(x, y)/beta_eff for the walk killed on dead sites."""
    ix, iy = region.site_index(x), region.site_index(y)
    if ix < 0 or iy < 0:
        raise ValidationError("x and y must both be alive in the region")
    rhs = np.zeros(region.n_alive)
    rhs[iy] = 1.0
    g, resid = region.solve(rhs)
    return GreenProbe(tuple(map(int, x)), tuple(map(int, y)),
                      float(g[ix]) / region.beta, resid)


def conditional_variance(region: Region, x) -> float:
    """Variance of the field at x given zero values on all dead sites."""
    return green_killed(region, x, x).value


def green_box_origin(kernel: StepKernel, radius: int) -> GreenProbe:
    """G_B(0, 0) on the centered box of the given radius (d = 2)."""
    if kernel.d != 2:
        raise ValidationError("green_box_origin is a d = 2 diagnostic")
    region = box_region(kernel, radius)
    return green_killed(region, (0, 0), (0, 0))


def green_one_obstacle(kernel: StepKernel, x, n_max: int) -> PartialSum:
    """G on Z^2 minus the single dead site x, from the potential kernel:
    a(x) + a(-x), which is 2 a(x) for symmetric kernels."""
    if kernel.d != 2:
        raise ValidationError("one-obstacle Green function needs d = 2")
    if not any(int(c) for c in x):
        raise ValidationError("obstacle must differ from the origin")
    a = potential_kernel(kernel, x, n_max)
    return PartialSum(2.0 * a.value, 2.0 * a.tail_estimate)


def green_nstep(kernel: StepKernel, n: int) -> float:
    """n-step Green function at the origin, sum_{m<=n} p_m(0), exact."""
    if n < 0:
        raise ValidationError("n must be >= 0")
    return float(pmf_origin_series(kernel, n).sum())


def hitting_prob(region: Region, target, x) -> float:
    """P_x(hit target before dying), Dirichlet outside the alive set."""
    tgt = [region.site_index(t) for t in target]
    if not tgt:
        raise ValidationError("empty target")
    if any(t < 0 for t in tgt):
        raise ValidationError("target sites must be alive in the region")
    ix = region.site_index(x)
    if ix < 0:
        raise ValidationError("x must be alive")
    tgt_set = set(tgt)
    if ix in tgt_set:
        return 1.0
    keep = np.array([i for i in range(region.n_alive) if i not in tgt_set])
    sub = region.matrix[np.ix_(keep, keep)]
    rhs = np.zeros(len(keep))
    # mass stepping from kept sites directly into the target
    tcols = np.array(sorted(tgt_set))
    rhs = -np.asarray(region.matrix[np.ix_(keep, tcols)].sum(axis=1)).ravel()
    if len(keep) < DENSE_LIMIT:
        h = sla.cho_solve(sla.cho_factor(sub.toarray()), rhs)
    else:
        h, info = spla.cg(sub, rhs, rtol=1e-13, atol=0.0, maxiter=200_000)
        if info != 0:
            raise NumericalError(f"CG failed to converge (info={info})")
    resid = float(np.linalg.norm(sub @ h - rhs))
    if resid > RESIDUAL_TARGET * max(float(np.linalg.norm(rhs)), 1.0):
        raise NumericalError(f"hitting solve residual {resid:.3e}")
    pos = int(np.searchsorted(keep, ix))
    return float(h[pos])
