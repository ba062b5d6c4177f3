"""Entropy solutions of ``d_t rho + d_x f(rho) = 0``: exact Riemann fans and a Godunov solver."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .flux import FluxError, FluxFunction, critical_speed, lower_hull, upper_hull


class PDEError(ValueError):
    pass


@dataclass
class Profile:
    """Cell averages on a uniform grid over ``[a, b]`` with lateral states for the ghost cells."""

    a: float
    b: float
    values: np.ndarray
    left: float | None = None
    right: float | None = None
    t: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 1 or self.values.size == 0:
            raise PDEError("profile needs at least one cell")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0.0):
            raise PDEError("profile values must be finite and nonnegative")
        if self.left is None:
            self.left = float(self.values[0])
        if self.right is None:
            self.right = float(self.values[-1])

    @property
    def n(self) -> int:
        return self.values.size

    @property
    def dx(self) -> float:
        return (self.b - self.a) / self.n

    @property
    def centers(self) -> np.ndarray:
        return self.a + (np.arange(self.n) + 0.5) * self.dx

    @property
    def edges(self) -> np.ndarray:
        return self.a + np.arange(self.n + 1) * self.dx

    @classmethod
    def from_function(cls, fn: Callable[[np.ndarray], np.ndarray], a: float, b: float,
                      dx: float, left: float | None = None, right: float | None = None) -> "Profile":
        n = int(round((b - a) / dx))
        centers = a + (np.arange(n) + 0.5) * (b - a) / n
        return cls(a, b, np.asarray(fn(centers), dtype=float), left, right)

    @classmethod
    def step(cls, lam: float, rho: float, a: float, b: float, dx: float) -> "Profile":
        """Riemann data: ``lam`` left of 0, ``rho`` right of it."""
        return cls.from_function(lambda x: np.where(x < 0.0, lam, rho), a, b, dx, lam, rho)

    def mass(self) -> float:
        return float(self.values.sum() * self.dx)

    def sample(self, x) -> np.ndarray:
        """Piecewise-constant evaluation (lateral states outside ``[a, b]``)."""
        x = np.asarray(x, dtype=float)
        idx = np.floor((x - self.a) / self.dx).astype(np.int64)
        out = self.values[np.clip(idx, 0, self.n - 1)]
        out = np.where(idx < 0, self.left, out)
        return np.where(idx >= self.n, self.right, out)

    def block_average(self, edges: np.ndarray) -> np.ndarray:
        """Exact averages of the piecewise-constant profile over ``[edges[k], edges[k+1]]``."""
        cum_x = self.edges
        cum = np.concatenate([[0.0], np.cumsum(self.values) * self.dx])

        def primitive(x):
            x = np.asarray(x, dtype=float)
            inside = np.interp(np.clip(x, self.a, self.b), cum_x, cum)
            return inside + np.minimum(x - self.a, 0.0) * self.left + np.maximum(x - self.b, 0.0) * self.right

        e = np.asarray(edges, dtype=float)
        return np.diff(primitive(e)) / np.diff(e)

    def to_csv(self, path, snapshots: Sequence["Profile"] = ()) -> None:
        rows = ["t,x,density"]
        for p in list(snapshots) or [self]:
            rows += [f"{p.t!r},{x!r},{v!r}" for x, v in zip(p.centers.tolist(), p.values.tolist())]
        Path(path).write_text("\n".join(rows) + "\n")


# ------------------------------------------------------------- Riemann


@dataclass
class _Table:
    x: np.ndarray
    y: np.ndarray
    beta: np.ndarray | None
    hull: np.ndarray
    slopes: np.ndarray


def _table(flux: FluxFunction, lo: float, hi: float, maximize: bool) -> _Table:
    x, y = flux.restrict(lo, hi)
    if math.isfinite(flux.rho_c):
        # chords into the corner from nodes this close are rounding noise
        near = (x < flux.rho_c) & (flux.rho_c - x < 1e-9 * max(flux.rho_c, 1.0)) & (x > lo)
        x, y = x[~near], y[~near]
    beta = None
    if flux.curve is not None:
        beta = np.full(x.shape, flux.c)
        sub = x < flux.rho_c
        beta[sub] = flux.curve.inverse(x[sub])
    hull = upper_hull(x, y) if maximize else lower_hull(x, y)
    slopes = np.diff(y[hull]) / np.diff(x[hull]) if hull.size > 1 else np.empty(0)
    return _Table(x, y, beta, hull, slopes)


def _optimize(flux: FluxFunction, lam: float, rho: float, v: np.ndarray, refine: bool = True):
    if lam < 0 or rho < 0:
        raise PDEError("densities must be nonnegative")
    maximize = lam > rho
    lo, hi = (rho, lam) if maximize else (lam, rho)
    tab = _table(flux, lo, hi, maximize)
    v = np.asarray(v, dtype=float)
    if tab.slopes.size == 0:
        r = np.full(v.shape, tab.x[0])
        return np.full(v.shape, tab.y[0]) - v * r, r
    # hull slopes decrease (max) or increase (min); the optimal vertex is the
    # first one after which the objective stops improving, ties to the left
    if maximize:
        k = np.searchsorted(-tab.slopes, -v, side="left")
    else:
        k = np.searchsorted(tab.slopes, v, side="left")
    j = tab.hull[k]
    r = tab.x[j].copy()
    G = tab.y[j] - v * r
    if refine and tab.beta is not None:
        _refine(flux, tab, j, v, r, G, maximize)
    return G, r


def _refine(flux, tab, j, v, r, G, maximize):
    """Polish interior optima by solving ``f'(r) = v`` in fugacity space.

    Only brackets with a sign change are touched, so optima sitting on
    table nodes where ``f`` has a corner (such as ``rho_c``) stay exact.
    """
    n = tab.x.size
    lo = np.maximum(j - 1, 0)
    hi = np.minimum(j + 1, n - 1)
    b_lo = tab.beta[lo].copy()
    b_hi = tab.beta[hi].copy()
    ok = (v > 0) & (b_hi > b_lo)
    if not ok.any():
        return
    curve, drift = flux.curve, flux.drift
    idx = np.flatnonzero(ok)
    target = drift / v[idx]
    a = b_lo[idx]
    b = np.minimum(b_hi[idx], np.nextafter(flux.c, 0.0))
    ga = curve.rbar_prime(a) - target
    gb = curve.rbar_prime(b) - target
    change = np.sign(ga) * np.sign(gb) < 0
    idx, a, b, ga, target = idx[change], a[change], b[change], ga[change], target[change]
    if idx.size == 0:
        return
    for _ in range(64):
        m = 0.5 * (a + b)
        gm = curve.rbar_prime(m) - target
        left = np.sign(gm) == np.sign(ga)
        a = np.where(left, m, a)
        ga = np.where(left, gm, ga)
        b = np.where(left, b, m)
    cand_beta = np.concatenate([a, b])
    cand_r = curve.rbar(cand_beta)
    vv = np.concatenate([v[idx], v[idx]])
    cand_G = drift * cand_beta - vv * cand_r
    m = idx.size
    pick = np.where(cand_G[:m] >= cand_G[m:], 0, 1) if maximize else np.where(cand_G[:m] <= cand_G[m:], 0, 1)
    best_G = np.where(pick == 0, cand_G[:m], cand_G[m:])
    best_r = np.where(pick == 0, cand_r[:m], cand_r[m:])
    better = best_G > G[idx] if maximize else best_G < G[idx]
    G[idx[better]] = best_G[better]
    r[idx[better]] = best_r[better]


def riemann_optimum(flux: FluxFunction, lam: float, rho: float, v: float) -> tuple[float, float]:
    """``(G, r*)`` for ``min_{[lam, rho]} f(r) - v r`` (``lam <= rho``) or the max over ``[rho, lam]``."""
    G, r = _optimize(flux, lam, rho, np.array([float(v)]))
    return float(G[0]), float(r[0])


def riemann_solution(flux: FluxFunction, lam: float, rho: float, t: float, x):
    """Entropy solution of the Riemann problem at ``(t, x)``: the optimiser at ``v = x/t``."""
    if not t > 0:
        raise PDEError("t must be positive")
    xs = np.asarray(x, dtype=float)
    _, r = _optimize(flux, lam, rho, np.atleast_1d(xs) / t)
    return r if xs.ndim else float(r[0])


# ------------------------------------------------------------- Godunov


def _sparse_table(y: np.ndarray, op) -> list[np.ndarray]:
    levels = [y]
    span = 1
    while 2 * span <= y.size:
        prev = levels[-1]
        levels.append(op(prev[:-span], prev[span:]))
        span *= 2
    return levels


def _range_query(levels, op, i0, i1, fill):
    """``op`` over ``y[i0:i1]`` for arrays of ranges; empty ranges give ``fill``."""
    n = i1 - i0
    out = np.full(i0.shape, fill, dtype=float)
    ok = n > 0
    k = np.zeros(i0.shape, dtype=np.int64)
    k[ok] = np.floor(np.log2(n[ok])).astype(np.int64)
    for lev in np.unique(k[ok]):
        sel = ok & (k == lev)
        tab = levels[lev]
        out[sel] = op(tab[i0[sel]], tab[i1[sel] - (1 << lev)])
    return out


def godunov_flux(flux: FluxFunction, ul, ur) -> np.ndarray:
    """Interface flux in min/max form: ``min_{[ul, ur]} f`` or ``max_{[ur, ul]} f``.

    The extremum runs over the exact endpoint values and the table nodes
    strictly between them.
    """
    ul, ur = np.broadcast_arrays(np.asarray(ul, dtype=float), np.asarray(ur, dtype=float))
    shape = ul.shape
    ul, ur = ul.ravel(), ur.ravel()
    lo, hi = np.minimum(ul, ur), np.maximum(ul, ur)
    fl, fr = np.asarray(flux(ul), dtype=float), np.asarray(flux(ur), dtype=float)
    i0 = np.searchsorted(flux.rho, lo, side="right")
    i1 = np.searchsorted(flux.rho, hi, side="left")
    inc = ul <= ur
    mins = _range_query(_sparse_table(flux.f, np.minimum), np.minimum, i0, i1, np.inf)
    maxs = _range_query(_sparse_table(flux.f, np.maximum), np.maximum, i0, i1, -np.inf)
    out = np.where(inc, np.minimum(np.minimum(fl, fr), mins), np.maximum(np.maximum(fl, fr), maxs))
    return out.reshape(shape)


@dataclass
class GodunovResult:
    profile: Profile
    snapshots: list[Profile]
    dt: float
    steps: int
    max_balance_error: float
    params: dict = field(default_factory=dict)


def godunov_solve(init: Profile, flux: FluxFunction, T: float, cfl: float = 0.45,
                  snapshots: Sequence[float] = ()) -> GodunovResult:
    """First-order Godunov scheme with frozen ghost states ``init.left``/``init.right``.

    For a nondecreasing flux the Godunov interface flux is ``f(u_left)``.
    """
    if not 0.0 < cfl < 1.0:
        raise PDEError("cfl must lie in (0, 1)")
    if T < 0:
        raise PDEError("T must be nonnegative")
    top = max(init.values.max(), init.left, init.right)
    if math.isinf(flux.rho_c) and top > flux.rho_max:
        raise FluxError(f"initial data {top} exceed the tabulated range {flux.rho_max}")
    dx = init.dx
    speed = flux.cfl_speed
    steps = max(1, math.ceil(T * speed / (cfl * dx))) if T > 0 else 0
    dt = T / steps if steps else 0.0
    lam_ratio = dt / dx
    u = init.values.copy()
    f_left = float(flux.interp(init.left))
    snap_times = sorted(float(s) for s in snapshots)
    out_snaps = []
    si = 0
    while si < len(snap_times) and snap_times[si] <= 0.0:
        out_snaps.append(Profile(init.a, init.b, u.copy(), init.left, init.right, 0.0))
        si += 1
    worst = 0.0
    ext = np.empty(u.size + 1)
    for step in range(1, steps + 1):
        fu = flux.interp(u)
        ext[0] = f_left
        ext[1:] = fu
        mass_before = u.sum()
        u = u - lam_ratio * np.diff(ext)
        # the update telescopes: mass changes by the boundary fluxes only
        expected = mass_before + lam_ratio * (f_left - fu[-1])
        worst = max(worst, abs(u.sum() - expected) * dx)
        t = step * dt
        while si < len(snap_times) and snap_times[si] <= t + 1e-12 * max(T, 1.0):
            out_snaps.append(Profile(init.a, init.b, u.copy(), init.left, init.right, t))
            si += 1
    final = Profile(init.a, init.b, u, init.left, init.right, T)
    params = {"cfl": cfl, "dx": dx, "dt": dt, "steps": steps, "T": T,
              "lipschitz": flux.lipschitz, "speed_bound": speed}
    return GodunovResult(final, out_snaps, dt, steps, worst, params)


# ------------------------------------------------- supercritical checks


@dataclass
class FactsReport:
    left_state: tuple[bool, float]
    lambda_independence: tuple[bool, float]
    plateau: tuple[bool, float] | None
    below_after_front: tuple[bool, float]
    v_c: float
    skipped: list[str]

    @property
    def passed(self) -> bool:
        checks = [self.left_state, self.lambda_independence, self.below_after_front]
        if self.plateau is not None:
            checks.append(self.plateau)
        return all(ok for ok, _ in checks)


def check_supercritical_facts(flux: FluxFunction, lam: float, rho: float, t: float, x,
                              lam_other: float | None = None, tol: float = 1e-10) -> FactsReport:
    """Check the Riemann fan for ``lam >= rho_c > rho`` on the grid ``x``.

    Margins are the largest deviations found (for the last check, the
    smallest distance below ``rho_c``).
    """
    rc = flux.rho_c
    if not math.isfinite(rc):
        raise PDEError("no finite critical density")
    if lam < rc or rho >= rc:
        raise PDEError("need lam >= rho_c > rho")
    if not t > 0:
        raise PDEError("t must be positive")
    x = np.sort(np.asarray(x, dtype=float))
    dx = float(np.min(np.diff(x))) if x.size > 1 else 1.0
    sol = riemann_solution(flux, lam, rho, t, x)
    if lam_other is None:
        lam_other = 2.0 * lam if lam > rc else 2.0 * rc
    sol2 = riemann_solution(flux, lam_other, rho, t, x)
    vc = critical_speed(flux, rho)
    skipped = []
    neg = x < 0
    left_dev = float(np.max(np.abs(sol[neg] - lam), initial=0.0))
    pos = x > 0
    indep = float(np.max(np.abs(sol[pos] - sol2[pos]), initial=0.0))
    front_zone = pos & (x < t * vc)
    plateau = None
    if vc < 10 * dx / t:
        skipped.append("plateau: front narrower than ten grid cells")
    else:
        dev = float(np.max(np.abs(sol[front_zone] - rc), initial=0.0))
        plateau = (dev == 0.0, dev)
    beyond = x > t * vc
    gap = float(np.min(rc - sol[beyond], initial=math.inf))
    return FactsReport((left_dev == 0.0, left_dev), (indep <= tol, indep), plateau,
                       (gap > 0.0, gap), vc, skipped)
