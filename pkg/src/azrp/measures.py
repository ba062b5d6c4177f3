"""Single-site laws, product invariant measures and the density/fugacity map.

The single-site law at fugacity ``r`` is ``theta_r(n) ∝ r**n / g(n)!``.  Rate
functions here are given by a finite table ``g(0..L)`` and equal 1 beyond it,
so every ``theta_r`` has an exactly geometric tail from ``L`` on.  All
partition sums and moments below are therefore closed forms: a finite head
sum plus a geometric series.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .env import DisorderLaw, Environment

INF = np.iinfo(np.int64).max
"""Occupancy sentinel for infinitely many particles (sources, critical sites)."""


class MeasureError(ValueError):
    pass


@dataclass(frozen=True)
class RateFunction:
    """Nondecreasing jump-rate function with ``g(0)=0 < g(1)`` and ``g(n)=1`` for ``n > L``.

    ``values`` holds ``g(0), ..., g(L)`` already normalised so that the limit
    ``g_inf`` equals 1.
    """

    values: tuple[float, ...]
    name: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or len(v) < 2:
            raise MeasureError("rate table needs at least g(0) and g(1)")
        if v[0] != 0.0 or not v[1] > 0.0:
            raise MeasureError("need g(0) = 0 < g(1)")
        if np.any(np.diff(v) < 0.0):
            raise MeasureError("g must be nondecreasing")
        if v[-1] > 1.0:
            raise MeasureError("g exceeds its limit g_inf = 1")
        object.__setattr__(self, "values", tuple(float(x) for x in v))
        if not self.name:
            object.__setattr__(self, "name", "table:" + ",".join(repr(x) for x in self.values))

    @classmethod
    def mm1(cls) -> "RateFunction":
        """``g(n) = min(n, 1)``: M/M/1 queues."""
        return cls((0.0, 1.0), name="mm1")

    @classmethod
    def from_values(cls, values: Sequence[float], g_inf: float | None = None,
                    name: str = "") -> "RateFunction":
        v = np.asarray(values, dtype=float)
        lim = float(v.max()) if g_inf is None else float(g_inf)
        if lim <= 0.0:
            raise MeasureError("g_inf must be positive")
        return cls(tuple(v / lim), name=name)

    @classmethod
    def from_name(cls, name: str) -> "RateFunction":
        if name == "mm1":
            return cls.mm1()
        if name.startswith("table:"):
            return cls(tuple(float(x) for x in name[6:].split(",")), name=name)
        raise MeasureError(f"unknown rate function {name!r}")

    @property
    def L(self) -> int:
        return len(self.values) - 1

    @property
    def table(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)

    def __call__(self, n):
        n = np.asarray(n)
        out = np.ones(n.shape, dtype=float)
        inside = (n <= self.L) & (n != INF)
        out[inside] = self.table[n[inside]]
        return out if out.ndim else float(out)

    def log_factorials(self) -> np.ndarray:
        """``log g(n)!`` for ``n = 0..L``."""
        lg = np.zeros(self.L + 1)
        lg[1:] = np.cumsum(np.log(self.table[1:]))
        return lg


def _head_weights(r: np.ndarray, g: RateFunction) -> tuple[np.ndarray, np.ndarray]:
    """Weights ``r**n / g(n)!`` for ``n = 0..L`` (rows: r values)."""
    n = np.arange(g.L + 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.power.outer(r, n) * np.exp(-g.log_factorials())[None, :]
    return n, w


def theta_moments(r, g: RateFunction) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Partition sum, mean and variance of ``theta_r`` for ``0 <= r < 1`` (vectorised)."""
    r = np.atleast_1d(np.asarray(r, dtype=float))
    if np.any(r < 0.0) or np.any(r >= 1.0):
        raise MeasureError("fugacity ratio must lie in [0, 1)")
    L = g.L
    n, w = _head_weights(r, g)
    head = w[:, :L]
    wl = w[:, L]
    q = 1.0 - r
    Z = head.sum(axis=1) + wl / q
    s1 = (head * n[:L]).sum(axis=1) + wl * (L / q + r / q**2)
    s2 = (head * n[:L] ** 2).sum(axis=1) + wl * (L**2 / q + 2 * L * r / q**2 + r * (1 + r) / q**3)
    mean = s1 / Z
    var = np.maximum(s2 / Z - mean**2, 0.0)
    return Z, mean, var


def mean_occupancy(r, g: RateFunction) -> np.ndarray:
    """``R(r)``, the mean of ``theta_r``."""
    return theta_moments(r, g)[1]


def mean_occupancy_derivative(r, g: RateFunction) -> np.ndarray:
    """``R'(r) = Var(theta_r) / r``; equals ``1/g(1)`` at ``r = 0``."""
    r = np.atleast_1d(np.asarray(r, dtype=float))
    _, _, var = theta_moments(r, g)
    out = np.empty_like(r)
    pos = r > 0
    out[pos] = var[pos] / r[pos]
    out[~pos] = 1.0 / g.values[1]
    return out


@dataclass(frozen=True)
class SiteLaw:
    beta: float
    pmf: np.ndarray
    Z: float
    mean: float
    var: float

    @property
    def n_cut(self) -> int:
        return len(self.pmf) - 1

    def cdf(self) -> np.ndarray:
        return np.cumsum(self.pmf)


def theta_pmf(beta: float, g: RateFunction, tail_eps: float = 1e-12,
              max_terms: int = 10_000_000) -> SiteLaw:
    """Tabulate ``theta_beta`` up to the first ``n`` whose residual mass and
    residual first moment are both below ``tail_eps``."""
    if not (0.0 <= beta < 1.0):
        raise MeasureError(f"beta={beta} must lie in [0, 1)")
    Z, mean, var = (float(a[0]) for a in theta_moments(beta, g))
    if beta == 0.0:
        return SiteLaw(0.0, np.array([1.0]), 1.0, 0.0, 0.0)
    L = g.L
    _, w = _head_weights(np.array([beta]), g)
    wl = w[0, L]
    q = 1.0 - beta

    def resid(n):
        # mass and first moment of {eta > n} for n >= L - 1
        p_next = wl * beta ** (n + 1 - L) / Z
        return p_next / q, p_next * ((n + 1) / q + beta / q**2)

    n = L - 1
    m0, m1 = resid(n)
    if m0 >= tail_eps or m1 >= tail_eps:
        # geometric decay: jump close to the answer, then walk
        need = math.log(tail_eps * q**2 * Z / max(wl, 1e-300)) / math.log(beta)
        n = max(L - 1, int(need) + L - 2)
        m0, m1 = resid(n)
        while m0 >= tail_eps or m1 >= tail_eps:
            n += 1
            m0, m1 = resid(n)
        while n > L - 1:
            a0, a1 = resid(n - 1)
            if a0 >= tail_eps or a1 >= tail_eps:
                break
            n -= 1
    if n + 1 > max_terms:
        raise MeasureError(f"theta_{beta} needs {n + 1} terms (> max_terms)")
    k = np.arange(n + 1)
    pmf = np.empty(n + 1)
    m = min(L, n + 1)
    pmf[:m] = w[0, :m] / Z
    if n + 1 > L:
        pmf[L:] = wl * np.exp((k[L:] - L) * math.log(beta)) / Z
    return SiteLaw(float(beta), pmf, Z, mean, var)


# ---------------------------------------------------------------- curves


def _atoms_of(source, c: float | None) -> tuple[np.ndarray, np.ndarray, float, dict]:
    if isinstance(source, DisorderLaw):
        values, probs = source.effective_atoms()
        c0 = source.support_inf
        meta = {"source": "law", "law": source.to_dict()}
    elif isinstance(source, Environment):
        values, counts = np.unique(source.alpha, return_counts=True)
        probs = counts / counts.sum()
        c0 = source.c
        meta = {"source": "env", "window": [source.lo, source.hi]}
    else:
        raise MeasureError("source must be a DisorderLaw or an Environment")
    c = c0 if c is None else float(c)
    if not c > 0.0:
        raise MeasureError("c must be positive (c = 0 is not supported)")
    if c > values.min() + 1e-15:
        raise MeasureError(f"c={c} exceeds the smallest disorder value {values.min()}")
    return values, probs, c, meta


def _beta_grid(c: float, size: int) -> np.ndarray:
    n_uni = size // 2
    n_geo = size - n_uni
    uni = np.linspace(0.0, 0.5 * c, n_uni, endpoint=False)
    geo = c - 0.5 * c * np.geomspace(1.0, 1e-10, n_geo)
    return np.unique(np.concatenate([uni, geo]))


@dataclass
class FugacityCurve:
    """Average mean density ``Rbar(beta) = sum_a q_a R(beta / a)`` on ``[0, c)``.

    ``values``/``weights`` are the disorder atoms; evaluation is exact, the
    table (``grid``, ``Rbar``) is kept for export and bracketing.
    """

    c: float
    values: np.ndarray
    weights: np.ndarray
    g: RateFunction
    grid: np.ndarray = field(default=None)
    Rbar: np.ndarray = field(default=None)
    rho_c: float = math.inf
    rho_c_extrapolated: float = math.nan
    one_sided_gap: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def rho_c_infinite(self) -> bool:
        return math.isinf(self.rho_c)

    def rbar(self, beta) -> np.ndarray:
        beta = np.asarray(beta, dtype=float)
        flat = np.atleast_1d(beta)
        if np.any(flat < 0.0) or np.any(flat > self.c):
            raise MeasureError("beta outside [0, c]")
        out = np.zeros(flat.shape)
        for a, q in zip(self.values, self.weights):
            r = flat / a
            finite = r < 1.0
            out[finite] += q * mean_occupancy(r[finite], self.g)
            out[~finite] = math.inf
        return out if beta.ndim else float(out[0])

    def rbar_prime(self, beta) -> np.ndarray:
        flat = np.atleast_1d(np.asarray(beta, dtype=float))
        out = np.zeros(flat.shape)
        for a, q in zip(self.values, self.weights):
            out += q / a * mean_occupancy_derivative(flat / a, self.g)
        return out

    def inverse(self, rho) -> np.ndarray:
        """Exact ``Rbar^{-1}`` by bracketed bisection (to a few ulp)."""
        rho = np.asarray(rho, dtype=float)
        flat = np.atleast_1d(rho)
        if np.any(flat < 0.0):
            raise MeasureError("negative density")
        if np.any(flat >= self.rho_c):
            raise MeasureError(f"density >= rho_c = {self.rho_c}: no subcritical equilibrium")
        idx = np.searchsorted(self.Rbar, flat, side="right")
        lo = self.grid[np.clip(idx - 1, 0, len(self.grid) - 1)].copy()
        hi = np.where(idx < len(self.grid), self.grid[np.minimum(idx, len(self.grid) - 1)], self.c)
        exact = self.Rbar[np.clip(idx - 1, 0, len(self.grid) - 1)] == flat
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if np.all((mid <= lo) | (mid >= hi)):
                break
            below = self.rbar(mid) < flat
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        # pick the closer endpoint
        out = np.where(np.abs(self.rbar(lo) - flat) <= np.abs(self.rbar(hi) - flat), lo, hi)
        out = np.where(exact, self.grid[np.clip(idx - 1, 0, len(self.grid) - 1)], out)
        out = np.where(flat == 0.0, 0.0, out)
        return out if rho.ndim else float(out[0])

    def to_csv(self, path) -> None:
        lines = [f"# c={self.c!r}", f"# rho_c={self.rho_c!r}", f"# g={self.g.name}", "beta,Rbar"]
        lines += [f"{b!r},{r!r}" for b, r in zip(self.grid.tolist(), self.Rbar.tolist())]
        Path(path).write_text("\n".join(lines) + "\n")


def _richardson_limit(grid: np.ndarray, vals: np.ndarray, c: float) -> float:
    """Extrapolate ``Rbar(c-)`` from the last geometric grid points (linear in ``c - beta``)."""
    h = c - grid[-3:]
    v = vals[-3:]
    if not np.all(np.isfinite(v)):
        return math.inf
    # v(h) ~ v0 + a h + b h^2 fitted through the three points
    A = np.vstack([np.ones(3), h, h**2]).T
    try:
        return float(np.linalg.solve(A, v)[0])
    except np.linalg.LinAlgError:
        return float(v[-1])


def mean_density_curve(source, g: RateFunction, c: float | None = None,
                       grid_size: int = 512, require_finite: bool = False) -> FugacityCurve:
    """Tabulate ``Rbar`` for a finite-atom law or a realised environment.

    ``c`` defaults to the infimum of the law's support (or the window minimum);
    passing a smaller ``c`` describes non-ergodic environments such as defect
    sequences, whose marginal does not see ``c``.
    """
    values, weights, c, meta = _atoms_of(source, c)
    curve = FugacityCurve(c=c, values=values, weights=weights, g=g, meta=meta)
    grid = _beta_grid(c, grid_size)
    curve.grid = grid
    curve.Rbar = curve.rbar(grid)
    if np.any(np.diff(curve.Rbar) <= 0.0):
        raise MeasureError("Rbar table is not strictly increasing")
    divergent = bool(np.any((values == c) & (weights > 0.0)))
    curve.rho_c = math.inf if divergent else float(curve.rbar(np.array([c]))[0])
    curve.rho_c_extrapolated = math.inf if divergent else _richardson_limit(grid, curve.Rbar, c)
    if require_finite and divergent:
        raise MeasureError("critical density is infinite")
    if isinstance(source, Environment):
        sites = source.sites
        probe = grid[grid < c * (1 - 1e-6)]
        left = _window_average(source.alpha[sites <= 0], probe, g)
        right = _window_average(source.alpha[sites >= 0], probe, g)
        if left is not None and right is not None:
            curve.one_sided_gap = float(np.max(np.abs(left - right)))
    return curve


def _window_average(alpha: np.ndarray, beta: np.ndarray, g: RateFunction):
    if alpha.size == 0:
        return None
    vals, counts = np.unique(alpha, return_counts=True)
    out = np.zeros_like(beta)
    for a, k in zip(vals, counts):
        out += k * mean_occupancy(beta / a, g)
    return out / alpha.size


def density_to_fugacity(curve: FugacityCurve, rho):
    """``beta`` with ``Rbar(beta) = rho``; raises for ``rho >= rho_c``."""
    return curve.inverse(rho)


# --------------------------------------------------------- configurations


@dataclass(eq=False)
class Configuration:
    """Occupancies on the window ``[lo, lo + len(eta) - 1]``; ``INF`` marks infinite sites."""

    lo: int
    eta: np.ndarray

    def __post_init__(self):
        self.eta = np.asarray(self.eta, dtype=np.int64)
        if self.eta.ndim != 1:
            raise MeasureError("configuration must be one-dimensional")
        if np.any(self.eta < 0):
            raise MeasureError("negative occupancy")

    @classmethod
    def empty(cls, window) -> "Configuration":
        lo, hi = int(window[0]), int(window[1])
        return cls(lo, np.zeros(hi - lo + 1, dtype=np.int64))

    @property
    def hi(self) -> int:
        return self.lo + len(self.eta) - 1

    @property
    def window(self) -> tuple[int, int]:
        return self.lo, self.hi

    @property
    def sites(self) -> np.ndarray:
        return np.arange(self.lo, self.hi + 1)

    def __len__(self):
        return len(self.eta)

    def at(self, x) -> int:
        return int(self.eta[x - self.lo])

    @property
    def inf_mask(self) -> np.ndarray:
        return self.eta == INF

    @property
    def has_inf(self) -> bool:
        return bool(self.inf_mask.any())

    def finite_mass(self) -> int:
        return int(self.eta[~self.inf_mask].sum())

    def copy(self) -> "Configuration":
        return Configuration(self.lo, self.eta.copy())

    def __eq__(self, other):
        return (isinstance(other, Configuration) and self.lo == other.lo
                and np.array_equal(self.eta, other.eta))

    def __le__(self, other: "Configuration") -> bool:
        if self.window != other.window:
            raise MeasureError("configurations live on different windows")
        return bool(np.all(self.eta <= other.eta))

    def truncated(self, M: int) -> np.ndarray:
        return np.minimum(self.eta, M)


# -------------------------------------------------------------- sampling


def sample_theta(r: float, g: RateFunction, size: int, rng: np.random.Generator) -> np.ndarray:
    """Exact draws from ``theta_r``."""
    return sample_theta_array(np.full(size, float(r)), g, rng)


def sample_theta_array(r: np.ndarray, g: RateFunction, rng: np.random.Generator) -> np.ndarray:
    """One exact draw from ``theta_{r[i]}`` per entry: inverse CDF on the head
    ``0..L-1``, then a geometric tail; ``r = 1`` gives ``INF``."""
    r = np.asarray(r, dtype=float)
    if np.any(r < 0.0) or np.any(r > 1.0):
        raise MeasureError("fugacity ratio outside [0, 1]")
    out = np.zeros(r.shape, dtype=np.int64)
    crit = r == 1.0
    out[crit] = INF
    live = np.flatnonzero((r > 0.0) & ~crit)
    if live.size == 0:
        return out
    rl = r[live]
    L = g.L
    Z, _, _ = theta_moments(rl, g)
    _, w = _head_weights(rl, g)
    cum = np.cumsum(w[:, :L], axis=1) / Z[:, None]
    u = rng.random(live.size)
    n = (u[:, None] >= cum).sum(axis=1).astype(np.int64)
    tail = n >= L
    if tail.any():
        v = 1.0 - rng.random(int(tail.sum()))  # in (0, 1]
        n[tail] = L + np.floor(np.log(v) / np.log(rl[tail])).astype(np.int64)
    out[live] = n
    return out


def sample_product_measure(env: Environment, beta: float, g: RateFunction,
                           seed: int | None = None, rng: np.random.Generator | None = None,
                           sites: np.ndarray | None = None) -> Configuration:
    """Independent draws from ``theta_{beta / alpha(x)}``.

    Sites with ``alpha(x) == beta`` (possible only at ``beta = c``) get ``INF``.
    """
    if beta < 0.0:
        raise MeasureError("negative fugacity")
    if beta > env.c:
        raise MeasureError(f"beta={beta} exceeds c={env.c}")
    if rng is None:
        rng = np.random.default_rng(seed)
    alpha = env.alpha
    ratio = np.where(alpha == beta, 1.0, beta / alpha)
    eta = sample_theta_array(ratio, g, rng)
    return Configuration(env.lo, eta)


def critical_marginals(env: Environment, sites, c: float, g: RateFunction, M: int) -> np.ndarray:
    """Laws of ``min(eta(x), M)`` under the critical measure, one row per site."""
    return product_marginals(env, sites, c, g, M)


def product_marginals(env: Environment, sites, beta: float, g: RateFunction, M: int) -> np.ndarray:
    """Laws of ``min(eta(x), M)`` under ``mu_beta``; the last column is ``P(eta >= M)``."""
    sites = np.atleast_1d(sites)
    out = np.zeros((len(sites), M + 1))
    for i, x in enumerate(sites):
        a = env[int(x)]
        r = beta / a
        if r >= 1.0:
            out[i, M] = 1.0
            continue
        law = theta_pmf(r, g)
        head = law.pmf[:M]
        out[i, :len(head)] = head
        out[i, M] = max(0.0, 1.0 - head.sum())
    return out
