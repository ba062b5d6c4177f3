"""Macroscopic flux ``f(rho) = drift * Rbar^{-1}(rho)`` with its plateau at ``drift * c``."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .env import DisorderLaw
from .kinetics import JumpKernel
from .measures import FugacityCurve, RateFunction, mean_density_curve


class FluxError(ValueError):
    pass


def upper_hull(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Indices of the upper concave hull of points sorted by ``x`` (monotone chain)."""
    hull: list[int] = []
    for i in range(len(x)):
        while len(hull) >= 2:
            a, b = hull[-2], hull[-1]
            # drop b if it lies on or below the chord a -> i
            if (y[b] - y[a]) * (x[i] - x[a]) <= (y[i] - y[a]) * (x[b] - x[a]):
                hull.pop()
            else:
                break
        hull.append(i)
    return np.asarray(hull, dtype=np.int64)


def lower_hull(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return upper_hull(x, -y)


@dataclass
class FluxFunction:
    """Tabulated flux; exact evaluation goes through the fugacity curve when present.

    ``rho_c`` may be infinite, in which case the table stops at ``rho_max``
    and evaluation beyond it is refused.
    """

    rho: np.ndarray
    f: np.ndarray
    drift: float
    plateau: float
    rho_c: float
    rho_max: float
    curve: FugacityCurve | None = None
    beta: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if np.any(np.diff(self.rho) <= 0.0):
            raise FluxError("flux table must be strictly increasing in rho")
        if np.any(np.diff(self.f) < 0.0):
            raise FluxError("flux must be nondecreasing")
        self.lipschitz = float(np.max(np.diff(self.f) / np.diff(self.rho)))

    @property
    def c(self) -> float:
        return self.plateau / self.drift

    @property
    def cfl_speed(self) -> float:
        """Lipschitz bound inflated by 10% for time-step selection."""
        return 1.1 * self.lipschitz

    @classmethod
    def from_samples(cls, rho, f, plateau: float | None = None, rho_c: float | None = None,
                     drift: float = 1.0) -> "FluxFunction":
        """Synthetic flux from a table; linear interpolation between samples."""
        rho = np.asarray(rho, dtype=float)
        f = np.asarray(f, dtype=float)
        return cls(rho, f, drift, float(f[-1]) if plateau is None else plateau,
                   float(rho[-1]) if rho_c is None else rho_c, float(rho[-1]))

    def _check_range(self, rho):
        if np.any(rho < 0.0):
            raise FluxError("negative density")
        if math.isinf(self.rho_c) and np.any(rho > self.rho_max * (1 + 1e-12)):
            raise FluxError(f"density beyond the tabulated range [0, {self.rho_max}]")

    def __call__(self, rho):
        r = np.asarray(rho, dtype=float)
        flat = np.atleast_1d(r)
        self._check_range(flat)
        if self.curve is None:
            out = np.interp(flat, self.rho, self.f)
        else:
            out = np.full(flat.shape, self.plateau)
            sub = flat < self.rho_c
            if sub.any():
                out[sub] = self.drift * self.curve.inverse(flat[sub])
        return out if r.ndim else float(out[0])

    def interp(self, rho):
        """Piecewise-linear table evaluation (plateau continued past ``rho_max``)."""
        r = np.asarray(rho, dtype=float)
        self._check_range(np.atleast_1d(r))
        return np.interp(r, self.rho, self.f)

    def envelope(self, lo: float = 0.0, hi: float | None = None):
        """Concave envelope on ``[lo, hi]``: hull nodes and its values on the table."""
        x, y = self.restrict(lo, self.rho_max if hi is None else hi)
        idx = upper_hull(x, y)
        return x, np.interp(x, x[idx], y[idx]), (x[idx], y[idx])

    def restrict(self, lo: float, hi: float) -> tuple[np.ndarray, np.ndarray]:
        """Table points in ``[lo, hi]`` with both endpoints inserted exactly."""
        if hi < lo:
            lo, hi = hi, lo
        inside = (self.rho > lo) & (self.rho < hi)
        x = np.concatenate([[lo], self.rho[inside], [hi]]) if hi > lo else np.array([lo])
        y = self(x) if self.curve is not None else self.interp(x)
        return x, np.asarray(y, dtype=float)

    def to_csv(self, path) -> None:
        _, env_vals, _ = self.envelope()
        p = self.meta.get("kernel", {})
        vc = critical_speed(self, 0.0) if math.isfinite(self.rho_c) else math.nan
        lines = [f"# c={self.c!r}", f"# drift={self.drift!r}", f"# kernel={p}",
                 f"# rho_c={self.rho_c!r}", f"# v_c(0)={vc!r}", "rho,f,envelope"]
        lines += [f"{r!r},{v!r},{e!r}" for r, v, e in
                  zip(self.rho.tolist(), self.f.tolist(), env_vals.tolist())]
        Path(path).write_text("\n".join(lines) + "\n")


def build_flux(curve: FugacityCurve, kernel: JumpKernel, rho_max: float | None = None,
               n_points: int = 2048) -> FluxFunction:
    """Tabulate ``f`` on ``[0, 2 rho_c]`` (or ``[0, rho_max]``).

    With an infinite critical density there is no plateau in range and
    ``rho_max`` is mandatory.
    """
    drift = kernel.drift
    if not drift > 0.0:
        raise FluxError("the kernel must have positive drift")
    c = curve.c
    plateau = drift * c
    finite = math.isfinite(curve.rho_c)
    if not finite and rho_max is None:
        raise FluxError("critical density is infinite; pass rho_max to tabulate a range")
    top = 2.0 * curve.rho_c if rho_max is None else float(rho_max)
    if not top > 0.0:
        raise FluxError("empty density range")
    below_top = min(top, curve.rho_c) if finite else top
    half = n_points // 2
    if finite:
        b_top = c
        rho_pts = np.linspace(0.0, below_top, half, endpoint=False)
        beta_geo = c - c * np.geomspace(1.0, 1e-12, n_points - half)
        beta = np.concatenate([curve.inverse(rho_pts), beta_geo[:-1], np.linspace(0, c, 64)[:-1]])
    else:
        b_top = curve.inverse(top)
        rho_pts = np.linspace(0.0, top, half)
        beta = np.concatenate([curve.inverse(rho_pts), np.linspace(0.0, b_top, n_points - half)])
    beta = np.unique(beta)
    beta = beta[beta < c] if finite else beta[beta <= b_top]
    rho = curve.rbar(beta)
    keep = np.concatenate([[True], np.diff(rho) > 0.0])
    beta, rho = beta[keep], rho[keep]
    f = drift * beta
    if finite:
        if top < curve.rho_c:
            mask = rho <= top
            beta, rho, f = beta[mask], rho[mask], f[mask]
        else:
            flat = np.linspace(curve.rho_c, max(top, curve.rho_c * (1 + 1e-9)), 65)
            rho = np.concatenate([rho, flat])
            f = np.concatenate([f, np.full(flat.size, plateau)])
            beta = np.concatenate([beta, np.full(flat.size, c)])
    meta = {"kernel": kernel.to_dict(), "g": curve.g.name, "source": curve.meta}
    return FluxFunction(rho, f, drift, plateau, curve.rho_c, float(rho[-1]), curve, beta, meta)


def homogeneous_flux(g: RateFunction, kernel: JumpKernel, rho_max: float) -> FluxFunction:
    return build_flux(mean_density_curve(DisorderLaw.point(1.0), g), kernel, rho_max=rho_max)


def dilute_flux(c: float, g: RateFunction, kernel: JumpKernel, rho_max: float | None = None,
                n_points: int = 2048) -> FluxFunction:
    """``min(f_hom, drift * c)``: the homogeneous flux cut at the plateau."""
    if not 0.0 < c < 1.0:
        raise FluxError("c must lie in (0, 1)")
    curve = mean_density_curve(DisorderLaw.deterministic(c), g, c=c)
    return build_flux(curve, kernel, rho_max=rho_max, n_points=n_points)


def critical_speed(flux: FluxFunction, rho: float) -> float:
    """Left slope at ``rho_c`` of the concave envelope of ``f`` on ``[rho, rho_c]``.

    The envelope's last hull segment gives the slope up to rounding in the
    hull's orientation test; chord slopes are taken only where they are
    well conditioned, and the limit ``r -> rho_c`` is the exact one-sided
    derivative ``drift / Rbar'(c)`` when the fugacity curve is known.
    """
    if not math.isfinite(flux.rho_c):
        raise FluxError("no critical density in range")
    if not 0.0 <= rho < flux.rho_c:
        raise FluxError(f"need 0 <= rho < rho_c = {flux.rho_c}")
    rc = flux.rho_c
    x, y = flux.restrict(rho, rc)
    idx = upper_hull(x, y)
    a, b = idx[-2], idx[-1]
    slope = (y[b] - y[a]) / (x[b] - x[a])
    if flux.curve is None:
        return float(slope)
    safe = (rc - x) > 1e-6 * max(rc, 1.0)
    chords = (y[-1] - y[safe]) / (rc - x[safe])
    edge = flux.drift / float(flux.curve.rbar_prime(np.array([flux.c]))[0])
    return float(min(chords.min(initial=math.inf), edge))


def concave_envelope(flux: FluxFunction, lo: float, hi: float) -> tuple[np.ndarray, np.ndarray]:
    x, env, _ = flux.envelope(lo, hi)
    return x, env


@dataclass(frozen=True)
class ConvexityReport:
    holds_on_grid: bool
    margin: float
    left_derivative: float
    advisory: str = "grid evidence only"


def check_weak_convexity(curve: FugacityCurve, n: int = 2000) -> ConvexityReport:
    """Grid check of ``Rbar(b) - Rbar(c) - (b - c) D > 0`` on ``[0, c)``,
    ``D`` the left derivative at ``c`` of the convex envelope of ``Rbar``."""
    if curve.rho_c_infinite:
        raise FluxError("critical density is infinite")
    c = curve.c
    beta = np.linspace(0.0, c * (1 - 1e-4), n)
    vals = curve.rbar(beta)
    rc = curve.rho_c
    # Rbar is analytic up to c for finitely many atoms, so the limsup of
    # chord slopes is the ordinary left derivative
    D = float(curve.rbar_prime(np.array([c]))[0])
    gap = vals - rc - (beta - c) * D
    return ConvexityReport(bool(np.all(gap > 0.0)), float(gap.min()), D)
