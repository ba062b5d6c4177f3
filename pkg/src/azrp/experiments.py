"""Desk-scale experiments on top of the simulator and the PDE solver.

Every experiment is a pure function of its arguments: randomness enters
only through ``seed``, which is split into per-replica streams with
:class:`numpy.random.SeedSequence`, so results do not depend on how
replicas are distributed over workers.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .env import DisorderLaw, Environment, build_env, build_defect_env, find_typical_site
from .flux import FluxFunction, build_flux
from .kinetics import (CurrentTracker, HarrisStream, JumpKernel, KineticsError, causal_stop_times,
                       couple_run, deterministic_filling, run)
from .measures import (INF, Configuration, RateFunction, density_to_fugacity, mean_density_curve, product_marginals,
                       sample_product_measure, sample_theta_array)
from .pde import Profile, godunov_solve


class ExperimentError(ValueError):
    pass


# ------------------------------------------------------------ plumbing


def replica_seeds(seed: int, K: int) -> list[tuple[int, int]]:
    """``(stream_seed, init_seed)`` per replica, from independent spawned sequences."""
    out = []
    for child in np.random.SeedSequence(int(seed)).spawn(K):
        s = child.generate_state(2, dtype=np.uint64)
        out.append((int(s[0]), int(s[1])))
    return out


def _pmap(fn: Callable, items: Sequence, workers: int = 1) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True)
class DensityProfile:
    """Macroscopic initial density ``rho0(u)``: Riemann step, constant, or empty."""

    kind: str
    lam: float = 0.0
    rho: float = 0.0

    @classmethod
    def riemann(cls, lam: float, rho: float) -> "DensityProfile":
        return cls("riemann", float(lam), float(rho))

    @classmethod
    def constant(cls, rho: float) -> "DensityProfile":
        return cls("constant", float(rho), float(rho))

    @classmethod
    def empty(cls) -> "DensityProfile":
        return cls("constant", 0.0, 0.0)

    @classmethod
    def from_dict(cls, d) -> "DensityProfile":
        if d["kind"] == "riemann":
            return cls.riemann(d["lam"], d["rho"])
        if d["kind"] == "constant":
            return cls.constant(d["rho"])
        if d["kind"] == "empty":
            return cls.empty()
        raise ExperimentError(f"unknown profile kind {d['kind']!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        if self.kind == "riemann":
            return np.where(u < 0.0, self.lam, self.rho)
        return np.full(u.shape, self.rho)

    @property
    def left(self) -> float:
        return self.lam

    @property
    def right(self) -> float:
        return self.rho

    @property
    def top(self) -> float:
        return max(self.lam, self.rho)


@dataclass(frozen=True)
class InitialCondition:
    """Microscopic initial data.

    ``constant``: ``eta = value``; ``density``: deterministic pattern of
    density ``value`` (``floor(v(x+1)) - floor(v x)``); ``product``: a draw
    from the product measure at fugacity ``value``; ``peak``: ``value``
    particles at ``site``, nothing elsewhere; ``empty``.
    """

    kind: str
    value: float = 0.0
    site: int = 0

    @classmethod
    def constant(cls, n: int) -> "InitialCondition":
        return cls("constant", float(n))

    @classmethod
    def density(cls, rho: float) -> "InitialCondition":
        return cls("density", float(rho))

    @classmethod
    def product(cls, beta: float) -> "InitialCondition":
        return cls("product", float(beta))

    @classmethod
    def peak(cls, site: int, mass: int) -> "InitialCondition":
        return cls("peak", float(mass), int(site))

    @classmethod
    def empty(cls) -> "InitialCondition":
        return cls("empty")

    @classmethod
    def from_dict(cls, d) -> "InitialCondition":
        return cls(d["kind"], float(d.get("value", 0.0)), int(d.get("site", 0)))

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def random(self) -> bool:
        return self.kind == "product"

    def build(self, env: Environment, g: RateFunction, rng: np.random.Generator | None = None) -> Configuration:
        W = len(env)
        if self.kind == "empty":
            return Configuration(env.lo, np.zeros(W, dtype=np.int64))
        if self.kind == "constant":
            return Configuration(env.lo, np.full(W, int(self.value), dtype=np.int64))
        if self.kind == "density":
            return Configuration(env.lo, deterministic_filling(self.value, W, offset=env.lo))
        if self.kind == "product":
            return sample_product_measure(env, self.value, g, rng=rng)
        if self.kind == "peak":
            eta = np.zeros(W, dtype=np.int64)
            if not env.lo <= self.site <= env.hi:
                raise ExperimentError("peak site outside the window")
            eta[self.site - env.lo] = int(self.value)
            return Configuration(env.lo, eta)
        raise ExperimentError(f"unknown initial condition {self.kind!r}")


def law_curve(law: DisorderLaw, g: RateFunction):
    return mean_density_curve(law, g)


def law_flux(law: DisorderLaw, g: RateFunction, kernel: JumpKernel, rho_top: float) -> FluxFunction:
    """Macroscopic flux for a disorder law; infinite critical densities are tabulated up to ``rho_top``."""
    curve = law_curve(law, g)
    if math.isinf(curve.rho_c):
        return build_flux(curve, kernel, rho_max=max(1.05 * rho_top, 1e-3))
    return build_flux(curve, kernel)


def critical_density(source, g: RateFunction) -> float:
    """``rho_c`` for a law, or for an environment with its zero-density defects removed."""
    if isinstance(source, DisorderLaw):
        return law_curve(source, g).rho_c
    if source.defects:
        keep = np.ones(len(source), dtype=bool)
        keep[np.asarray(source.defects) - source.lo] = False
        trimmed = Environment(source.lo, source.lo + int(keep.sum()) - 1, source.alpha[keep],
                              nominal_c=source.critical_c)
        return mean_density_curve(trimmed, g, c=source.critical_c).rho_c
    return mean_density_curve(source, g, c=source.critical_c).rho_c


def _margins(kernel: JumpKernel, T: float) -> tuple[int, int]:
    """Upstream/downstream padding from the finite-propagation bound (speed 1 per unit jump, doubled)."""
    reach = int(math.ceil(2.0 * T * kernel.max_jump)) + kernel.max_jump + 1
    if kernel.totally_asymmetric:
        return reach, kernel.max_jump + 1
    return reach, reach


def initial_from_profile(env: Environment, profile: DensityProfile, N: int, flux: FluxFunction,
                         g: RateFunction, rng: np.random.Generator) -> Configuration:
    """Product sampling from ``mu^{alpha, rho0(x/N)}`` where ``rho0 < rho_c``,
    deterministic filling elsewhere."""
    u = (env.sites + 0.5) / N
    rho = profile(u)
    sup = rho >= flux.rho_c
    cum = np.concatenate([[0.0], np.cumsum(np.where(sup, rho, 0.0))])
    eta = np.diff(np.floor(cum)).astype(np.int64)
    sub = np.flatnonzero(~sup)
    if sub.size:
        beta = np.zeros(sub.size)
        pos = rho[sub] > 0
        if pos.any():
            beta[pos] = density_to_fugacity(flux.curve, rho[sub][pos])
        eta[sub] = sample_theta_array(np.minimum(beta / env.alpha[sub], 1.0), g, rng)
    return Configuration(env.lo, eta)


def _site_curve(g: RateFunction):
    """``R`` itself: the fugacity curve of a single site with rate 1."""
    return mean_density_curve(DisorderLaw.point(1.0), g)


# ---------------------------------------------------------- hydrodynamics


@dataclass
class EmpiricalProfile:
    N: int
    block: int
    positions: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    K: int
    inf_blocks: int = 0


@dataclass
class HydroReport:
    rows: list[dict]
    profiles: list[EmpiricalProfile]
    references: list[np.ndarray]
    params: dict

    @property
    def distances(self) -> list[float]:
        return [r["l1"] for r in self.rows]


def _simulate_final(job) -> np.ndarray:
    (env, cfg_builder, g, kernel, T, stream_seed, init_seed, boundary, stop) = job
    rng = np.random.default_rng(init_seed)
    cfg = cfg_builder(env, rng)
    res = run(cfg, env, kernel, g, T, HarrisStream(stream_seed), boundary=boundary, stop_times=stop)
    return res.final.eta


@dataclass(frozen=True)
class _ProfileBuilder:
    profile: DensityProfile
    N: int
    flux: FluxFunction
    g: RateFunction

    def __call__(self, env, rng):
        return initial_from_profile(env, self.profile, self.N, self.flux, self.g, rng)


def _blocks(values: np.ndarray, start: int, B: int, n_blocks: int) -> np.ndarray:
    seg = values[..., start:start + B * n_blocks]
    return seg.reshape(seg.shape[:-1] + (n_blocks, B)).mean(axis=-1)


def hydro_compare(law: DisorderLaw, g: RateFunction, kernel: JumpKernel, rho0: DensityProfile,
                  N_list: Sequence[int], t: float, K: int, seed: int = 0,
                  obs: tuple[float, float] = (-0.5, 1.5), block: Callable[[int], int] | None = None,
                  ref_dx: float = 1 / 1600, cfl: float = 0.45, env_seed: int = 0,
                  workers: int = 1, margin: int | None = None) -> HydroReport:
    """L1 distance, on ``obs``, between block-averaged particle densities at time
    ``N t`` and the Godunov solution at time ``t``, for each ``N``.

    Blocks have ``block(N)`` sites (default ``round(N**(2/3))``); the
    reference is averaged over exactly the same macroscopic intervals.
    """
    if t <= 0:
        raise ExperimentError("t must be positive")
    flux = law_flux(law, g, kernel, rho0.top)
    if rho0.top >= flux.rho_c and law.kind != "deterministic":
        raise ExperimentError("supercritical data need a defect environment with finite rho_c")
    block = block or (lambda n: max(1, int(round(n ** (2.0 / 3.0)))))
    pad = flux.cfl_speed * t + 0.05
    a, b = obs
    ref0 = Profile.step(rho0.left, rho0.right, a - pad, b + pad, ref_dx) if rho0.kind == "riemann" \
        else Profile.from_function(rho0, a - pad, b + pad, ref_dx)
    ref = godunov_solve(ref0, flux, t, cfl).profile
    rows, profiles, refs = [], [], []
    seeds_all = replica_seeds(seed, len(N_list) * K)
    for ni, N in enumerate(N_list):
        T = N * t
        up, down = _margins(kernel, T)
        if margin is not None:
            if margin < up:
                raise ExperimentError(f"window margin {margin} below the propagation bound {up}")
            up = down = margin if not kernel.totally_asymmetric else up
        x_lo, x_hi = int(math.ceil(a * N)), int(math.floor(b * N))
        window = (x_lo - up, x_hi + down)
        env = build_env(law, window, env_seed)
        builder = _ProfileBuilder(rho0, N, flux, g)
        jobs = [(env, builder, g, kernel, T, ss, si, "frozen", None)
                for ss, si in seeds_all[ni * K:(ni + 1) * K]]
        finals = np.array(_pmap(_simulate_final, jobs, workers))
        B = block(N)
        nb = (x_hi - x_lo) // B
        start = x_lo - env.lo
        inf_mask = finals[:, start:start + B * nb] == INF
        vals = np.where(inf_mask, 0, finals[:, start:start + B * nb]).astype(float)
        per_rep = _blocks(vals, 0, B, nb)
        mean = per_rep.mean(axis=0)
        se = per_rep.std(axis=0, ddof=1) / math.sqrt(K) if K > 1 else np.zeros(nb)
        edges = (x_lo + B * np.arange(nb + 1)) / N
        ref_blocks = ref.block_average(edges)
        l1 = float(np.sum(np.abs(mean - ref_blocks)) * B / N)
        centers = 0.5 * (edges[1:] + edges[:-1])
        n_inf = int(inf_mask.reshape(K, nb, B).any(axis=(0, 2)).sum())
        profiles.append(EmpiricalProfile(N, B, centers, mean, se, K, n_inf))
        refs.append(ref_blocks)
        rows.append({"N": N, "l1": l1, "block": B, "K": K, "T": T,
                     "window": list(window), "blocks": nb})
    params = {"law": law.to_dict(), "g": g.name, "kernel": kernel.to_dict(), "rho0": rho0.to_dict(),
              "N_list": list(N_list), "t": t, "K": K, "seed": seed, "obs": list(obs),
              "ref_dx": ref_dx, "cfl": cfl, "env_seed": env_seed}
    return HydroReport(rows, profiles, refs, params)


# ------------------------------------------------- critical convergence


@dataclass
class MarginalStats:
    """Histograms of ``min(eta(x), M)`` over ``K`` replicas, one row per site."""

    sites: np.ndarray
    hist: np.ndarray
    M: int

    @classmethod
    def from_samples(cls, sites, samples: np.ndarray, M: int) -> "MarginalStats":
        """``samples`` has shape (K, n_sites); INF counts as ``M``."""
        trunc = np.minimum(samples, M)
        hist = np.stack([np.bincount(trunc[:, j], minlength=M + 1) for j in range(trunc.shape[1])])
        return cls(np.asarray(sites), hist, M)

    @property
    def K(self) -> int:
        return int(self.hist[0].sum())

    def pmf(self) -> np.ndarray:
        return self.hist / self.hist.sum(axis=1, keepdims=True)

    def tv(self, exact: np.ndarray) -> np.ndarray:
        return 0.5 * np.abs(self.pmf() - exact).sum(axis=1)

    def merge(self, other: "MarginalStats") -> "MarginalStats":
        if not np.array_equal(self.sites, other.sites) or self.M != other.M:
            raise ExperimentError("incompatible histograms")
        return MarginalStats(self.sites, self.hist + other.hist, self.M)


@dataclass
class ConvergenceCurve:
    T_list: list[float]
    distance: np.ndarray
    per_site: np.ndarray
    noise_floor: float
    noise_q95: float
    stats: list[MarginalStats]
    means: np.ndarray
    params: dict

    @property
    def decreasing(self) -> bool:
        return bool(np.all(np.diff(self.distance) < 0))


def tv_noise_floor(exact: np.ndarray, K: int, reps: int, rng: np.random.Generator) -> tuple[float, float]:
    """Mean and 95% quantile of the max-over-sites TV between ``K`` exact draws and the truth."""
    vals = np.empty(reps)
    for r in range(reps):
        tvs = [0.5 * np.abs(rng.multinomial(K, p) / K - p).sum() for p in exact]
        vals[r] = max(tvs)
    return float(vals.mean()), float(np.quantile(vals, 0.95))


def _convergence_replica(job):
    (env, init, g, kernel, T_list, stream_seed, init_seed, obs_idx, stop) = job
    rng = np.random.default_rng(init_seed)
    cfg = init.build(env, g, rng)
    res = run(cfg, env, kernel, g, max(T_list), HarrisStream(stream_seed), snapshots=T_list,
              boundary="frozen", stop_times=stop)
    idx = [int(np.flatnonzero(res.times == T)[0]) for T in T_list]
    return res.snapshots[idx][:, obs_idx]


def _observation_env(source, sites: np.ndarray, kernel: JumpKernel, T: float, env_seed: int) -> Environment:
    up, down = _margins(kernel, T)
    window = (int(sites.min()) - up, int(sites.max()) + down)
    if isinstance(source, DisorderLaw):
        return build_env(source, window, env_seed)
    env = source
    if env.lo > window[0] or env.hi < window[1]:
        raise ExperimentError(f"environment window {env.window} smaller than required {window}")
    return env


def convergence_to_critical(source, g: RateFunction, kernel: JumpKernel, eta0: InitialCondition,
                            T_list: Sequence[float], sites: Sequence[int], K: int, M: int = 20,
                            seed: int = 0, noise_reps: int = 200, env_seed: int = 0,
                            workers: int = 1, prune_eps: float = 1e-15) -> ConvergenceCurve:
    """Max over ``sites`` of the TV distance between empirical laws of
    ``min(eta_T(x), M)`` and the critical product marginals, for each ``T``.

    ``source`` is a disorder law or an environment wide enough for the
    propagation bound.  With a totally asymmetric kernel, sites outside the
    causal cone of the observed sites are not simulated past the time they
    could matter (up to probability ``prune_eps``).
    """
    T_list = sorted(float(T) for T in T_list)
    sites = np.asarray(sites, dtype=np.int64)
    rho_c = critical_density(source, g)
    if math.isinf(rho_c):
        raise ExperimentError("critical density is infinite")
    Tmax = T_list[-1]
    env = _observation_env(source, sites, kernel, Tmax, env_seed)
    c = env.critical_c
    exact = product_marginals(env, sites, c, g, M)
    stop = None
    if kernel.totally_asymmetric:
        stop = causal_stop_times(env, int(sites.min()), Tmax, kernel, prune_eps)
    obs_idx = sites - env.lo
    jobs = [(env, eta0, g, kernel, T_list, ss, si, obs_idx, stop) for ss, si in replica_seeds(seed, K)]
    samples = np.array(_pmap(_convergence_replica, jobs, workers))  # (K, len(T), n_sites)
    stats, per_site, means = [], [], []
    for q in range(len(T_list)):
        st = MarginalStats.from_samples(sites, samples[:, q, :], M)
        stats.append(st)
        per_site.append(st.tv(exact))
        means.append(np.minimum(samples[:, q, :], M).mean(axis=0))
    per_site = np.array(per_site)
    floor, q95 = tv_noise_floor(exact, K, noise_reps, np.random.default_rng([int(seed), 1]))
    params = {"g": g.name, "kernel": kernel.to_dict(), "eta0": eta0.to_dict(), "T_list": T_list,
              "sites": sites.tolist(), "K": K, "M": M, "seed": seed, "c": c, "rho_c": rho_c,
              "env_window": list(env.window), "env_hash": env.content_hash(), "prune_eps": prune_eps}
    return ConvergenceCurve(T_list, per_site.max(axis=1), per_site, floor, q95, stats,
                            np.array(means), params)


def monotone_transfer_check(env: Environment, g: RateFunction, kernel: JumpKernel,
                            eta0: InitialCondition, x: int, T_list: Sequence[float], sites,
                            M: int, seed: int) -> bool:
    """Couple ``eta0`` with ``eta0 + delta_x`` and confirm ordered truncated means at each report time."""
    rng = np.random.default_rng(seed)
    base = eta0.build(env, g, rng)
    bumped = base.copy()
    if bumped.eta[x - env.lo] != INF:
        bumped.eta[x - env.lo] += 1
    res = couple_run([base, bumped], env, kernel, g, max(T_list), HarrisStream(seed),
                     snapshots=T_list, check_order=True)
    idx = np.asarray(sites) - env.lo
    snaps = res.snapshots[:, :, idx]
    ordered = np.all(np.minimum(snaps[:, 0], M) <= np.minimum(snaps[:, 1], M))
    return bool(ordered and res.violations == 0)


# --------------------------------------------------- local equilibrium


@dataclass
class LocalEqReport:
    x_N: int
    sites: np.ndarray
    hydro_value: float
    regime: str
    beta: float
    empirical: np.ndarray
    expected: np.ndarray
    stderr: np.ndarray
    params: dict

    @property
    def gaps(self) -> np.ndarray:
        return self.empirical - self.expected

    @property
    def z_scores(self) -> np.ndarray:
        return self.gaps / np.where(self.stderr > 0, self.stderr, np.inf)


def truncated_means(env: Environment, sites, beta: float, g: RateFunction, M: int) -> np.ndarray:
    """``E[min(eta(x), M)]`` under the product measure at fugacity ``beta``."""
    marg = product_marginals(env, sites, beta, g, M)
    return marg @ np.arange(M + 1)


def _hydro_value(law, g, kernel, rho0, t, u, cfl=0.45, dx=1 / 1600):
    flux = law_flux(law, g, kernel, rho0.top)
    pad = flux.cfl_speed * t + 0.05
    a, b = u - pad - 0.1, u + pad + 0.1
    init = Profile.step(rho0.left, rho0.right, a, b, dx) if rho0.kind == "riemann" \
        else Profile.from_function(rho0, a, b, dx)
    sol = godunov_solve(init, flux, t, cfl).profile
    i = int(np.clip(np.floor((u - sol.a) / sol.dx), 2, sol.n - 3))
    window = sol.values[i - 2:i + 3]
    return flux, float(sol.values[i]), float(window.max() - window.min())


def _micro_setup(law, kernel, sites_span, T, env_seed):
    up, down = _margins(kernel, T)
    return build_env(law, (sites_span[0] - up, sites_span[1] + down), env_seed)


def _target_beta(flux: FluxFunction, value: float) -> tuple[str, float]:
    # the finite-volume plateau sits a few ulp below rho_c
    if value >= flux.rho_c * (1.0 - 1e-9):
        return "critical", flux.c
    return "subcritical", float(flux.curve.inverse(value)) if value > 0 else 0.0


def _local_replica(job):
    (env, builder, g, kernel, times, stream_seed, init_seed, idx) = job
    rng = np.random.default_rng(init_seed)
    cfg = builder(env, rng)
    res = run(cfg, env, kernel, g, max(times), HarrisStream(stream_seed), snapshots=times)
    pick = [int(np.flatnonzero(res.times == T)[0]) for T in times]
    return res.snapshots[pick][:, idx]


def local_eq_stats(law: DisorderLaw, g: RateFunction, kernel: JumpKernel, rho0: DensityProfile,
                   N: int, t: float, u: float, delta: float, K: int, M: int = 20,
                   half_width: int = 2, seed: int = 0, env_seed: int = 0,
                   workers: int = 1, flat_tol: float = 0.01) -> LocalEqReport:
    """Truncated means near a typical site ``x_N ~ uN`` at time ``Nt`` versus the
    equilibrium (or critical) product measure at the hydrodynamic density."""
    flux, value, osc = _hydro_value(law, g, kernel, rho0, t, u)
    if osc >= flat_tol:
        raise ExperimentError(f"hydrodynamic profile oscillates by {osc:.3g} near u={u}")
    T = N * t
    target = int(math.floor(u * N))
    env = _micro_setup(law, kernel, (target - half_width - 64, target + half_width + 64), T, env_seed)
    x_N = find_typical_site(env, u, N, delta)
    sites = np.arange(x_N - half_width, x_N + half_width + 1)
    regime, beta = _target_beta(flux, value)
    builder = _ProfileBuilder(rho0, N, flux, g)
    jobs = [(env, builder, g, kernel, [T], ss, si, sites - env.lo) for ss, si in replica_seeds(seed, K)]
    samples = np.array(_pmap(_local_replica, jobs, workers))[:, 0, :]
    trunc = np.minimum(samples, M).astype(float)
    emp = trunc.mean(axis=0)
    se = trunc.std(axis=0, ddof=1) / math.sqrt(K) if K > 1 else np.zeros(len(sites))
    expected = truncated_means(env, sites, beta, g, M)
    params = {"law": law.to_dict(), "g": g.name, "kernel": kernel.to_dict(), "rho0": rho0.to_dict(),
              "N": N, "t": t, "u": u, "delta": delta, "K": K, "M": M, "half_width": half_width,
              "seed": seed, "env_seed": env_seed}
    return LocalEqReport(x_N, sites, value, regime, beta, emp, expected, se, params)


@dataclass
class CesaroReport:
    x_N: int
    sites: np.ndarray
    hydro_value: float
    regime: str
    rows: list[dict]
    params: dict


def cesaro_local_eq(law: DisorderLaw, g: RateFunction, kernel: JumpKernel, rho0: DensityProfile,
                    N: int, t: float, u: float, delta_list: Sequence[float], K: int, M: int = 20,
                    half_width: int = 2, n_times: int = 20, x_site: int | None = None,
                    seed: int = 0, env_seed: int = 0, workers: int = 1,
                    flat_tol: float = 0.01) -> CesaroReport:
    """Time averages over ``[N(t - delta), N t]`` of truncated means near ``x_N``
    (any site, default ``floor(uN)``) against the target product measure."""
    flux, value, osc = _hydro_value(law, g, kernel, rho0, t, u)
    if osc >= flat_tol:
        raise ExperimentError(f"hydrodynamic profile oscillates by {osc:.3g} near u={u}")
    if any(not 0 < d <= t for d in delta_list):
        raise ExperimentError("each delta must lie in (0, t]")
    T = N * t
    x_N = int(math.floor(u * N)) if x_site is None else int(x_site)
    env = _micro_setup(law, kernel, (x_N - half_width - 64, x_N + half_width + 64), T, env_seed)
    sites = np.arange(x_N - half_width, x_N + half_width + 1)
    regime, beta = _target_beta(flux, value)
    grids = {d: N * np.linspace(t - d, t, n_times) for d in delta_list}
    times = sorted({float(s) for grid in grids.values() for s in grid})
    builder = _ProfileBuilder(rho0, N, flux, g)
    jobs = [(env, builder, g, kernel, times, ss, si, sites - env.lo) for ss, si in replica_seeds(seed, K)]
    samples = np.minimum(np.array(_pmap(_local_replica, jobs, workers)), M).astype(float)
    expected = truncated_means(env, sites, beta, g, M)
    tix = {T_: i for i, T_ in enumerate(times)}
    rows = []
    for d in delta_list:
        pick = [tix[float(s)] for s in grids[d]]
        per_rep = samples[:, pick, :].mean(axis=1)
        emp = per_rep.mean(axis=0)
        se = per_rep.std(axis=0, ddof=1) / math.sqrt(K) if K > 1 else np.zeros(len(sites))
        rows.append({"delta": d, "empirical": emp, "expected": expected, "gap": emp - expected,
                     "stderr": se})
    instant = samples[:, tix[float(T)], :]
    rows.append({"delta": 0.0, "empirical": instant.mean(axis=0), "expected": expected,
                 "gap": instant.mean(axis=0) - expected,
                 "stderr": instant.std(axis=0, ddof=1) / math.sqrt(K) if K > 1 else np.zeros(len(sites))})
    params = {"law": law.to_dict(), "g": g.name, "kernel": kernel.to_dict(), "rho0": rho0.to_dict(),
              "N": N, "t": t, "u": u, "delta_list": list(delta_list), "K": K, "M": M,
              "half_width": half_width, "n_times": n_times, "x_site": x_N, "seed": seed,
              "env_seed": env_seed, "regime": regime, "beta": beta}
    return CesaroReport(x_N, sites, value, regime, rows, params)


# ------------------------------------------------------- counterexample


@dataclass
class CounterexampleReport:
    current: float
    plateau: float
    control_current: float
    control_plateau: float
    times: np.ndarray
    trace: np.ndarray
    control_trace: np.ndarray
    params: dict

    @property
    def deficit(self) -> bool:
        return self.current < 0.9 * self.plateau

    @property
    def control_reaches(self) -> bool:
        return self.control_current >= 0.98 * self.control_plateau


def _peak_currents(env, kernel, g, mass, site, T, times, avg_from, seeds):
    init = InitialCondition.peak(site, mass)
    traces, avgs = [], []
    for ss, _ in seeds:
        tr = CurrentTracker(0)
        run(init.build(env, g), env, kernel, g, T, HarrisStream(ss), trackers=[tr],
            snapshots=times, boundary="open")
        cur = tr.current
        traces.append(np.diff(cur) / np.diff(tr.times))
        i0 = int(np.searchsorted(tr.times, avg_from))
        avgs.append((cur[-1] - cur[i0]) / (tr.times[-1] - tr.times[i0]))
    return float(np.mean(avgs)), np.mean(traces, axis=0)


def counterexample_demo(g: RateFunction, c: float = 0.2, kernel: JumpKernel | None = None,
                        peak_site: int = -31, peak_mass: int = 10_000, T: float = 5000.0,
                        K: int = 20, seed: int = 0, avg_from: float = 0.1,
                        n_trace: int = 100) -> CounterexampleReport:
    """Current through the bond (0, 1) fed by one tall peak on a defect environment.

    With a totally asymmetric kernel the open window (absorbing right end,
    nothing to the left of the peak) is exact.  The control repeats the run
    with the nearest-neighbour kernel ``p = 1``.
    """
    kernel = kernel or JumpKernel((1, 2), (0.5, 0.5))
    if kernel.is_nearest_neighbor:
        raise ExperimentError("a nearest-neighbour kernel cannot show the effect")
    if not kernel.totally_asymmetric:
        raise ExperimentError("the demo needs a totally asymmetric kernel")
    if peak_site >= 0:
        raise ExperimentError("the peak must sit left of the origin")
    env = build_defect_env(c, (peak_site - 1, kernel.max_jump + 2))
    control = JumpKernel.nearest_neighbor(1.0)
    times = np.linspace(0.0, T, n_trace + 1)[1:]
    seeds = replica_seeds(seed, K)
    cur, trace = _peak_currents(env, kernel, g, peak_mass, peak_site, T, times, avg_from * T, seeds)
    ctl, ctrace = _peak_currents(env, control, g, peak_mass, peak_site, T, times, avg_from * T, seeds)
    params = {"g": g.name, "c": c, "kernel": kernel.to_dict(), "peak_site": peak_site,
              "peak_mass": peak_mass, "peak_rate": float(env[peak_site]), "T": T, "K": K,
              "seed": seed, "avg_from": avg_from}
    return CounterexampleReport(cur, kernel.drift * c, ctl, control.drift * c, times, trace, ctrace, params)


# ------------------------------------------------------ stationary current


@dataclass
class CurrentReport:
    """Time-averaged current on a ring started from a product measure.

    ``raw`` is the bond-averaged current ``sum(z) / (W T)`` per replica.
    ``adjusted`` subtracts the regression on the conserved mass: given the
    mass ``m`` of a replica, its long-run current is close to
    ``f(m / W)``, so ``raw - (m / W - E[m / W]) / Rbar'(beta)`` keeps the mean
    and drops the mass-to-mass spread.  ``bond`` is the current through
    the single bond ``(0, 1)``.
    """

    beta: float
    expected: float
    raw: np.ndarray
    adjusted: np.ndarray
    bond: np.ndarray
    params: dict

    @staticmethod
    def _summary(x: np.ndarray) -> tuple[float, float]:
        return float(x.mean()), float(x.std(ddof=1) / math.sqrt(len(x))) if len(x) > 1 else 0.0

    @property
    def raw_mean(self) -> tuple[float, float]:
        return self._summary(self.raw)

    @property
    def adjusted_mean(self) -> tuple[float, float]:
        return self._summary(self.adjusted)

    @property
    def bond_mean(self) -> tuple[float, float]:
        return self._summary(self.bond)


def _ring_replica(job):
    env, g, kernel, beta, T, stream_seed, init_seed = job
    cfg = sample_product_measure(env, beta, g, rng=np.random.default_rng(init_seed))
    mass = float(cfg.eta.sum())
    tr = CurrentTracker(env.lo)
    res = run(cfg, env, kernel, g, T, HarrisStream(stream_seed), trackers=[tr], boundary="ring")
    return mass, float(res.displacement[0]), float(tr.current[-1])


def stationary_current(env: Environment, g: RateFunction, kernel: JumpKernel, beta: float,
                       T: float, K: int, seed: int = 0, workers: int = 1) -> CurrentReport:
    """Ring run from ``mu_beta``; the expected current is ``drift * beta``."""
    if not 0.0 <= beta < env.c:
        raise ExperimentError(f"beta={beta} must lie in [0, c={env.c})")
    if T <= 0:
        raise ExperimentError("T must be positive")
    W = len(env)
    ratio = beta / env.alpha
    r_prime = np.array([float(np.squeeze(_site_curve(g).rbar_prime(np.array([r])))) for r in ratio])
    # d/dbeta of the mean density over the ring
    slope_rho = float(np.mean(r_prime / env.alpha))
    mean_rho = float(np.mean(_site_curve(g).rbar(ratio)))
    jobs = [(env, g, kernel, beta, T, ss, si) for ss, si in replica_seeds(seed, K)]
    out = np.array(_pmap(_ring_replica, jobs, workers))
    mass, disp, bond = out[:, 0], out[:, 1], out[:, 2]
    raw = disp / (W * T)
    adjusted = raw - kernel.drift * (mass / W - mean_rho) / slope_rho
    params = {"g": g.name, "kernel": kernel.to_dict(), "beta": beta, "T": T, "K": K, "seed": seed,
              "env_hash": env.content_hash(), "W": W}
    return CurrentReport(beta, kernel.drift * beta, raw, adjusted, bond / T, params)
