"""Event-driven dynamics: kernels, the Harris stream, runs, coupling, interfaces."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import gammaincinv

from . import _engine
from .env import Environment
from .measures import INF, Configuration, RateFunction

BOUNDARIES = {"ring": _engine.RING, "frozen": _engine.FROZEN,
              "open": _engine.OPEN, "strict": _engine.STRICT}


class KineticsError(RuntimeError):
    pass


@dataclass(frozen=True)
class JumpKernel:
    """Finite jump law ``p(z)``; zero-probability displacements are dropped."""

    support: tuple[int, ...]
    probs: tuple[float, ...]

    def __post_init__(self):
        if len(self.support) != len(self.probs) or not self.support:
            raise ValueError("support and probs must be nonempty and of equal length")
        pairs = sorted((int(z), float(p)) for z, p in zip(self.support, self.probs) if p > 0.0)
        if any(p < 0.0 for p in self.probs):
            raise ValueError("negative jump probability")
        if any(z == 0 for z, _ in pairs):
            raise ValueError("a jump of length 0 is not a jump")
        if len({z for z, _ in pairs}) != len(pairs):
            raise ValueError("repeated displacement")
        if abs(sum(p for _, p in pairs) - 1.0) > 1e-12:
            raise ValueError("jump probabilities must sum to 1")
        object.__setattr__(self, "support", tuple(z for z, _ in pairs))
        object.__setattr__(self, "probs", tuple(p for _, p in pairs))

    @classmethod
    def nearest_neighbor(cls, p: float = 1.0) -> "JumpKernel":
        if not 0.5 < p <= 1.0:
            raise ValueError("nearest-neighbour kernels need p in (1/2, 1]")
        return cls((-1, 1), (1.0 - p, p))

    @classmethod
    def from_dict(cls, d) -> "JumpKernel":
        if "p" in d:
            return cls.nearest_neighbor(float(d["p"]))
        return cls(tuple(d["support"]), tuple(d["probs"]))

    def to_dict(self) -> dict:
        return {"support": list(self.support), "probs": list(self.probs)}

    @property
    def drift(self) -> float:
        return float(sum(z * p for z, p in zip(self.support, self.probs)))

    @property
    def max_jump(self) -> int:
        return max(abs(z) for z in self.support)

    @property
    def is_nearest_neighbor(self) -> bool:
        return all(abs(z) == 1 for z in self.support)

    @property
    def totally_asymmetric(self) -> bool:
        return all(z > 0 for z in self.support)

    @property
    def z(self) -> np.ndarray:
        return np.asarray(self.support, dtype=np.int64)

    @property
    def cdf(self) -> np.ndarray:
        c = np.cumsum(self.probs)
        c[-1] = 1.0
        return c


@dataclass(frozen=True)
class EventBatch:
    t: np.ndarray
    site: np.ndarray
    k: np.ndarray
    u_dir: np.ndarray
    u_acc: np.ndarray

    def __len__(self):
        return len(self.t)


@dataclass(frozen=True)
class HarrisStream:
    """Replayable Poisson event stream keyed by ``seed``.

    Nothing is stored: any event can be regenerated from ``(seed, site, k)``.
    """

    seed: int

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    @property
    def key(self):
        return np.uint64(_engine.seed_key(np.uint64(self.seed)))

    def uniforms(self, site: int, k: int) -> tuple[float, float, float]:
        """``(U_time, u_dir, u_acc)`` of the ``k``-th ring at ``site``."""
        key = self.key
        return tuple(float(_engine.uniform(key, int(site), int(k), lane)) for lane in range(3))

    def clock(self, site: int, rate: float, T: float) -> np.ndarray:
        return _engine.site_clock(self.key, int(site), float(rate), float(T))

    def events(self, env: Environment, T: float, max_events: int = 10_000_000) -> EventBatch:
        """All events on ``env``'s window up to ``T``, merged in time order."""
        out = _engine.harris_events(self.key, np.ascontiguousarray(env.alpha, dtype=float),
                                    env.lo, float(T), int(max_events))
        if len(out[0]) == max_events:
            raise KineticsError("event budget exhausted before T")
        return EventBatch(*out)

    def spawn(self, n: int) -> list["HarrisStream"]:
        """Independent child streams (for uncoupled replicas)."""
        ss = np.random.SeedSequence(int(self.seed))
        return [HarrisStream(int(c.generate_state(1, dtype=np.uint64)[0])) for c in ss.spawn(n)]


@dataclass
class CurrentTracker:
    """Observer at ``x0 + floor(v t)`` counting net rightward crossings of the bond to its right.

    ``count`` holds jump crossings only; ``swept`` is the mass the observer
    itself passes over (zero for ``v = 0``).  The current is their difference.
    """

    x0: int
    v: float = 0.0
    times: np.ndarray | None = None
    count: np.ndarray | None = None
    swept: np.ndarray | None = None

    def position(self, t):
        return self.x0 + np.floor(self.v * np.asarray(t)).astype(np.int64)

    @property
    def current(self) -> np.ndarray:
        return self.count - self.swept


@dataclass
class RunResult:
    final: Configuration | list[Configuration]
    times: np.ndarray
    snapshots: np.ndarray
    lo: int
    trackers: list[CurrentTracker]
    displacement: np.ndarray
    n_events: int
    n_moves: int
    engine: str
    violations: int = 0
    first_violation: int = -1
    record: dict | None = None

    def snapshot(self, s: int, replica: int = 0) -> Configuration:
        snap = self.snapshots[s]
        row = snap if snap.ndim == 1 else snap[replica]
        return Configuration(self.lo, row.copy())

    def trajectory(self, replica: int = 0) -> list[Configuration]:
        return [self.snapshot(s, replica) for s in range(len(self.times))]


def _prepare(env: Environment, configs: Sequence[Configuration]):
    for c in configs:
        if c.window != env.window:
            raise KineticsError(f"configuration window {c.window} differs from env {env.window}")
    return np.ascontiguousarray(env.alpha, dtype=np.float64)


def _pinned(W: int, kernel: JumpKernel, boundary: str) -> np.ndarray:
    pinned = np.zeros(W, dtype=np.bool_)
    if boundary == "frozen":
        m = kernel.max_jump
        if 2 * m >= W:
            raise KineticsError("window too small for frozen boundary cells")
        pinned[:m] = True
        pinned[-m:] = True
    return pinned


def _snap_times(T: float, snapshots: Iterable[float]) -> np.ndarray:
    times = np.asarray(sorted(float(s) for s in snapshots), dtype=float)
    if times.size and (times[0] < 0.0 or times[-1] > T):
        raise KineticsError("snapshot times must lie in [0, T]")
    if not times.size or times[-1] != T:
        times = np.append(times, T)
    return times


def causal_stop_times(env: Environment, first_observed: int, T: float, kernel: JumpKernel,
                      eps: float = 1e-15) -> np.ndarray:
    """Per-site horizons outside which events cannot reach ``[first_observed, ...]`` by ``T``.

    For a totally asymmetric kernel influence travels right only through
    chains of clock rings, each advancing at most ``max_jump`` sites.  A site
    ``d`` sites upstream can matter at time ``s`` only if ``ceil(d/J)`` rings
    of rate at most ``alpha_max`` fit in ``[s, T]``; horizons are chosen so
    this has probability below ``eps``.
    """
    if not kernel.totally_asymmetric:
        raise KineticsError("causal pruning needs a totally asymmetric kernel")
    amax = float(np.max(env.alpha))
    d = first_observed - env.sites
    steps = np.ceil(np.maximum(d, 0) / kernel.max_jump)
    tau = np.zeros(len(d))
    far = steps > 0
    tau[far] = gammaincinv(steps[far], eps) / amax
    return np.maximum(T - tau, 0.0)


def run(config: Configuration, env: Environment, kernel: JumpKernel, g: RateFunction, T: float,
        stream: HarrisStream, trackers: Sequence[CurrentTracker] = (), snapshots=(),
        boundary: str = "frozen", engine: str = "auto", stop_times: np.ndarray | None = None,
        record_events: int = 0) -> RunResult:
    """Evolve ``config`` on ``env`` to time ``T`` using ``stream``.

    ``boundary`` is one of ``ring``, ``frozen`` (outermost ``max_jump`` cells
    keep their occupancy, emit, and absorb arrivals), ``open`` (right end
    absorbs, left end blocks) or ``strict`` (leaving the window is an error).
    ``engine='sweep'`` needs a totally asymmetric kernel, a non-ring
    boundary and fixed trackers; ``auto`` picks it when possible.
    ``stop_times`` (sweep only) gives per-site horizons, see
    :func:`causal_stop_times`.
    """
    if T < 0:
        raise KineticsError("T must be nonnegative")
    if boundary not in BOUNDARIES:
        raise KineticsError(f"unknown boundary policy {boundary!r}")
    alpha = _prepare(env, [config])
    W = len(env)
    trackers = list(trackers)
    sweepable = (kernel.totally_asymmetric and boundary != "ring" and record_events == 0
                 and all(tr.v == 0 for tr in trackers))
    if engine == "auto":
        engine = "sweep" if sweepable else "heap"
    if engine == "sweep" and not sweepable:
        raise KineticsError("sweep engine needs a totally asymmetric kernel, non-ring boundary, fixed trackers")
    if stop_times is not None and engine != "sweep":
        raise KineticsError("stop_times require the sweep engine")
    times = _snap_times(T, snapshots)
    policy = BOUNDARIES[boundary]
    pinned = _pinned(W, kernel, boundary)
    gtab = g.table
    x0 = np.array([tr.x0 - env.lo for tr in trackers], dtype=np.int64)
    if engine == "sweep":
        stop = np.full(W, float(T)) if stop_times is None else np.minimum(
            np.asarray(stop_times, dtype=float), T)
        amax = float(alpha.max()) if W else 0.0
        cap = int(amax * T + 12.0 * math.sqrt(amax * T + 1.0) + 64)
        while True:
            status, snaps, counts, disp, n_ev, n_mv = _engine.run_sweep(
                config.eta.copy(), alpha, env.lo, gtab, kernel.z, kernel.cdf, stream.key,
                stop, policy, pinned, x0, times, cap)
            if status != _engine.BUFFER_FULL:
                break
            cap *= 2
        if status == _engine.OUT_OF_WINDOW:
            raise KineticsError("a jump left the window under the strict boundary policy")
        for j, tr in enumerate(trackers):
            tr.times = times
            tr.count = counts[:, j].copy()
            tr.swept = np.zeros_like(tr.count)
        return RunResult(Configuration(env.lo, snaps[-1].copy()), times, snaps, env.lo, trackers,
                         np.array([disp]), n_ev, n_mv, "sweep")
    res = _run_heap(config.eta[None, :].copy(), alpha, env.lo, gtab, kernel,
                    stream, T, policy, pinned, trackers, times, 0, record_events)
    res.final = res.final[0]
    res.snapshots = res.snapshots[:, 0, :]
    for tr in trackers:
        tr.count = tr.count[:, 0]
        tr.swept = tr.swept[:, 0]
    return res


def _run_heap(eta, alpha, lo, gtab, kernel, stream, T, policy, pinned, trackers, times,
              checks, record_events) -> RunResult:
    x0 = np.array([tr.x0 - lo for tr in trackers], dtype=np.int64)
    vel = np.array([tr.v for tr in trackers], dtype=float)
    (status, snaps, counts, swept, disp, n_ev, n_mv, viol, first,
     rec_t, rec_x, rec_z, rec_acc) = _engine.run_heap(
        eta, alpha, lo, gtab, kernel.z, kernel.cdf, stream.key, float(T), policy, pinned,
        x0, vel, times, checks, int(record_events))
    if status == _engine.OUT_OF_WINDOW:
        raise KineticsError("a jump left the window under the strict boundary policy")
    for j, tr in enumerate(trackers):
        tr.times = times
        tr.count = counts[:, j, :].copy()
        tr.swept = swept[:, j, :].copy()
    record = None
    if record_events:
        record = {"t": rec_t, "site": rec_x, "z": rec_z, "accepted": rec_acc,
                  "complete": status != _engine.RECORD_FULL}
    finals = [Configuration(lo, row.copy()) for row in snaps[-1]]
    return RunResult(finals, times, snaps, lo, list(trackers), disp, n_ev, n_mv, "heap",
                     viol, first, record)


@dataclass
class CoupledRun:
    result: RunResult
    violations: int
    first_violation: int

    @property
    def finals(self) -> list[Configuration]:
        return self.result.final

    def trajectory(self, replica: int) -> list[Configuration]:
        return self.result.trajectory(replica)

    @property
    def snapshots(self) -> np.ndarray:
        """Array of shape (snapshots, replicas, sites)."""
        return self.result.snapshots


def couple_run(configs: Sequence[Configuration], env: Environment, kernel: JumpKernel,
               g: RateFunction, T: float, stream: HarrisStream, snapshots=(),
               boundary: str = "frozen", trackers: Sequence[CurrentTracker] = (),
               check_order: bool = False, check_interface: bool = False,
               check_mass: bool = False) -> CoupledRun:
    """Evolve several configurations with one shared event stream.

    The ``check_*`` flags test the corresponding property after every event:
    order between consecutive replicas, the interface of replicas 0 and 1,
    and conservation of each replica's finite mass.
    """
    if not configs:
        raise KineticsError("no configurations given")
    if T < 0:
        raise KineticsError("T must be nonnegative")
    alpha = _prepare(env, configs)
    eta = np.stack([c.eta for c in configs])
    checks = ((_engine.CHECK_ORDER if check_order else 0)
              | (_engine.CHECK_INTERFACE if check_interface else 0)
              | (_engine.CHECK_MASS if check_mass else 0))
    times = _snap_times(T, snapshots)
    res = _run_heap(eta, alpha, env.lo, g.table, kernel, stream, T, BOUNDARIES[boundary],
                    _pinned(len(env), kernel, boundary), list(trackers), times, checks, 0)
    return CoupledRun(res, res.violations, res.first_violation)


# ----------------------------------------------------------- interfaces


@dataclass(frozen=True)
class InterfaceStatus:
    crossing_point: int | None
    well_formed: bool


def interface_status(eta: Configuration, xi: Configuration) -> InterfaceStatus:
    """Smallest ``x0`` with ``eta <= xi`` on ``(-inf, x0]`` and ``eta >= xi`` beyond.

    ``x0 = lo - 1`` means ``eta >= xi`` on the whole window.
    """
    if eta.window != xi.window:
        raise KineticsError("configurations live on different windows")
    below = np.flatnonzero(eta.eta < xi.eta)
    above = np.flatnonzero(eta.eta > xi.eta)
    if below.size and above.size and above[0] < below[-1]:
        return InterfaceStatus(None, False)
    if below.size:
        return InterfaceStatus(eta.lo + int(below[-1]), True)
    if above.size and above[0] == 0:
        return InterfaceStatus(eta.lo - 1, True)
    return InterfaceStatus(eta.lo, True)


def make_source_config(window, x_src: int, right_fill=None) -> Configuration:
    """``INF`` on ``[lo, x_src]``; to the right either nothing, a constant density
    laid out deterministically, an occupancy array, or a sampled configuration."""
    if isinstance(window, Environment):
        window = window.window
    lo, hi = int(window[0]), int(window[1])
    if not lo <= x_src <= hi:
        raise KineticsError("source site outside the window")
    eta = np.zeros(hi - lo + 1, dtype=np.int64)
    eta[: x_src - lo + 1] = INF
    m = hi - x_src
    if m == 0 or right_fill is None:
        return Configuration(lo, eta)
    if isinstance(right_fill, Configuration):
        if right_fill.window != (lo, hi):
            raise KineticsError("fill configuration has a different window")
        eta[x_src - lo + 1:] = right_fill.eta[x_src - lo + 1:]
    elif np.isscalar(right_fill):
        eta[x_src - lo + 1:] = deterministic_filling(float(right_fill), m)
    else:
        fill = np.asarray(right_fill, dtype=np.int64)
        if fill.shape != (m,):
            raise KineticsError(f"expected {m} occupancies right of the source")
        eta[x_src - lo + 1:] = fill
    return Configuration(lo, eta)


def deterministic_filling(rho: float, m: int, offset: int = 0) -> np.ndarray:
    """Occupancies ``floor(rho (j+1)) - floor(rho j)`` for ``j = offset .. offset+m-1``."""
    if rho < 0:
        raise ValueError("negative density")
    j = np.arange(offset, offset + m + 1, dtype=np.float64)
    cum = np.floor(rho * j).astype(np.int64)
    return np.diff(cum)


# ---------------------------------------------------------------- TASEP


@dataclass(frozen=True)
class TasepView:
    positions: np.ndarray
    gaps: np.ndarray


def tasep_view(config: Configuration, anchor: int = 0) -> TasepView:
    """Car positions ``x_0 = anchor``, ``x_n = x_{n-1} + eta(n) + 1`` over the window."""
    if config.has_inf:
        raise KineticsError("infinite occupancy has no exclusion-process picture")
    pos = np.empty(len(config) + 1, dtype=np.int64)
    pos[0] = anchor
    pos[1:] = anchor + np.cumsum(config.eta + 1)
    return TasepView(pos, config.eta.copy())


def from_tasep(positions: Sequence[int], lo: int) -> Configuration:
    gaps = np.diff(np.asarray(positions, dtype=np.int64)) - 1
    if np.any(gaps < 0):
        raise KineticsError("car positions must be strictly increasing")
    return Configuration(lo, gaps)


# ---------------------------------------------------------------- output


def _fmt(n) -> str:
    return "INF" if n == INF else str(int(n))


def write_snapshots_csv(path, times, snapshots, lo: int) -> None:
    """Rows ``t,site,occupancy``; infinite sites are written as ``INF``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "site", "occupancy"])
        for t, row in zip(times, snapshots):
            for i, n in enumerate(row):
                w.writerow([repr(float(t)), lo + i, _fmt(n)])


def read_snapshots_csv(path) -> tuple[np.ndarray, np.ndarray, int]:
    rows = list(csv.DictReader(open(path)))
    times = sorted({float(r["t"]) for r in rows})
    sites = sorted({int(r["site"]) for r in rows})
    lo = sites[0]
    out = np.zeros((len(times), len(sites)), dtype=np.int64)
    tix = {t: i for i, t in enumerate(times)}
    for r in rows:
        v = r["occupancy"]
        out[tix[float(r["t"])], int(r["site"]) - lo] = INF if v == "INF" else int(v)
    return np.array(times), out, lo


def write_tracker_csv(path, tracker: CurrentTracker, replica: int | None = None) -> None:
    count = tracker.count if replica is None else tracker.count[:, replica]
    swept = tracker.swept if replica is None else tracker.swept[:, replica]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "path_position", "count"])
        for t, c, s in zip(tracker.times, count, swept):
            w.writerow([repr(float(t)), int(tracker.position(t)), int(c - s)])
