"""Disorder environments on finite windows of the lattice.

An environment assigns a rate multiplier ``alpha(x)`` in (0, 1] to every site
of an integer window ``[lo, hi]``.  Three families are supported: i.i.d. draws
from a finite-atom law, the dilute mixture of such a law with the value 1, and
deterministic defect sequences that approach the infimum ``c`` along a
zero-density set of sites.
"""
from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

ENV_FORMAT = "azrp-environment"
ENV_VERSION = 1


class EnvError(ValueError):
    """Raised for invalid environment construction or queries."""


def _check_window(window) -> tuple[int, int]:
    lo, hi = int(window[0]), int(window[1])
    if hi < lo:
        raise EnvError(f"empty window [{lo}, {hi}]")
    return lo, hi


@dataclass(frozen=True)
class DisorderLaw:
    """Finite-atom law of a single disorder value.

    Use the constructors :meth:`iid`, :meth:`point`, :meth:`dilute` and
    :meth:`deterministic` rather than the raw fields.
    """

    kind: str
    atoms: tuple[tuple[float, float], ...] = ()
    base: "DisorderLaw | None" = None
    epsilon: float = 0.0
    rule: str = ""
    params: tuple[tuple[str, float], ...] = ()

    def __post_init__(self):
        if self.kind not in ("iid", "dilute", "deterministic"):
            raise EnvError(f"unknown disorder kind {self.kind!r}")
        if self.kind == "iid":
            if not self.atoms:
                raise EnvError("iid law needs at least one atom")
            total = 0.0
            for value, prob in self.atoms:
                if not (0.0 < value <= 1.0):
                    raise EnvError(f"atom value {value} outside (0, 1]")
                if prob < 0.0:
                    raise EnvError(f"negative atom probability {prob}")
                total += prob
            if abs(total - 1.0) > 1e-12:
                raise EnvError(f"atom probabilities sum to {total}, not 1")
        elif self.kind == "dilute":
            if self.base is None or self.base.kind == "deterministic":
                raise EnvError("dilute law needs a finite-atom base law")
            if not (0.0 <= self.epsilon <= 1.0):
                raise EnvError(f"epsilon {self.epsilon} outside [0, 1]")

    @classmethod
    def iid(cls, atoms: Sequence[tuple[float, float]]) -> "DisorderLaw":
        return cls("iid", atoms=tuple((float(a), float(p)) for a, p in atoms))

    @classmethod
    def point(cls, value: float) -> "DisorderLaw":
        return cls.iid([(value, 1.0)])

    @classmethod
    def dilute(cls, base: "DisorderLaw", epsilon: float) -> "DisorderLaw":
        return cls("dilute", base=base, epsilon=float(epsilon))

    @classmethod
    def deterministic(cls, c: float, rule: str = "geometric", **params) -> "DisorderLaw":
        """Defect-sequence environment: value 1 off a zero-density defect set."""
        if not (0.0 < c < 1.0):
            raise EnvError(f"c={c} must lie in (0, 1)")
        items = {"c": float(c)}
        items.update({k: float(v) for k, v in params.items()})
        return cls("deterministic", rule=rule, params=tuple(sorted(items.items())))

    @property
    def param_dict(self) -> dict:
        return dict(self.params)

    def effective_atoms(self) -> tuple[np.ndarray, np.ndarray]:
        """Single-site marginal ``Q_0`` as (values, probabilities), merged and sorted.

        For a deterministic defect environment the defects have zero density,
        so the marginal is the point mass at 1.
        """
        if self.kind == "iid":
            pairs = list(self.atoms)
        elif self.kind == "dilute":
            vals, probs = self.base.effective_atoms()
            pairs = [(1.0, 1.0 - self.epsilon)]
            pairs += [(v, self.epsilon * p) for v, p in zip(vals, probs)]
        else:
            pairs = [(1.0, 1.0)]
        merged: dict[float, float] = {}
        for v, p in pairs:
            if p > 0.0:
                merged[v] = merged.get(v, 0.0) + p
        values = np.array(sorted(merged), dtype=float)
        probs = np.array([merged[v] for v in values], dtype=float)
        return values, probs

    @property
    def support_inf(self) -> float:
        """Infimum ``c`` of the disorder values (the nominal one for defect sequences)."""
        if self.kind == "deterministic":
            return self.param_dict["c"]
        return float(self.effective_atoms()[0][0])

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind}
        if self.kind == "iid":
            out["atoms"] = [list(a) for a in self.atoms]
        elif self.kind == "dilute":
            out["base"] = self.base.to_dict()
            out["epsilon"] = self.epsilon
        else:
            out["rule"] = self.rule
            out["params"] = self.param_dict
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "DisorderLaw":
        kind = d.get("kind")
        if kind == "iid":
            return cls.iid([tuple(a) for a in d["atoms"]])
        if kind == "point":
            return cls.point(d["value"])
        if kind == "dilute":
            return cls.dilute(cls.from_dict(d["base"]), d["epsilon"])
        if kind == "deterministic":
            params = dict(d.get("params", {}))
            c = params.pop("c", d.get("c"))
            if c is None:
                raise EnvError("deterministic law needs c")
            return cls.deterministic(c, d.get("rule", "geometric"), **params)
        raise EnvError(f"unknown disorder kind {kind!r}")


@dataclass(frozen=True, eq=False)
class Environment:
    """Disorder values on the window ``[lo, hi]``.

    ``c`` is always the realised minimum over the window.  ``nominal_c`` keeps
    the infimum the environment was designed for (it may be unrealised in a
    small window); ``critical_c`` is the value used for critical measures.
    """

    lo: int
    hi: int
    alpha: np.ndarray
    defects: tuple[int, ...] = ()
    nominal_c: float | None = None
    label: str = ""
    c: float = field(init=False)

    def __post_init__(self):
        alpha = np.array(self.alpha, dtype=np.float64)
        if alpha.ndim != 1 or len(alpha) != self.hi - self.lo + 1:
            raise EnvError("alpha length does not match window")
        if np.any(~(alpha > 0.0)) or np.any(alpha > 1.0):
            raise EnvError("alpha values must lie in (0, 1]")
        alpha.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "c", float(alpha.min()))
        d = tuple(int(x) for x in self.defects)
        if any(b <= a for a, b in zip(d, d[1:])):
            raise EnvError("defect sites must be strictly increasing")
        object.__setattr__(self, "defects", d)

    @property
    def window(self) -> tuple[int, int]:
        return self.lo, self.hi

    @property
    def origin_offset(self) -> int:
        """Array index of site 0."""
        return -self.lo

    @property
    def sites(self) -> np.ndarray:
        return np.arange(self.lo, self.hi + 1)

    def __len__(self) -> int:
        return self.hi - self.lo + 1

    def index(self, x) -> np.ndarray | int:
        idx = np.asarray(x) - self.lo
        if np.any(idx < 0) or np.any(idx >= len(self)):
            raise EnvError(f"site(s) {x} outside window [{self.lo}, {self.hi}]")
        return int(idx) if np.ndim(idx) == 0 else idx

    def __getitem__(self, x):
        return self.alpha[self.index(x)]

    @property
    def critical_c(self) -> float:
        return self.c if self.nominal_c is None else float(self.nominal_c)

    @property
    def c_unrealized(self) -> bool:
        """True when the nominal infimum is not attained within the window."""
        return self.nominal_c is not None and self.c > self.nominal_c

    @property
    def is_homogeneous(self) -> bool:
        return bool(np.all(self.alpha == 1.0))

    def restrict(self, lo: int, hi: int) -> "Environment":
        lo, hi = _check_window((lo, hi))
        i, j = self.index(lo), self.index(hi)
        return Environment(lo, hi, self.alpha[i:j + 1],
                           tuple(x for x in self.defects if lo <= x <= hi),
                           self.nominal_c, self.label)

    # serialisation -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": ENV_FORMAT,
            "version": ENV_VERSION,
            "window": [self.lo, self.hi],
            "alpha": [float(a) for a in self.alpha],
            "c": self.c,
            "nominal_c": self.nominal_c,
            "defects": list(self.defects),
            "label": self.label,
        }

    def to_json(self) -> str:
        # json writes floats with repr, which round-trips exactly
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: Mapping) -> "Environment":
        if d.get("format") != ENV_FORMAT:
            raise EnvError("not an environment record")
        if int(d.get("version", 0)) != ENV_VERSION:
            raise EnvError(f"unsupported environment version {d.get('version')}")
        lo, hi = d["window"]
        env = cls(int(lo), int(hi), np.array(d["alpha"], dtype=np.float64),
                  tuple(d.get("defects", ())), d.get("nominal_c"), d.get("label", ""))
        if env.c != d["c"]:
            raise EnvError("recorded c does not match the alpha values")
        return env

    @classmethod
    def from_json(cls, text: str) -> "Environment":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "Environment":
        return cls.from_json(Path(path).read_text())

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def __eq__(self, other) -> bool:
        if not isinstance(other, Environment):
            return NotImplemented
        return (self.lo == other.lo and self.hi == other.hi
                and np.array_equal(self.alpha, other.alpha)
                and self.defects == other.defects and self.nominal_c == other.nominal_c)

    __hash__ = None


def homogeneous_env(window) -> Environment:
    lo, hi = _check_window(window)
    return Environment(lo, hi, np.ones(hi - lo + 1), label="homogeneous")


_GOLD = np.uint64(0x9E3779B97F4A7C15)


def _splitmix(z: np.ndarray) -> np.ndarray:
    z = z + _GOLD
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def site_uniforms(seed: int, sites: np.ndarray) -> np.ndarray:
    """One uniform in (0, 1) per site, a function of ``(seed, site)`` only."""
    key = _splitmix(np.array([int(seed) % 2**64], dtype=np.uint64))[0]
    z = key ^ (np.asarray(sites, dtype=np.int64) + (1 << 40)).astype(np.uint64) * _GOLD
    h = _splitmix(_splitmix(z))
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53


def build_iid_env(law: DisorderLaw, window, seed: int) -> Environment:
    """Draw ``alpha(x)`` independently from ``law`` on every site of ``window``.

    Draws are keyed by ``(seed, x)``, so windows of one seed are restrictions
    of a single environment on the whole line.
    """
    lo, hi = _check_window(window)
    if law.kind == "deterministic":
        raise EnvError("build_iid_env needs an iid or dilute law")
    values, probs = law.effective_atoms()
    n = hi - lo + 1
    if len(values) == 1:
        alpha = np.full(n, values[0])
    else:
        cdf = np.cumsum(probs / probs.sum())
        u = site_uniforms(seed, np.arange(lo, hi + 1))
        alpha = values[np.minimum(np.searchsorted(cdf, u, side="right"), len(values) - 1)]
    return Environment(lo, hi, alpha, nominal_c=law.support_inf, label=f"iid:{law.to_dict()}")


def defect_sites(window, spacing_exponent: float = 1.5) -> dict[int, int]:
    """Map defect index ``n`` to site ``x_n = sign(n) floor(|n|**exponent)`` inside ``window``."""
    lo, hi = _check_window(window)
    reach = max(abs(lo), abs(hi))
    nmax = int(math.ceil((reach + 1) ** (1.0 / spacing_exponent))) + 1
    out = {}
    for n in range(-nmax, nmax + 1):
        x = int(math.copysign(math.floor(abs(n) ** spacing_exponent), n)) if n else 0
        if lo <= x <= hi:
            out[n] = x
    return out


def build_defect_env(c: float, window, rates: Callable[[int], float] | Mapping[int, float] | None = None,
                     amplitude: float = 0.6, decay: float = 2.0,
                     spacing_exponent: float = 1.5) -> Environment:
    """Deterministic environment equal to 1 except on a sparse defect sequence.

    By default the defects sit at ``x_n = +-floor(|n|**1.5)`` with rates
    ``c + amplitude * decay**-|n|``.  ``rates`` may instead be a function of the
    defect index ``n`` (same sites) or an explicit ``{site: rate}`` mapping.

    A rule-generated rate must exceed ``c``; explicit mappings may attain it.
    Rates of far-out defects can round to exactly ``c`` in floating point.
    """
    if not (0.0 < c < 1.0):
        raise EnvError(f"c={c} must lie in (0, 1)")
    lo, hi = _check_window(window)
    alpha = np.ones(hi - lo + 1)
    if isinstance(rates, Mapping):
        placed = {int(x): float(a) for x, a in rates.items() if lo <= int(x) <= hi}
        for x, a in placed.items():
            if a < c or a > 1.0:
                raise EnvError(f"defect rate {a} at site {x} outside [c, 1]")
    else:
        if rates is None:
            if amplitude <= 0.0 or c + amplitude > 1.0 or decay <= 1.0:
                raise EnvError("geometric defect rule needs amplitude > 0, c + amplitude <= 1, decay > 1")
            rule = lambda n: c + amplitude * decay ** (-abs(n))  # noqa: E731
        else:
            rule = rates
        placed = {}
        for n, x in defect_sites((lo, hi), spacing_exponent).items():
            a = float(rule(n))
            # the built-in rule is strictly above c; equality there is float rounding
            if a < c or (a == c and rates is not None) or a > 1.0:
                raise EnvError(f"defect rate {a} at n={n} not strictly above c={c}")
            placed[x] = a
    for x, a in placed.items():
        alpha[x - lo] = a
    env = Environment(lo, hi, alpha, tuple(sorted(placed)), nominal_c=float(c), label="defect")
    if not placed:
        warnings.warn(f"no defects inside window [{lo}, {hi}]; nominal c={c} is unrealised",
                      stacklevel=2)
    return env


def build_env(law: DisorderLaw, window, seed: int = 0) -> Environment:
    """Dispatch on the law kind."""
    if law.kind == "deterministic":
        p = law.param_dict
        return build_defect_env(p["c"], window, amplitude=p.get("amplitude", 0.6),
                                decay=p.get("decay", 2.0),
                                spacing_exponent=p.get("spacing_exponent", 1.5))
    return build_iid_env(law, window, seed)


def find_typical_site(env: Environment, u: float, N: int, delta: float) -> int:
    """Site nearest ``floor(u N)`` whose rate is at least ``c + delta``.

    In a homogeneous environment every site qualifies.  Ties between the two
    sides go to the left site.
    """
    if delta <= 0.0:
        raise EnvError("delta must be positive")
    target = int(math.floor(u * N))
    if env.is_homogeneous:
        if not env.lo <= target <= env.hi:
            raise EnvError(f"target site {target} outside window")
        return target
    c = env.critical_c
    if delta >= 1.0 - c:
        raise EnvError(f"delta={delta} >= 1 - c leaves no admissible site")
    ok = np.flatnonzero(env.alpha >= c + delta) + env.lo
    if ok.size == 0:
        raise EnvError("no typical site inside window")
    dist = np.abs(ok - target)
    return int(ok[np.argmin(dist)])  # argmin keeps the first (leftmost) tie
