"""Command-line front end.

Every subcommand reads an optional JSON config, fills in defaults, writes
``manifest.json`` plus CSV/JSON outputs into ``OUT/<manifest hash>``, and
can be replayed from that manifest with ``--config manifest.json``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from . import experiments as ex
from .env import DisorderLaw, Environment, build_env
from .flux import build_flux, critical_speed
from .kinetics import CurrentTracker, HarrisStream, JumpKernel, run, write_snapshots_csv, write_tracker_csv
from .measures import RateFunction, mean_density_curve
from .pde import check_supercritical_facts, godunov_solve, riemann_solution, Profile

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

MM1_DILUTE = {"kind": "deterministic", "params": {"c": 0.2}}
NN = {"support": [1], "probs": [1.0]}

DEFAULTS = {
    "flux": {"law": MM1_DILUTE, "g": "mm1", "kernel": NN, "rho_max": None, "n_points": 2048,
             "vc_at": [0.0]},
    "simulate": {"law": {"kind": "iid", "atoms": [[0.5, 0.5], [1.0, 0.5]]}, "env_seed": 0,
                 "window": [0, 255], "g": "mm1", "kernel": NN, "T": 100.0, "boundary": "ring",
                 "init": {"kind": "product", "value": 0.15}, "snapshots": [], "trackers": [0],
                 "replicas": 1},
    "riemann": {"law": MM1_DILUTE, "g": "mm1", "kernel": NN, "lam": 1.0, "rho": 0.0, "t": 1.0,
                "x_range": [-0.5, 1.5], "n_x": 401, "godunov_dx": 1 / 400, "cfl": 0.45},
    "hydro": {"law": {"kind": "dilute", "base": {"kind": "iid", "atoms": [[0.2, 1.0]]}, "epsilon": 0.05},
              "env_seed": 0, "g": "mm1", "kernel": NN, "rho0": {"kind": "riemann", "lam": 1.0, "rho": 0.0},
              "N_list": [200, 800], "t": 1.0, "K": 10, "obs": [-0.5, 1.5], "ref_dx": 1 / 1600,
              "cfl": 0.45},
    "converge": {"law": MM1_DILUTE, "env_seed": 0, "g": "mm1", "kernel": NN,
                 "init": {"kind": "constant", "value": 1}, "T_list": [500.0, 1500.0, 5000.0],
                 "sites": [-2, -1, 0, 1, 2], "K": 200, "M": 20, "noise_reps": 200},
    "localeq": {"law": MM1_DILUTE, "env_seed": 0, "g": "mm1", "kernel": NN,
                "rho0": {"kind": "riemann", "lam": 1.0, "rho": 0.0}, "N": 200, "t": 1.0, "u": 0.3,
                "delta": 0.3, "K": 50, "M": 20, "half_width": 2, "cesaro": [], "n_times": 20},
    "current": {"law": {"kind": "iid", "atoms": [[0.5, 0.5], [1.0, 0.5]]}, "env_seed": 0,
                "window": [0, 255], "g": "mm1", "kernel": NN, "beta": 0.15, "T": 5000.0, "K": 20},
    "demo": {"g": "mm1", "c": 0.2, "kernel": {"support": [1, 2], "probs": [0.5, 0.5]}, "peak_site": -31,
             "peak_mass": 10000, "T": 5000.0, "K": 20, "avg_from": 0.1},
}


class ConfigError(ValueError):
    pass


def _version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "0+unknown"


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True)


def _load_config(path: str | None) -> tuple[dict, dict | None]:
    """Config dict, plus the manifest when ``path`` is one."""
    if path is None:
        return {}, None
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    if {"command", "config", "seed"} <= data.keys():
        return dict(data["config"]), data
    return data, None


def resolve(command: str, user: dict) -> dict:
    unknown = set(user) - set(DEFAULTS[command]) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown keys for {command}: {sorted(unknown)}")
    cfg = json.loads(json.dumps(DEFAULTS[command]))
    cfg.update({k: v for k, v in user.items() if k != "seed"})
    return cfg


def _g(spec) -> RateFunction:
    if isinstance(spec, str):
        return RateFunction.from_name(spec)
    if isinstance(spec, dict) and "values" in spec:
        return RateFunction(tuple(spec["values"]), spec.get("name", "custom"))
    raise ConfigError(f"bad rate function spec {spec!r}")


def _kernel(spec) -> JumpKernel:
    return JumpKernel.from_dict(spec)


def _law(spec) -> DisorderLaw:
    law = DisorderLaw.from_dict(spec)
    if law.support_inf <= 0.0:
        raise ConfigError("c must be positive")
    return law


def _env(cfg: dict, env_file: str | None, window) -> Environment:
    if env_file is not None:
        return Environment.load(env_file)
    return build_env(_law(cfg["law"]), tuple(window), cfg.get("env_seed", 0))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(f"not serialisable: {type(x)}")


def _csv(path: Path, header: list[str], rows) -> None:
    lines = [",".join(header)]
    lines += [",".join(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v) for v in row)
              for row in rows]
    path.write_text("\n".join(lines) + "\n")


def _check_cfl(cfl) -> None:
    if not 0.0 < cfl < 1.0:
        raise ConfigError(f"cfl={cfl} must lie in (0, 1)")


# ------------------------------------------------------------- commands


def cmd_flux(cfg, seed, out: Path, env_file, workers) -> dict:
    g, kernel = _g(cfg["g"]), _kernel(cfg["kernel"])
    if env_file is not None:
        env = Environment.load(env_file)
        curve = mean_density_curve(env, g, c=env.critical_c)
    else:
        curve = mean_density_curve(_law(cfg["law"]), g)
    flux = build_flux(curve, kernel, rho_max=cfg["rho_max"], n_points=cfg["n_points"])
    flux.to_csv(out / "flux.csv")
    curve.to_csv(out / "fugacity.csv")
    vc = {}
    if math.isfinite(flux.rho_c):
        for r in cfg["vc_at"]:
            if not 0.0 <= r < flux.rho_c:
                raise ConfigError(f"v_c needs 0 <= rho < rho_c, got {r}")
            vc[repr(float(r))] = critical_speed(flux, r)
    summary = {"c": flux.c, "rho_c": flux.rho_c, "plateau": flux.plateau, "lipschitz": flux.lipschitz,
               "v_c": vc}
    _write_json(out / "summary.json", summary)
    return summary


def cmd_simulate(cfg, seed, out: Path, env_file, workers) -> dict:
    g, kernel = _g(cfg["g"]), _kernel(cfg["kernel"])
    env = _env(cfg, env_file, cfg["window"])
    init = ex.InitialCondition.from_dict(cfg["init"])
    if init.kind == "product" and init.value > env.c:
        raise ConfigError(f"beta={init.value} exceeds c={env.c}")
    rows = []
    for r, (ss, si) in enumerate(ex.replica_seeds(seed, cfg["replicas"])):
        cfg0 = init.build(env, g, np.random.default_rng(si))
        trackers = [CurrentTracker(int(x)) for x in cfg["trackers"]]
        res = run(cfg0, env, kernel, g, float(cfg["T"]), HarrisStream(ss), trackers=trackers,
                  snapshots=cfg["snapshots"], boundary=cfg["boundary"])
        write_snapshots_csv(out / f"snapshots_r{r}.csv", res.times, res.snapshots, env.lo)
        for j, tr in enumerate(trackers):
            write_tracker_csv(out / f"current_r{r}_x{tr.x0}.csv", tr)
        T = float(cfg["T"])
        rows.append([r, int(cfg0.finite_mass()), int(res.final.finite_mass()), int(res.displacement[0]),
                     res.displacement[0] / (len(env) * T) if T > 0 else 0.0, res.n_events])
    _csv(out / "replicas.csv", ["replica", "mass0", "massT", "displacement", "current", "events"], rows)
    cur = np.array([row[4] for row in rows], dtype=float)
    summary = {"mean_current": float(cur.mean()),
               "stderr": float(cur.std(ddof=1) / math.sqrt(len(cur))) if len(cur) > 1 else 0.0,
               "replicas": len(rows), "env_hash": env.content_hash()}
    _write_json(out / "summary.json", summary)
    return summary


def cmd_riemann(cfg, seed, out: Path, env_file, workers) -> dict:
    g, kernel = _g(cfg["g"]), _kernel(cfg["kernel"])
    _check_cfl(cfg["cfl"])
    lam, rho, t = float(cfg["lam"]), float(cfg["rho"]), float(cfg["t"])
    flux = ex.law_flux(_law(cfg["law"]), g, kernel, max(lam, rho))
    a, b = cfg["x_range"]
    x = np.linspace(a, b, int(cfg["n_x"]))
    exact = riemann_solution(flux, lam, rho, t, x)
    summary = {"rho_c": flux.rho_c, "c": flux.c}
    header, cols = ["x", "riemann"], [x, exact]
    if cfg["godunov_dx"]:
        pad = flux.cfl_speed * t + 0.05
        init = Profile.step(lam, rho, a - pad, b + pad, float(cfg["godunov_dx"]))
        sol = godunov_solve(init, flux, t, float(cfg["cfl"])).profile
        header.append("godunov")
        cols.append(sol.sample(x))
        summary["l1_godunov"] = float(np.sum(np.abs(sol.sample(sol.centers) -
                                                    riemann_solution(flux, lam, rho, t, sol.centers))
                                             * ((sol.centers > a) & (sol.centers < b))) * sol.dx)
    if math.isfinite(flux.rho_c) and lam >= flux.rho_c:
        summary["v_c"] = critical_speed(flux, rho) if rho < flux.rho_c else 0.0
        facts = check_supercritical_facts(flux, lam, rho, t, x)
        summary["facts"] = {"passed": facts.passed}
    _csv(out / "riemann.csv", header, zip(*cols))
    _write_json(out / "summary.json", summary)
    return summary


def cmd_hydro(cfg, seed, out: Path, env_file, workers) -> dict:
    if env_file is not None:
        raise ConfigError("hydro needs a disorder law; the window depends on N")
    _check_cfl(cfg["cfl"])
    g, kernel = _g(cfg["g"]), _kernel(cfg["kernel"])
    rep = ex.hydro_compare(_law(cfg["law"]), g, kernel, ex.DensityProfile.from_dict(cfg["rho0"]),
                           cfg["N_list"], float(cfg["t"]), int(cfg["K"]), seed=seed,
                           obs=tuple(cfg["obs"]), ref_dx=float(cfg["ref_dx"]), cfl=float(cfg["cfl"]),
                           env_seed=int(cfg["env_seed"]), workers=workers)
    _csv(out / "distances.csv", ["N", "block", "K", "l1"],
         [[r["N"], r["block"], r["K"], r["l1"]] for r in rep.rows])
    for prof, ref in zip(rep.profiles, rep.references):
        _csv(out / f"profile_N{prof.N}.csv", ["u", "empirical", "stderr", "reference"],
             zip(prof.positions, prof.values, prof.stderr, ref))
    summary = {"distances": {str(r["N"]): r["l1"] for r in rep.rows}}
    _write_json(out / "summary.json", summary)
    return summary


def cmd_converge(cfg, seed, out: Path, env_file, workers) -> dict:
    g, kernel = _g(cfg["g"]), _kernel(cfg["kernel"])
    source = Environment.load(env_file) if env_file is not None else _law(cfg["law"])
    cc = ex.convergence_to_critical(source, g, kernel, ex.InitialCondition.from_dict(cfg["init"]),
                                    cfg["T_list"], cfg["sites"], int(cfg["K"]), int(cfg["M"]), seed=seed,
                                    noise_reps=int(cfg["noise_reps"]), env_seed=int(cfg["env_seed"]),
                                    workers=workers)
    _csv(out / "distance.csv", ["T", "max_tv", "mean_tv"],
         zip(cc.T_list, cc.distance, cc.per_site.mean(axis=1)))
    _csv(out / "per_site.csv", ["T"] + [f"x{s}" for s in cfg["sites"]],
         [[T, *row] for T, row in zip(cc.T_list, cc.per_site)])
    summary = {"distance": cc.distance, "noise_floor": cc.noise_floor, "noise_q95": cc.noise_q95,
               "rho_c": cc.params["rho_c"]}
    _write_json(out / "summary.json", summary)
    return summary


def cmd_localeq(cfg, seed, out: Path, env_file, workers) -> dict:
    if env_file is not None:
        raise ConfigError("localeq needs a disorder law; the window depends on N")
    g, kernel = _g(cfg["g"]), _kernel(cfg["kernel"])
    law, rho0 = _law(cfg["law"]), ex.DensityProfile.from_dict(cfg["rho0"])
    common = dict(N=int(cfg["N"]), t=float(cfg["t"]), u=float(cfg["u"]), K=int(cfg["K"]), M=int(cfg["M"]),
                  half_width=int(cfg["half_width"]), seed=seed, env_seed=int(cfg["env_seed"]),
                  workers=workers)
    rep = ex.local_eq_stats(law, g, kernel, rho0, delta=float(cfg["delta"]), **common)
    _csv(out / "local_eq.csv", ["site", "empirical", "expected", "gap", "stderr"],
         zip(rep.sites, rep.empirical, rep.expected, rep.gaps, rep.stderr))
    summary = {"x_N": rep.x_N, "hydro_value": rep.hydro_value, "regime": rep.regime, "beta": rep.beta}
    if cfg["cesaro"]:
        ces = ex.cesaro_local_eq(law, g, kernel, rho0, delta_list=cfg["cesaro"], n_times=int(cfg["n_times"]),
                                 **common)
        rows = [[row["delta"], s, e, x, gap, se] for row in ces.rows for s, e, x, gap, se in
                zip(ces.sites, row["empirical"], row["expected"], row["gap"], row["stderr"])]
        _csv(out / "cesaro.csv", ["delta", "site", "empirical", "expected", "gap", "stderr"], rows)
    _write_json(out / "summary.json", summary)
    return summary


def cmd_current(cfg, seed, out: Path, env_file, workers) -> dict:
    g, kernel = _g(cfg["g"]), _kernel(cfg["kernel"])
    env = _env(cfg, env_file, cfg["window"])
    if float(cfg["beta"]) > env.c:
        raise ConfigError(f"beta={cfg['beta']} exceeds c={env.c}")
    rep = ex.stationary_current(env, g, kernel, float(cfg["beta"]), float(cfg["T"]), int(cfg["K"]),
                                seed=seed, workers=workers)
    _csv(out / "replicas.csv", ["replica", "raw", "adjusted", "bond"],
         zip(range(len(rep.raw)), rep.raw, rep.adjusted, rep.bond))
    summary = {"expected": rep.expected, "raw": rep.raw_mean, "adjusted": rep.adjusted_mean,
               "bond": rep.bond_mean}
    _write_json(out / "summary.json", summary)
    return summary


def cmd_demo(cfg, seed, out: Path, env_file, workers) -> dict:
    rep = ex.counterexample_demo(_g(cfg["g"]), float(cfg["c"]), _kernel(cfg["kernel"]), int(cfg["peak_site"]),
                                 int(cfg["peak_mass"]), float(cfg["T"]), int(cfg["K"]), seed=seed,
                                 avg_from=float(cfg["avg_from"]))
    _csv(out / "trace.csv", ["t", "current", "control"], zip(rep.times, rep.trace, rep.control_trace))
    summary = {"current": rep.current, "plateau": rep.plateau, "control_current": rep.control_current,
               "control_plateau": rep.control_plateau, "deficit": rep.deficit,
               "control_reaches": rep.control_reaches}
    _write_json(out / "summary.json", summary)
    return summary


COMMANDS = {"flux": cmd_flux, "simulate": cmd_simulate, "riemann": cmd_riemann, "hydro": cmd_hydro,
            "converge": cmd_converge, "localeq": cmd_localeq, "current": cmd_current, "demo": cmd_demo}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="azrp", description="Disordered zero-range process toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=COMMANDS[name].__name__.replace("cmd_", "") + " run")
        p.add_argument("--config", help="JSON config or an emitted manifest.json")
        p.add_argument("--seed", type=int, help="master seed (u64)")
        p.add_argument("--out", default="runs", help="parent output directory")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--env-file", help="environment JSON (replaces the disorder law)")
    return parser


def make_manifest(command: str, cfg: dict, seed: int, env_file: str | None) -> dict:
    env_ref = None
    if env_file is not None:
        data = Path(env_file).read_bytes()
        env_ref = {"path": str(env_file), "sha256": hashlib.sha256(data).hexdigest()}
    return {"command": command, "config": cfg, "seed": seed, "env_file": env_ref, "version": _version()}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        user, manifest_in = _load_config(args.config)
        if manifest_in is not None and manifest_in["command"] != args.command:
            raise ConfigError(f"manifest is for {manifest_in['command']!r}, not {args.command!r}")
        seed = args.seed if args.seed is not None else int(
            manifest_in["seed"] if manifest_in else user.get("seed", 0))
        if not 0 <= seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if args.workers < 1:
            raise ConfigError("--workers must be positive")
        env_file = args.env_file
        if env_file is None and manifest_in and manifest_in.get("env_file"):
            env_file = manifest_in["env_file"]["path"]
        cfg = resolve(args.command, user)
        manifest = make_manifest(args.command, cfg, seed, env_file)
        digest = hashlib.sha256(_canonical(manifest).encode()).hexdigest()[:16]
        out = Path(args.out) / f"{args.command}-{digest}"
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "manifest.json", manifest)
    except (ValueError, KeyError, TypeError, OSError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        summary = COMMANDS[args.command](cfg, seed, out, env_file, args.workers)
    except ValueError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as err:  # noqa: BLE001
        print(f"runtime error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    print(out)
    print(json.dumps(summary, sort_keys=True, default=_jsonable))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
