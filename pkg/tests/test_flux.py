import math

import numpy as np
import pytest

from azrp.env import DisorderLaw
from azrp.flux import (
    FluxError, FluxFunction, build_flux, check_weak_convexity, critical_speed, dilute_flux,
    homogeneous_flux, upper_hull,
)
from azrp.kinetics import JumpKernel
from azrp.measures import RateFunction, mean_density_curve

TASEP = JumpKernel.nearest_neighbor(1.0)
G_HALF = RateFunction((0.0, 0.5, 1.0))


def half_rate_hom_inverse(rho):
    # g = (0, 1/2, 1, 1, ...): R(b) = 2b / (1 - b^2), so b = (sqrt(1 + R^2) - 1) / R
    rho = np.asarray(rho, dtype=float)
    out = np.zeros_like(rho)
    pos = rho > 0
    out[pos] = (np.sqrt(1 + rho[pos] ** 2) - 1) / rho[pos]
    return out


@pytest.fixture(scope="module")
def dilute_mm1():
    return dilute_flux(0.2, RateFunction.mm1(), TASEP)


def test_homogeneous_mm1_value(mm1):
    f = homogeneous_flux(mm1, TASEP, rho_max=3.0)
    assert f(1.0) == pytest.approx(0.5, abs=1e-12)
    assert f(0.0) == 0.0
    rho = np.linspace(0, 3, 301)
    assert np.max(np.abs(f(rho) - rho / (1 + rho))) < 1e-12


def test_two_atom_flux(mm1):
    law = DisorderLaw.iid([(0.5, 0.5), (1.0, 0.5)])
    f = build_flux(mean_density_curve(law, mm1), TASEP, rho_max=3.0)
    assert f(2 / 3) == pytest.approx(0.25, abs=1e-12)
    assert math.isinf(f.rho_c)
    with pytest.raises(FluxError):
        f(3.5)


def test_infinite_rho_c_requires_range(mm1):
    law = DisorderLaw.iid([(0.5, 0.5), (1.0, 0.5)])
    with pytest.raises(FluxError):
        build_flux(mean_density_curve(law, mm1), TASEP)


def test_drift_scales_flux(mm1):
    f = dilute_flux(0.2, mm1, JumpKernel.nearest_neighbor(0.75))
    assert f.plateau == pytest.approx(0.1)
    assert f(0.1) == pytest.approx(0.5 * 0.1 / 1.1, abs=1e-12)


def test_dilute_mm1_closed_form(dilute_mm1):
    f = dilute_mm1
    assert f.rho_c == pytest.approx(0.25, abs=1e-14)
    rho = np.linspace(0, 0.5, 1001)
    assert np.max(np.abs(f(rho) - np.minimum(rho / (1 + rho), 0.2))) < 1e-12
    assert f.rho_max == pytest.approx(0.5)


def test_dilute_c_near_one_is_homogeneous(mm1):
    f = dilute_flux(0.999, mm1, TASEP, rho_max=5.0)
    rho = np.linspace(0, 5, 501)
    assert np.max(np.abs(f(rho) - rho / (1 + rho))) < 1e-12


def test_dilute_limit_consistency():
    c = 0.2
    fd = dilute_flux(c, G_HALF, TASEP)
    rc = 2 * c / (1 - c * c)
    assert fd.rho_c == pytest.approx(rc, rel=1e-12)
    top = rc - 0.05
    law = DisorderLaw.dilute(DisorderLaw.point(c), 1e-3)
    feps = build_flux(mean_density_curve(law, G_HALF), TASEP, rho_max=top)
    rho = np.linspace(0, top, 2001)
    oracle = np.minimum(half_rate_hom_inverse(rho), c)
    assert np.max(np.abs(fd(rho) - oracle)) < 1e-12
    assert np.max(np.abs(feps(rho) - fd(rho))) < 1e-2


def test_dilute_rejects_bad_c(mm1):
    for c in (0.0, 1.0, -0.1):
        with pytest.raises(FluxError):
            dilute_flux(c, mm1, TASEP)


def test_kernel_without_drift_rejected(mm1):
    sym = JumpKernel((-1, 1), (0.5, 0.5))
    with pytest.raises(FluxError):
        dilute_flux(0.2, mm1, sym)


# ---------------------------------------------------------- invariants


def test_table_monotone_and_plateau(dilute_mm1):
    f = dilute_mm1
    assert np.all(np.diff(f.f) >= 0.0)
    beyond = f.rho >= f.rho_c
    assert beyond.any()
    assert np.all(f.f[beyond] == f.plateau)
    assert f.f[0] == 0.0
    assert f.rho[-1] == pytest.approx(2 * f.rho_c)
    assert f.lipschitz == pytest.approx(1.0, rel=1e-3)
    assert f.cfl_speed == pytest.approx(1.1 * f.lipschitz)


def test_two_atom_plateau_table(mm1):
    # c = 0.5 below the support: finite critical density
    law = DisorderLaw.iid([(0.7, 0.5), (1.0, 0.5)])
    f = build_flux(mean_density_curve(law, mm1, c=0.5), TASEP)
    assert math.isfinite(f.rho_c)
    assert np.all(f.f[f.rho >= f.rho_c] == 0.5)


@pytest.mark.parametrize("lo", [0.0, 0.1, 0.2])
def test_envelope_dominates_and_is_concave(dilute_mm1, lo):
    x, env, (hx, hy) = dilute_mm1.envelope(lo, 0.5)
    assert np.all(env >= dilute_mm1(x) - 1e-15)
    assert np.all(np.diff(np.diff(hy) / np.diff(hx)) <= 1e-12)
    grid = np.linspace(lo, 0.5, 1001)
    vals = np.interp(grid, hx, hy)
    assert np.max(np.diff(vals, 2)) <= 1e-10


def test_envelope_of_nonconcave_table():
    rho = np.linspace(0, 1, 2001)
    f = 0.5 * rho + 0.04 * np.sin(12 * rho) + 0.04
    f = np.maximum.accumulate(f - f[0])
    flux = FluxFunction.from_samples(rho, f)
    x, env, (hx, hy) = flux.envelope()
    assert np.all(env >= f - 1e-15)
    grid = np.linspace(0, 1, 1001)
    assert np.max(np.diff(np.interp(grid, hx, hy), 2)) <= 1e-10


def test_upper_hull_small():
    x = np.array([0.0, 1.0, 2.0, 3.0])
    y = np.array([0.0, 2.0, 1.0, 3.0])
    assert upper_hull(x, y).tolist() == [0, 1, 3]


# ------------------------------------------------------------ speeds


def test_critical_speed_dilute_mm1(dilute_mm1):
    assert critical_speed(dilute_mm1, 0.0) == pytest.approx(0.64, abs=1e-9)


def test_critical_speed_linear():
    f = FluxFunction.from_samples([0.0, 0.2, 0.5, 1.0], [0.0, 0.1, 0.25, 0.5])
    for rho in (0.0, 0.3, 0.9):
        assert critical_speed(f, rho) == pytest.approx(0.5, abs=1e-14)


def test_critical_speed_nonconcave_brute_force():
    rho = np.linspace(0, 1, 10_001)
    f = 0.4 * rho + 0.02 * np.sin(15 * rho) ** 2 + 0.1 * rho ** 3
    assert np.all(np.diff(f) >= 0) and np.max(np.diff(f, 2)) > 0
    flux = FluxFunction.from_samples(rho, f)
    for r0 in (0.0, 0.17, 0.4, 0.73):
        r = rho[(rho >= r0) & (rho < 1.0)]
        brute = np.min((f[-1] - flux.interp(r)) / (1.0 - r))
        assert critical_speed(flux, r0) == pytest.approx(brute, abs=1e-6)


def test_critical_speed_nondecreasing(dilute_mm1, mm1):
    law = DisorderLaw.iid([(0.7, 0.5), (1.0, 0.5)])
    fluxes = [dilute_mm1, build_flux(mean_density_curve(law, mm1, c=0.5), TASEP)]
    for f in fluxes:
        grid = np.linspace(0, f.rho_c * 0.999, 200)
        v = np.array([critical_speed(f, r) for r in grid])
        assert np.all(np.diff(v) >= -1e-12)


def test_critical_speed_range(dilute_mm1, mm1):
    with pytest.raises(FluxError):
        critical_speed(dilute_mm1, 0.25)
    with pytest.raises(FluxError):
        critical_speed(dilute_mm1, -0.1)
    f = homogeneous_flux(mm1, TASEP, rho_max=2.0)
    with pytest.raises(FluxError):
        critical_speed(f, 0.0)


# ------------------------------------------------------- export, (H)


def test_csv_metadata(tmp_path, dilute_mm1):
    path = tmp_path / "flux.csv"
    dilute_mm1.to_csv(path)
    head = path.read_text().splitlines()
    meta = {ln[2:].split("=")[0]: ln.split("=", 1)[1] for ln in head if ln.startswith("#")}
    assert float(meta["rho_c"]) == pytest.approx(0.25)
    assert float(meta["v_c(0)"]) == pytest.approx(0.64, abs=1e-9)
    assert "rho,f,envelope" in head
    rows = np.loadtxt(path, delimiter=",", comments="#", skiprows=len(meta) + 1)
    assert np.all(rows[:, 2] >= rows[:, 1] - 1e-15)


def test_weak_convexity_advisory(mm1):
    rep = check_weak_convexity(mean_density_curve(DisorderLaw.deterministic(0.2), mm1, c=0.2))
    assert rep.holds_on_grid and rep.margin > 0
    assert rep.left_derivative == pytest.approx(1 / 0.64)
    assert rep.advisory
