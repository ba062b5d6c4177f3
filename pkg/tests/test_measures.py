import math

import numpy as np
import pytest

from azrp.env import DisorderLaw, Environment, build_defect_env, build_env, homogeneous_env
from azrp.measures import (INF, Configuration, MeasureError, RateFunction, density_to_fugacity,
                           mean_density_curve, product_marginals, sample_product_measure, sample_theta,
                           sample_theta_array, theta_pmf)


def g_half():
    return RateFunction.from_values([0.0, 0.5, 1.0])


def direct_series(beta, gvals, terms=1000):
    w, logf = [], 0.0
    for n in range(terms):
        if n:
            logf += math.log(gvals[min(n, len(gvals) - 1)])
        w.append(math.exp(n * math.log(beta) - logf) if beta > 0 else float(n == 0))
    Z = sum(w)
    return [x / Z for x in w]


def test_rate_function_validation():
    with pytest.raises(MeasureError):
        RateFunction.from_values([0.0, 0.0, 1.0])
    with pytest.raises(MeasureError):
        RateFunction.from_values([0.0, 0.8, 0.5])
    with pytest.raises(MeasureError):
        RateFunction.from_values([0.1, 0.5, 1.0])
    g = RateFunction.from_values([0.0, 1.0, 2.0], g_inf=2.0)
    assert g(2) == 1.0 and g(1) == 0.5
    assert g(10**6) == 1.0


def test_theta_mm1_geometric(mm1):
    law = theta_pmf(0.5, mm1)
    assert law.pmf[:3] == pytest.approx([0.5, 0.25, 0.125], abs=1e-15)
    assert law.mean == pytest.approx(1.0, abs=1e-12)
    assert abs(law.pmf.sum() - 1.0) <= 1e-12
    assert abs(law.mean - np.arange(len(law.pmf)) @ law.pmf) <= 1e-10


def test_theta_zero_fugacity(mm1):
    law = theta_pmf(0.0, mm1)
    assert list(law.pmf) == [1.0]
    assert law.mean == 0.0


def test_theta_against_direct_series():
    law = theta_pmf(0.4, g_half())
    ref = direct_series(0.4, [0.0, 0.5, 1.0])
    assert law.pmf[:4] * law.Z == pytest.approx([1, 0.8, 0.32, 0.128], rel=1e-12)
    assert law.mean == pytest.approx(sum(n * p for n, p in enumerate(ref)), abs=1e-10)
    assert np.max(np.abs(law.pmf - ref[:len(law.pmf)])) < 1e-14


def test_theta_rejects_beta_at_least_one(mm1):
    with pytest.raises(MeasureError):
        theta_pmf(1.0, mm1)


def test_theta_mass_and_monotonicity_over_grid():
    g = RateFunction.from_values([0.0, 0.3, 0.7, 0.9, 1.0])
    means = []
    for beta in np.linspace(0.0, 0.95, 100):
        law = theta_pmf(beta, g)
        assert abs(law.pmf.sum() - 1.0) <= 1e-12
        means.append(law.mean)
    assert np.all(np.diff(means) >= 0)


def test_theta_stochastic_monotonicity():
    g = RateFunction.from_values([0.0, 0.3, 0.7, 1.0])
    for b1, b2 in [(0.1, 0.2), (0.3, 0.6), (0.5, 0.9)]:
        c1, c2 = theta_pmf(b1, g).cdf(), theta_pmf(b2, g).cdf()
        n = min(len(c1), len(c2))
        assert np.all(c1[:n] >= c2[:n] - 1e-15)


def test_homogeneous_curve_matches_r(mm1):
    curve = mean_density_curve(DisorderLaw.point(1.0), mm1)
    beta = curve.grid
    exact = beta / (1 - beta)
    assert np.max(np.abs(curve.rbar(beta) - exact) / np.maximum(exact, 1e-300)) < 1e-12
    assert curve.rho_c_infinite


def test_two_atom_rbar_and_inverse(mm1):
    curve = mean_density_curve(DisorderLaw.iid([(0.5, 0.5), (1.0, 0.5)]), mm1, c=0.5)
    assert float(curve.rbar(np.array([0.25]))[0]) == pytest.approx(2 / 3, abs=1e-15)
    assert float(density_to_fugacity(curve, 2 / 3)) == pytest.approx(0.25, abs=1e-12)


def test_density_to_fugacity_examples(mm1):
    curve = mean_density_curve(DisorderLaw.point(1.0), mm1)
    assert float(density_to_fugacity(curve, 1.0)) == pytest.approx(0.5, abs=1e-12)
    assert float(density_to_fugacity(curve, 0.0)) == 0.0


def test_round_trip_on_grid():
    g = RateFunction.from_values([0.0, 0.5, 0.8, 1.0])
    curve = mean_density_curve(DisorderLaw.iid([(0.4, 0.3), (0.7, 0.3), (1.0, 0.4)]), g, c=0.3)
    beta = curve.grid[curve.grid < 0.3 * (1 - 1e-9)]
    back = density_to_fugacity(curve, curve.rbar(beta))
    assert np.max(np.abs(back - beta)) <= 1e-8
    assert np.all(np.diff(curve.Rbar) > 0)


def test_inverse_rejects_supercritical(mm1):
    curve = mean_density_curve(DisorderLaw.deterministic(0.2), mm1)
    assert curve.rho_c == pytest.approx(0.25, abs=1e-12)
    with pytest.raises(MeasureError):
        density_to_fugacity(curve, 0.25)


def test_dilute_limit_critical_density(mm1):
    curve = mean_density_curve(DisorderLaw.dilute(DisorderLaw.point(0.2), 0.05), mm1)
    assert curve.rho_c_infinite
    eps_free = mean_density_curve(DisorderLaw.deterministic(0.2), mm1)
    assert eps_free.rho_c == pytest.approx(0.2 / 0.8, abs=1e-12)


def test_rejects_zero_c(mm1):
    with pytest.raises((MeasureError, ValueError)):
        mean_density_curve(DisorderLaw.point(1.0), mm1, c=0.0)


def test_window_average_curve_reports_one_sided_gap(mm1):
    env = build_env(DisorderLaw.iid([(0.5, 0.5), (1.0, 0.5)]), (-200, 200), 1)
    curve = mean_density_curve(env, mm1, c=0.4)
    assert math.isfinite(curve.one_sided_gap)
    beta = np.array([0.1, 0.3])
    direct = np.array([np.mean((b / env.alpha) / (1 - b / env.alpha)) for b in beta])
    assert np.max(np.abs(curve.rbar(beta) - direct)) < 1e-12


def test_sample_zero_fugacity_is_empty(mm1):
    env = homogeneous_env((0, 99))
    assert sample_product_measure(env, 0.0, mm1, seed=1).eta.sum() == 0


def test_sample_homogeneous_mean_three_sigma(mm1):
    env = homogeneous_env((0, 10**5 - 1))
    eta = sample_product_measure(env, 0.5, mm1, seed=7).eta
    sigma = math.sqrt(0.5 / 0.25 / len(eta))  # geometric variance beta/(1-beta)^2
    assert abs(eta.mean() - 1.0) <= 3 * sigma


def test_sample_critical_site_is_inf(mm1):
    env = Environment(-3, 3, np.array([1.0, 0.6, 0.3, 1.0, 0.9, 0.5, 1.0]))
    cfg = sample_product_measure(env, 0.3, mm1, seed=2)
    assert cfg.eta[2] == INF
    assert not np.any(np.delete(cfg.eta, 2) == INF)


def test_sample_rejects_beta_above_c(mm1):
    env = Environment(0, 2, np.array([1.0, 0.5, 1.0]))
    with pytest.raises(MeasureError):
        sample_product_measure(env, 0.6, mm1, seed=0)


def _pooled_z(draws, pmf, n, min_count=20):
    """z-scores of bin frequencies, pooling bins with fewer than ``min_count`` expected hits."""
    keep = np.flatnonzero(pmf * n >= min_count)
    last = keep[-1]
    obs = np.bincount(np.minimum(draws, last + 1), minlength=last + 2)[: last + 2] / n
    exp = np.append(pmf[: last + 1], max(1.0 - pmf[: last + 1].sum(), 0.0))
    sel = exp * n >= min_count
    return (obs[sel] - exp[sel]) / np.sqrt(exp[sel] * (1 - exp[sel]) / n)


def test_sampler_frequencies_four_sigma(rng):
    g = RateFunction.from_values([0.0, 0.4, 0.8, 1.0])
    n = 10**5
    for r in (0.2, 0.7):
        law = theta_pmf(r, g)
        assert np.all(np.abs(_pooled_z(sample_theta(r, g, n, rng), law.pmf, n)) <= 4)
        assert np.all(np.abs(_pooled_z(sample_theta_array(np.full(n, r), g, rng), law.pmf, n)) <= 4)


def test_product_marginals_rows(mm1):
    env = build_defect_env(0.2, (-5, 5))
    marg = product_marginals(env, [-1, 0, 3], 0.2, mm1, 20)
    assert np.allclose(marg.sum(axis=1), 1.0, atol=1e-14)
    r = 0.2 / env[0]
    assert marg[1, :3] == pytest.approx([(1 - r), (1 - r) * r, (1 - r) * r * r], rel=1e-12)
    assert marg[1, -1] == pytest.approx(r**20, rel=1e-10)


def test_configuration_helpers():
    cfg = Configuration(-2, np.array([1, INF, 0, 3]))
    assert cfg.window == (-2, 1)
    assert cfg.has_inf
    assert cfg.finite_mass() == 4
    assert cfg.at(1) == 3
    assert list(cfg.truncated(2)) == [1, 2, 0, 2]
    assert cfg <= Configuration(-2, np.array([1, INF, 1, 3]))
    with pytest.raises(MeasureError):
        Configuration(0, np.array([-1]))
