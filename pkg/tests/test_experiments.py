import math

import numpy as np
import pytest

from azrp.env import DisorderLaw, build_defect_env, build_iid_env, homogeneous_env
from azrp.experiments import (
    DensityProfile, ExperimentError, InitialCondition, MarginalStats, cesaro_local_eq,
    convergence_to_critical, counterexample_demo, critical_density, hydro_compare,
    initial_from_profile, law_flux, local_eq_stats, monotone_transfer_check, replica_seeds,
    stationary_current, truncated_means, tv_noise_floor,
)
from azrp.kinetics import JumpKernel
from azrp.measures import RateFunction, mean_occupancy, product_marginals, sample_product_measure

TASEP = JumpKernel.nearest_neighbor(1.0)
TWO_ATOM = DisorderLaw.iid([(0.5, 0.5), (1.0, 0.5)])
DEFECT = DisorderLaw.deterministic(0.2)


# ------------------------------------------------------------ plumbing


def test_replica_seeds_deterministic_and_distinct():
    a = replica_seeds(7, 50)
    assert a == replica_seeds(7, 50)
    flat = [s for pair in a for s in pair]
    assert len(set(flat)) == len(flat)
    assert replica_seeds(8, 5) != a[:5]


def test_profile_and_initial_dicts_round_trip():
    for p in (DensityProfile.riemann(1.0, 0.0), DensityProfile.constant(0.3)):
        assert DensityProfile.from_dict(p.to_dict()) == p
    assert DensityProfile.from_dict({"kind": "empty"}) == DensityProfile.empty()
    with pytest.raises(ExperimentError):
        DensityProfile.from_dict({"kind": "ramp"})
    for ic in (InitialCondition.constant(2), InitialCondition.density(0.4),
               InitialCondition.product(0.1), InitialCondition.peak(-3, 50), InitialCondition.empty()):
        assert InitialCondition.from_dict(ic.to_dict()) == ic


def test_initial_condition_build(mm1, rng):
    env = homogeneous_env((-5, 4))
    # the pattern is anchored at site 0, so odd sites carry the particles
    assert InitialCondition.density(0.5).build(env, mm1).eta.tolist() == [1, 0] * 5
    assert InitialCondition.peak(-2, 9).build(env, mm1).eta.tolist() == [0, 0, 0, 9] + [0] * 6
    assert InitialCondition.constant(3).build(env, mm1).finite_mass() == 30
    with pytest.raises(ExperimentError):
        InitialCondition.peak(10, 1).build(env, mm1)
    with pytest.raises(ExperimentError):
        InitialCondition("ramp").build(env, mm1)


def test_critical_density_of_defect_env(mm1):
    env = build_defect_env(0.2, (-200, 200))
    assert critical_density(env, mm1) == pytest.approx(0.25, rel=1e-12)
    assert critical_density(DEFECT, mm1) == pytest.approx(0.25, rel=1e-12)
    assert math.isinf(critical_density(TWO_ATOM, mm1))


# ------------------------------------------------------ initial profiles


def test_product_profile_block_means_homogeneous(mm1):
    env = homogeneous_env((0, 199))
    flux = law_flux(DisorderLaw.point(1.0), mm1, TASEP, 0.5)
    rng = np.random.default_rng(0)
    K, B = 100, 10
    draws = np.array([initial_from_profile(env, DensityProfile.constant(0.5), 100, flux, mm1, rng).eta
                      for _ in range(K)])
    blocks = draws.reshape(K, -1, B).mean(axis=2)
    se = blocks.std(axis=0, ddof=1) / math.sqrt(K)
    assert np.all(np.abs(blocks.mean(axis=0) - 0.5) < 4 * se)


def test_product_profile_block_means_quenched(mm1):
    env = build_iid_env(TWO_ATOM, (0, 199), seed=3)
    flux = law_flux(TWO_ATOM, mm1, TASEP, 0.5)
    rng = np.random.default_rng(1)
    K, B = 100, 10
    draws = np.array([initial_from_profile(env, DensityProfile.constant(0.5), 100, flux, mm1, rng).eta
                      for _ in range(K)])
    beta = float(flux.curve.inverse(0.5))
    quenched = mean_occupancy(beta / env.alpha, mm1).reshape(-1, B).mean(axis=1)
    blocks = draws.reshape(K, -1, B).mean(axis=2)
    se = blocks.std(axis=0, ddof=1) / math.sqrt(K)
    assert np.all(np.abs(blocks.mean(axis=0) - quenched) < 4 * se)


def test_supercritical_profile_is_deterministic(mm1):
    env = build_defect_env(0.2, (-40, 40))
    flux = law_flux(DEFECT, mm1, TASEP, 1.0)
    prof = DensityProfile.riemann(1.0, 0.0)
    a = initial_from_profile(env, prof, 20, flux, mm1, np.random.default_rng(0))
    b = initial_from_profile(env, prof, 20, flux, mm1, np.random.default_rng(1))
    assert a == b
    assert np.all(a.eta[env.sites < 0] == 1) and np.all(a.eta[env.sites >= 0] == 0)


# ---------------------------------------------------------- hydrodynamics


def test_hydro_constant_subcritical_homogeneous(mm1):
    rep = hydro_compare(DisorderLaw.point(1.0), mm1, TASEP, DensityProfile.constant(0.5),
                        [400], t=1.0, K=10, seed=2)
    assert rep.distances[0] <= 0.05
    assert rep.profiles[0].inf_blocks == 0
    assert np.allclose(rep.references[0], 0.5)


def test_hydro_empty_is_exactly_zero(mm1):
    rep = hydro_compare(TWO_ATOM, mm1, TASEP, DensityProfile.empty(), [50, 100], t=1.0, K=2)
    assert rep.distances == [0.0, 0.0]


def test_hydro_workers_match_serial(mm1):
    law = DisorderLaw.dilute(DisorderLaw.point(0.2), 0.05)
    prof = DensityProfile.constant(0.1)
    a = hydro_compare(law, mm1, TASEP, prof, [60], t=0.5, K=4, seed=9)
    b = hydro_compare(law, mm1, TASEP, prof, [60], t=0.5, K=4, seed=9, workers=2)
    assert a.distances == b.distances
    assert np.array_equal(a.profiles[0].values, b.profiles[0].values)


def test_hydro_errors(mm1):
    with pytest.raises(ExperimentError):
        hydro_compare(TWO_ATOM, mm1, TASEP, DensityProfile.constant(0.3), [20], t=0.0, K=1)
    law = DisorderLaw.iid([(0.2, 0.1), (1.0, 0.9)])
    with pytest.raises(ExperimentError):
        hydro_compare(law, mm1, TASEP, DensityProfile.constant(0.1), [20], t=1.0, K=1, margin=3)


# ------------------------------------------------------------ TV machinery


def test_marginal_stats_counts_and_merge():
    samples = np.array([[0, 5, 30], [1, 5, 2], [0, 25, 2]])
    st = MarginalStats.from_samples([-1, 0, 1], samples, M=20)
    assert st.K == 3
    assert np.all(st.hist.sum(axis=1) == 3)
    assert st.hist[1, 20] == 1 and st.hist[2, 20] == 1
    both = st.merge(st)
    assert both.K == 6 and np.allclose(both.pmf(), st.pmf())
    with pytest.raises(ExperimentError):
        st.merge(MarginalStats.from_samples([-1, 0, 1], samples, M=10))


def test_tv_estimator_consistency(mm1):
    env = build_iid_env(TWO_ATOM, (-2, 2), seed=0)
    beta, K, M = 0.3, 200, 20
    exact = product_marginals(env, env.sites, beta, g=mm1, M=M)
    rng = np.random.default_rng(4)
    a = np.array([sample_product_measure(env, beta, mm1, rng=rng).eta for _ in range(K)])
    b = np.array([sample_product_measure(env, beta, mm1, rng=rng).eta for _ in range(K)])
    sa = MarginalStats.from_samples(env.sites, a, M)
    sb = MarginalStats.from_samples(env.sites, b, M)
    floor, q95 = tv_noise_floor(exact, K, 400, np.random.default_rng(5))
    assert sa.tv(exact).max() <= q95
    # two-sample distance: calibrate the same way with pairs of exact draws
    crng = np.random.default_rng(6)
    two = [max(0.5 * np.abs(crng.multinomial(K, p) - crng.multinomial(K, p)).sum() / K for p in exact)
           for _ in range(400)]
    assert 0.5 * np.abs(sa.pmf() - sb.pmf()).sum(axis=1).max() <= np.quantile(two, 0.95)
    assert 0 < floor < q95


def test_convergence_stationary_flat(mm1):
    curve = convergence_to_critical(DEFECT, mm1, TASEP, InitialCondition.product(0.2), [1.0, 50.0, 200.0],
                                    range(-2, 3), K=200, seed=3, noise_reps=200)
    assert np.all(curve.distance <= 1.5 * curve.noise_q95)
    assert curve.distance.max() - curve.distance.min() <= curve.noise_q95
    assert curve.params["rho_c"] == pytest.approx(0.25)


def test_convergence_subcritical_stays_away(mm1):
    curve = convergence_to_critical(DEFECT, mm1, TASEP, InitialCondition.density(0.1), [200.0],
                                    range(-2, 3), K=100, seed=1, noise_reps=50)
    assert curve.distance[-1] >= 0.2


def test_convergence_errors(mm1):
    with pytest.raises(ExperimentError):
        convergence_to_critical(TWO_ATOM, mm1, TASEP, InitialCondition.constant(1), [1.0], [0], K=2)
    small = build_defect_env(0.2, (-5, 5))
    with pytest.raises(ExperimentError):
        convergence_to_critical(small, mm1, TASEP, InitialCondition.constant(1), [10.0], [0], K=2)


@pytest.mark.parametrize("kernel", [TASEP, JumpKernel((1, 2), (0.5, 0.5)), JumpKernel.nearest_neighbor(0.8)])
def test_monotone_transfer(mm1, kernel):
    env = build_defect_env(0.2, (-120, 40))
    for seed, eta0 in enumerate([InitialCondition.constant(1), InitialCondition.product(0.15),
                                 InitialCondition.density(0.6)]):
        assert monotone_transfer_check(env, mm1, kernel, eta0, -3, [5.0, 20.0, 60.0],
                                       range(-2, 3), 20, seed)


# ------------------------------------------------------ local equilibrium


def test_truncated_means_match_mean_occupancy(mm1):
    env = build_iid_env(TWO_ATOM, (0, 9), seed=1)
    tm = truncated_means(env, env.sites, 0.3, mm1, M=200)
    assert np.allclose(tm, mean_occupancy(0.3 / env.alpha, mm1), atol=1e-12)


def test_local_eq_stationary_gaps(mm1):
    rep = local_eq_stats(TWO_ATOM, mm1, TASEP, DensityProfile.constant(0.4), N=50, t=1.0, u=0.3,
                         delta=0.1, K=400, seed=11)
    assert rep.regime == "subcritical"
    assert rep.hydro_value == pytest.approx(0.4, abs=1e-12)
    assert np.all(np.abs(rep.z_scores) < 3)


def test_local_eq_supercritical_plateau_targets_critical_measure(mm1):
    rep = local_eq_stats(DEFECT, mm1, TASEP, DensityProfile.riemann(1.0, 0.0), N=100, t=1.0, u=0.3,
                         delta=0.1, K=100, seed=2)
    assert rep.regime == "critical" and rep.beta == pytest.approx(0.2)
    assert rep.hydro_value == pytest.approx(0.25, abs=1e-9)
    env = build_defect_env(0.2, (int(rep.sites[0]), int(rep.sites[-1])))
    r = 0.2 / env.alpha
    # M/M/1 marginals are geometric: E[min(eta, M)] = sum_{k<=M} r^k
    assert np.allclose(rep.expected, r * (1 - r ** 20) / (1 - r), atol=1e-9)


def test_local_eq_rejects_oscillating_point(mm1):
    with pytest.raises(ExperimentError):
        # shock of speed f(0.2) / 0.2 = 5/6
        local_eq_stats(DEFECT, mm1, TASEP, DensityProfile.riemann(0.0, 0.2), N=20, t=1.0, u=5 / 6,
                       delta=0.1, K=2)


def test_cesaro_stationary_consistency(mm1):
    rep = cesaro_local_eq(TWO_ATOM, mm1, TASEP, DensityProfile.constant(0.4), N=50, t=1.0, u=0.3,
                          delta_list=[0.2, 1.0], K=300, seed=4)
    rows = {r["delta"]: r for r in rep.rows}
    inst = rows[0.0]
    for d in (0.2, 1.0):
        r = rows[d]
        assert np.all(np.abs(r["gap"]) < 3 * r["stderr"])
        spread = np.sqrt(r["stderr"] ** 2 + inst["stderr"] ** 2)
        assert np.all(np.abs(r["empirical"] - inst["empirical"]) < 3 * spread)
    with pytest.raises(ExperimentError):
        cesaro_local_eq(TWO_ATOM, mm1, TASEP, DensityProfile.constant(0.4), N=50, t=1.0, u=0.3,
                        delta_list=[1.5], K=2)


# --------------------------------------------------------- counterexample


def test_counterexample_errors(mm1):
    with pytest.raises(ExperimentError):
        counterexample_demo(mm1, kernel=TASEP)
    with pytest.raises(ExperimentError):
        counterexample_demo(mm1, kernel=JumpKernel((-1, 2), (0.3, 0.7)))
    with pytest.raises(ExperimentError):
        counterexample_demo(mm1, peak_site=0)


def test_counterexample_empty_current(mm1):
    rep = counterexample_demo(mm1, peak_mass=0, T=50.0, K=2)
    assert rep.current == 0.0 and rep.control_current == 0.0
    assert np.all(rep.trace == 0.0)


# ------------------------------------------------------ stationary current


def test_stationary_current_errors(mm1):
    env = build_iid_env(TWO_ATOM, (0, 31), seed=0)
    with pytest.raises(ExperimentError):
        stationary_current(env, mm1, TASEP, 0.5, 10.0, 2)
    with pytest.raises(ExperimentError):
        stationary_current(env, mm1, TASEP, 0.1, 0.0, 2)


def test_stationary_current_zero_fugacity(mm1):
    env = build_iid_env(TWO_ATOM, (0, 31), seed=0)
    rep = stationary_current(env, mm1, TASEP, 0.0, 10.0, 3)
    assert np.all(rep.raw == 0.0) and np.all(rep.adjusted == 0.0)
