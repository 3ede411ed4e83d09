import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from metalab import meta
from metalab.errors import AbsorptionFailure
from metalab.expr import Expression
from metalab.schema import parse_model
from metalab.sim import SimConfig
from metalab.spectral import solve_model

from helpers import PAIR_ROOTS, TRIANGLE_ROOTS, shallow_wells


@pytest.fixture(scope="module")
def model_a_solutions(model_a):
    return solve_model(model_a)


@pytest.fixture(scope="module")
def model_b():
    return parse_model("model_b", check=False)[0]


@pytest.fixture(scope="module")
def model_b_sym():
    return parse_model("model_b_sym", check=False)[0]


@pytest.fixture(scope="module")
def model_c():
    return parse_model("model_c", check=False)[0]


# ----------------------------------------------------------------------------
# closed-form oracles


@given(st.floats(-3, 3).filter(lambda g: abs(g) > 1e-3), st.floats(0.01, 0.3), st.floats(1.5, 5), st.floats(0, 1))
def test_power_law_hits_zero_and_one_at_the_ends_and_is_monotone(gamma, k1, ratio, frac):
    k2 = k1 * ratio
    assert meta.exit_probability_law(k1, k1, k2, gamma) == pytest.approx(0.0, abs=1e-12)
    assert meta.exit_probability_law(k2, k1, k2, gamma) == pytest.approx(1.0, abs=1e-12)
    z1 = k1 + frac * (k2 - k1)
    z2 = k1 + min(frac + 0.1, 1.0) * (k2 - k1)
    assert meta.exit_probability_law(z1, k1, k2, gamma) <= meta.exit_probability_law(z2, k1, k2, gamma) + 1e-12


def test_power_law_worked_value():
    # gamma = 1 is linear interpolation: (0.2 - 0.1) / (0.4 - 0.1)
    assert meta.exit_probability_law(0.2, 0.1, 0.4, 1.0) == pytest.approx(1 / 3, rel=1e-14)


def test_radial_exit_probability_tends_to_the_power_law_as_noise_vanishes():
    exact = meta.exit_probability_law(0.2, 0.1, 0.4, 1.0)
    assert meta.radial_exit_probability(0.2, 0.1, 0.4, -0.5, 1.0, noise=1e-7) == pytest.approx(exact, abs=1e-6)


def test_radial_scale_density_annihilates_the_generator():
    a, sigma, c = -0.5, 1.0, 0.01 ** 2

    def s(y):
        return meta.radial_scale_density(y, a, sigma, 0.01)

    for y in (0.003, 0.05, 0.7):
        h = 1e-4 * y
        d1 = (s(y + h) - s(y - h)) / (2 * h)
        # S'' / S' = -2 b / a for the radial generator a/2 f'' + b f'
        lhs = d1 / s(y)
        rhs = -2 * ((a + sigma ** 2 / 2) * y + c / (2 * y)) / (sigma ** 2 * y * y + c)
        assert lhs == pytest.approx(rhs, rel=1e-6)


def test_radial_mean_exit_time_solves_the_poisson_equation():
    a, sigma, noise, kappa = -0.5, 1.0, 0.005, 0.4
    c = noise ** 2

    def T(r):
        return meta.radial_mean_exit_time(r, kappa, a, sigma, noise)

    for r in (0.002, 0.02, 0.2):
        h = 1e-3 * r
        d1 = (T(r + h) - T(r - h)) / (2 * h)
        d2 = (T(r + h) - 2 * T(r) + T(r - h)) / h ** 2
        gen = 0.5 * (sigma ** 2 * r * r + c) * d2 + ((a + sigma ** 2 / 2) * r + c / (2 * r)) * d1
        assert gen == pytest.approx(-1.0, rel=1e-4)
    assert T(kappa) == 0.0


def test_radial_mean_exit_time_noiseless_repelling_limit():
    a = 0.5
    got = meta.radial_mean_exit_time(0.01, 0.4, a, 1.0, 1e-9)
    assert got == pytest.approx(math.log(40) / a, rel=1e-6)
    assert meta.radial_mean_exit_time(0.01, 0.4, a, 1.0, 0.0) == pytest.approx(math.log(40) / a)
    assert meta.radial_mean_exit_time(0.01, 0.4, -a, 1.0, 0.0) == math.inf


def test_gbm_log_moment_matches_quadrature():
    z0, a, s, t = 0.3, -0.2, 0.7, 1.5
    m, sd = math.log(z0) + a * t, s * math.sqrt(t)
    val = integrate.quad(lambda u: math.exp(u) * math.exp(-0.5 * ((u - m) / sd) ** 2) / (sd * math.sqrt(2 * math.pi)),
                         m - 12 * sd, m + 12 * sd)[0]
    assert meta.gbm_log_moment(z0, a, s, t) == pytest.approx(val, rel=1e-10)


# ----------------------------------------------------------------------------
# exit probabilities


def test_exit_prob_start_on_either_target_is_immediate(model_a, model_a_solutions):
    cfg = SimConfig(n_traj=10)
    lo = meta.estimate_exit_prob(model_a, 0, 0.1, 0.1, 0.4, 0.0, cfg, solutions=model_a_solutions)
    hi = meta.estimate_exit_prob(model_a, 0, 0.4, 0.1, 0.4, 0.0, cfg, solutions=model_a_solutions)
    assert (lo.p_hat, lo.stderr, hi.p_hat, hi.stderr) == (0.0, 0.0, 1.0, 0.0)


@pytest.mark.parametrize("zeta,k1,k2,r,eps", [(0.5, 0.1, 0.4, None, 0.0), (0.05, 0.1, 0.4, None, 0.0),
                                              (0.2, 0.1, 5.0, None, 0.0), (0.2, 0.05, 0.4, 10, 0.01),
                                              (0.2, 0.3, 0.1, None, 0.0)])
def test_exit_prob_rejects_bad_geometry(model_a, model_a_solutions, zeta, k1, k2, r, eps):
    with pytest.raises(ValueError):
        meta.estimate_exit_prob(model_a, 0, zeta, k1, k2, eps, SimConfig(n_traj=10), r=r,
                                solutions=model_a_solutions)


def test_exit_prob_agrees_with_the_power_law(model_a, model_a_solutions):
    cfg = SimConfig(dt=1e-3, n_traj=2000, adaptive=True, seed=4, t_max=100)
    est = meta.estimate_exit_prob(model_a, 0, 0.2, 0.1, 0.4, 0.0, cfg, solutions=model_a_solutions)
    assert est.predicted == pytest.approx(1 / 3, abs=1e-6)
    assert est.deviation < 3.0 + 0.01 / est.stderr
    assert est.metadata["seed"] == 4 and est.metadata["n_traj"] == 2000


def test_exit_prob_is_monotone_in_the_start_level(model_a, model_a_solutions):
    cfg = SimConfig(dt=1e-3, n_traj=600, adaptive=True, seed=9, t_max=100)
    ests = [meta.estimate_exit_prob(model_a, 0, z, 0.1, 0.4, 0.0, cfg, solutions=model_a_solutions)
            for z in (0.12, 0.2, 0.3, 0.38)]
    for e1, e2 in zip(ests, ests[1:]):
        assert e2.p_hat >= e1.p_hat - 3 * math.hypot(e1.stderr, e2.stderr)


def test_exit_prob_export_round_trips(tmp_path, model_a, model_a_solutions):
    est = meta.estimate_exit_prob(model_a, 0, 0.1, 0.1, 0.4, 0.0, SimConfig(n_traj=5), solutions=model_a_solutions)
    est.to_json(tmp_path / "e.json")
    import json

    doc = json.loads((tmp_path / "e.json").read_text())
    assert doc["p_hat"] == 0.0 and doc["kappa2"] == 0.4


def test_exit_time_rejects_short_or_unsorted_eps_lists(model_a):
    cfg = SimConfig(n_traj=10)
    with pytest.raises(ValueError):
        meta.estimate_exit_time_scaling(model_a, 0, 0.4, [0.1, 0.05, 0.025], cfg)
    with pytest.raises(ValueError):
        meta.estimate_exit_time_scaling(model_a, 0, 0.4, [0.1, 0.05, 0.06, 0.01], cfg)


def test_weighted_line_recovers_an_exact_line():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    slope, se, icpt, r2 = meta._weighted_line(x, 2.5 * x - 1.0, np.full(4, 0.1))
    assert slope == pytest.approx(2.5) and icpt == pytest.approx(-1.0) and r2 == pytest.approx(1.0)


# ----------------------------------------------------------------------------
# first-entry weights


def test_single_attracting_surface_takes_all_the_weight(model_a):
    est = meta.estimate_p_x(model_a, [0.5, 0.3], 0.0, SimConfig(dt=1e-2, n_traj=50, adaptive=True, t_max=100))
    assert est.weights == [1.0] and est.surfaces == [0]


def test_p_x_needs_an_attracting_surface(model_a_repelling):
    with pytest.raises(ValueError):
        meta.estimate_p_x(model_a_repelling, [0.5, 0.0], 0.0, SimConfig(n_traj=5))


def test_symmetric_wells_split_evenly_on_the_axis(model_b_sym):
    cfg = SimConfig(dt=1e-2, n_traj=600, adaptive=True, seed=21, t_max=60)
    est = meta.estimate_p_x(model_b_sym, [0.0, 0.5], 0.0, cfg)
    assert sum(est.weights) == pytest.approx(1.0)
    assert abs(est.weights[0] - 0.5) <= 3 * math.sqrt(0.25 / est.n_traj)


def test_start_close_to_a_surface_is_attracted_to_it(model_b):
    cfg = SimConfig(dt=1e-2, n_traj=300, adaptive=True, seed=2, t_max=60)
    est = meta.estimate_p_x(model_b, [1.0 + 0.02, 0.0], 0.0, cfg, sensitivity=True)
    # the gamma = 1 point at +1 comes second in decreasing-exponent order
    assert est.surfaces == [0, 1]
    assert est.weights[1] >= 0.95
    assert est.sensitivity is not None and est.sensitivity <= 0.05


# ----------------------------------------------------------------------------
# transition matrix


# fixed steps suffice here: the destinations and the rotation symmetry hold for the scheme itself


def test_two_surfaces_always_swap():
    model = shallow_wells(PAIR_ROOTS)
    cfg = SimConfig(dt=1e-2, n_traj=30, seed=1, t_max=300)
    q = meta.estimate_qmatrix(model, 0.08, 1.0, cfg)
    assert np.array_equal(q.q, np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert np.allclose(q.row_sums(), 1.0) and q.converged and q.drift == 0.0


def test_qmatrix_requires_small_neighbourhoods():
    model = shallow_wells(PAIR_ROOTS)
    with pytest.raises(ValueError):
        meta.estimate_qmatrix(model, 0.5, 1.0, SimConfig(n_traj=5))


def test_qmatrix_needs_two_attracting_surfaces(model_a):
    with pytest.raises(ValueError):
        meta.estimate_qmatrix(model_a, 0.01, 1.0, SimConfig(n_traj=5))


def test_triangle_transitions_are_symmetric(tmp_path):
    model = shallow_wells(TRIANGLE_ROOTS)
    cfg = SimConfig(dt=1e-2, n_traj=300, seed=3, t_max=300)
    q = meta.estimate_qmatrix(model, 0.08, 1.0, cfg, halving=False)
    assert np.allclose(q.row_sums(), 1.0)
    off = ~np.eye(3, dtype=bool)
    assert np.all(np.abs(q.q[off] - 0.5) <= 3 * q.stderr[off])
    q.to_csv(tmp_path / "q.csv")
    assert len((tmp_path / "q.csv").read_text().splitlines()) == 7


# ----------------------------------------------------------------------------
# embedded chain


def test_worked_three_state_example():
    chain = meta.ChainSpec([3.0, 2.0, 1.0], [[0, 0.5, 0.5], [0.5, 0, 0.5], [0.3, 0.7, 0]], [0.2, 0.3, 0.5])
    p = meta.chain_hitting_distribution(chain, 2)
    assert np.allclose(p, [0.35, 0.65], atol=1e-12, rtol=0)


def test_all_states_kept_returns_the_initial_weights():
    chain = meta.ChainSpec([2.0, 1.0], [[0, 1], [1, 0]], [0.4, 0.6])
    assert np.array_equal(meta.chain_hitting_distribution(chain, 2), [0.4, 0.6])
    assert np.allclose(meta.chain_hitting_distribution(chain, 1), [1.0])


def random_chain(rng, m):
    q = rng.random((m, m))
    np.fill_diagonal(q, 0.0)
    q /= q.sum(axis=1, keepdims=True)
    p0 = rng.dirichlet(np.ones(m))
    return meta.ChainSpec(np.arange(m, 0, -1, dtype=float), q, p0)


@pytest.mark.parametrize("seed", range(5))
def test_linear_solve_matches_chain_simulation(seed):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(3, 6))
    chain = random_chain(rng, m)
    l = int(rng.integers(1, m))
    exact = meta.chain_hitting_distribution(chain, l)
    assert exact.sum() == pytest.approx(1.0, abs=1e-12)
    n = 100_000
    sim = meta.simulate_chain(chain, l, n, seed=seed)
    se = np.sqrt(np.clip(exact * (1 - exact), 0, None) / n)
    assert np.all(np.abs(sim - exact) <= 3 * se + 1e-12)


@given(st.integers(2, 6), st.integers(0, 2 ** 32 - 1))
def test_hitting_weights_form_a_distribution(m, seed):
    chain = random_chain(np.random.default_rng(seed), m)
    for l in range(1, m + 1):
        p = meta.chain_hitting_distribution(chain, l)
        assert p.shape == (l,) and np.all(p >= -1e-14) and p.sum() == pytest.approx(1.0, abs=1e-12)


def test_closed_transient_class_is_an_absorption_failure():
    # states 2 and 3 only feed each other, so state 1 is never reached from them
    q = [[0, 0.5, 0.5], [0, 0, 1], [0, 1, 0]]
    chain = meta.ChainSpec([3.0, 2.0, 1.0], q, [0.2, 0.4, 0.4])
    with pytest.raises(AbsorptionFailure):
        meta.chain_hitting_distribution(chain, 1)


@pytest.mark.parametrize("kwargs", [
    dict(gammas=[1.0, 2.0], q=[[0, 1], [1, 0]], p0=[0.5, 0.5]),
    dict(gammas=[2.0, -1.0], q=[[0, 1], [1, 0]], p0=[0.5, 0.5]),
    dict(gammas=[2.0, 1.0], q=[[0, 1], [1, 0]], p0=[0.5, 0.6]),
    dict(gammas=[2.0, 1.0], q=[[0, 1], [1, 0]], p0=[0.5, 0.5, 0.0]),
    dict(gammas=[2.0, 1.0], q=[[0, -1], [1, 0]], p0=[0.5, 0.5]),
])
def test_chain_spec_validation(kwargs):
    with pytest.raises(ValueError):
        meta.ChainSpec(**kwargs)


def test_chain_level_out_of_range():
    chain = meta.ChainSpec([2.0, 1.0], [[0, 1], [1, 0]], [0.4, 0.6])
    for l in (0, 3):
        with pytest.raises(ValueError):
            meta.chain_hitting_distribution(chain, l)


# ----------------------------------------------------------------------------
# histograms and endpoint laws


def hist_from(masses, outside=0.0, removed=0.0):
    masses = np.asarray(masses, float)
    e = np.linspace(0, 1, masses.shape[0] + 1)
    return meta.OccupationHistogram(e, e.copy(), masses, outside, 100, removed)


def _normalized_hist(v):
    v = np.asarray(v) / sum(v)
    return hist_from(v[:9].reshape(3, 3), outside=v[9])


hists = st.lists(st.floats(0, 1), min_size=10, max_size=10).filter(lambda v: sum(v) > 0.1).map(_normalized_hist)


@given(hists, hists, hists)
def test_tv_distance_is_a_metric_bounded_by_one(ha, hb, hc):
    assert meta.tv_distance(ha, ha) == 0.0
    assert meta.tv_distance(ha, hb) == pytest.approx(meta.tv_distance(hb, ha))
    assert 0.0 <= meta.tv_distance(ha, hb) <= 1.0 + 1e-12
    assert meta.tv_distance(ha, hc) <= meta.tv_distance(ha, hb) + meta.tv_distance(hb, hc) + 1e-12


def test_tv_distance_of_disjoint_histograms_is_one():
    assert meta.tv_distance(hist_from([[1, 0], [0, 0]]), hist_from([[0, 0], [0, 1]])) == pytest.approx(1.0)


def test_tv_distance_rejects_different_bins():
    with pytest.raises(ValueError):
        meta.tv_distance(hist_from(np.eye(2) / 2), hist_from(np.eye(3) / 3))


def test_window_times_use_the_midpoint_exponent():
    got = meta.window_times([2.0, 1.0], 0.05)
    assert got == pytest.approx([0.05 ** -1.5, 0.05 ** -0.5])


def test_endpoint_mass_accounting_totals_one(model_b):
    cfg = SimConfig(dt=1e-2, n_traj=400, adaptive=True, seed=8)
    res = meta.metastable_distribution(model_b, [0.3, 0.4], 0.05, 2.0, cfg, bins=10)
    h = res.histogram
    assert h.masses.shape == (10, 10)
    assert h.masses.sum() + h.outside + h.removed == pytest.approx(1.0, abs=1e-12)
    assert h.removed == pytest.approx(sum(res.weights))
    assert res.surfaces == [0, 1] and res.metadata["t_max"] == 2.0


def test_invariant_measure_requires_all_surfaces_repelling(model_a):
    with pytest.raises(ValueError):
        meta.unperturbed_invariant_measure(model_a, SimConfig(n_traj=5, t_max=1.0))


def test_invariant_measure_is_rotation_symmetric_and_avoids_the_surface(model_c):
    cfg = SimConfig(dt=1e-2, n_traj=100, t_max=60.0, seed=13)
    h = meta.unperturbed_invariant_measure(model_c, cfg, burn_in=10.0, every=0.5, bins=16)
    assert h.masses.sum() + h.outside == pytest.approx(1.0)
    near = h.near_surface["surface_0"]
    vals = [near[k] for k in sorted(near, key=float)]
    assert vals == sorted(vals) and vals[1] < 0.01
    # quadrant masses agree under the rotation symmetry
    half = 8
    quads = np.array([h.masses[:half, :half].sum(), h.masses[half:, :half].sum(),
                      h.masses[:half, half:].sum(), h.masses[half:, half:].sum()])
    # samples within a chain are correlated; use the chain count as the effective size
    se = math.sqrt(0.25 * 0.75 / cfg.n_traj)
    assert np.all(np.abs(quads - 0.25) <= 3 * se)


def test_feynman_kac_of_a_constant_is_exact(model_b):
    cfg = SimConfig(dt=1e-2, n_traj=50, adaptive=True, seed=3)
    u = meta.feynman_kac(model_b, Expression(1.0, 2), [0.2, 0.1], 0.05, 1.0, cfg)
    assert u.value == 1.0 and u.stderr == 0.0 and u.n_traj == 50


def test_feynman_kac_matches_the_log_moment_of_model_a(model_a):
    cfg = SimConfig(dt=1e-3, n_traj=4000, seed=17)
    g = Expression("(x**2 + y**2)**0.5", 2)
    u = meta.feynman_kac(model_a, g, [0.5, 0.0], 0.0, 1.0, cfg)
    expected = meta.gbm_log_moment(0.5, -0.5, 1.0, 1.0)
    assert abs(u.value - expected) <= 3 * u.stderr + 0.01
