import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from metalab import meta
from metalab.errors import NonFinite
from metalab.model import Explicit, LinearAtPoint, linear_point_model, zero_field
from metalab.rng import normal_block, normals, stream_keys
from metalab.sim import HIT, NONFINITE, TIMEOUT, SimConfig, Target, run_batch, run_until_hit, step, strat_correction


def radius_level(x):
    return np.linalg.norm(np.atleast_2d(x), axis=1)


@pytest.fixture(scope="module")
def levels(model_a):
    return meta.level_functions(model_a)


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(dt=0.0)
    with pytest.raises(ValueError):
        SimConfig(t_max=-1.0)
    with pytest.raises(ValueError):
        SimConfig(eps=-0.1)
    with pytest.raises(ValueError):
        SimConfig(scheme="rk4")
    cfg = SimConfig(t_max=5, n_traj=7.0)
    assert isinstance(cfg.t_max, float) and isinstance(cfg.n_traj, int)
    assert cfg.replace(seed=3).seed == 3


def test_correction_of_a_linear_field():
    sigma = 1.7
    model = linear_point_model(a=0.0, sigma=sigma, rho=0.0)
    x = np.array([0.3, -0.2])
    np.testing.assert_allclose(strat_correction(model, x), 0.5 * sigma ** 2 * x, rtol=1e-14)


def test_correction_of_a_constant_field_vanishes():
    base = linear_point_model()
    model = base.with_fields(v=(zero_field(2), Explicit(["1", "0"]), zero_field(2)))
    np.testing.assert_array_equal(strat_correction(model, np.array([0.4, 1.0])), [0.0, 0.0])


def test_correction_includes_the_perturbation():
    model = linear_point_model(a=0.0, sigma=0.0, rho=0.0, perturbation=0.0)
    model = model.with_fields(v_tilde=(zero_field(2), LinearAtPoint(2.0 * np.eye(2), np.zeros(2)), zero_field(2)))
    x = np.array([0.5, 0.25])
    np.testing.assert_allclose(strat_correction(model, x, eps=0.1), 0.5 * 0.01 * 4.0 * x, rtol=1e-14)


def test_noiseless_heun_step_is_the_ode_heun_step():
    a, dt = -0.7, 0.05
    model = linear_point_model(a=a, sigma=1.0)
    x = np.array([[0.3, 0.1]])
    got = step(model, x, dt, np.zeros((1, 2)))
    np.testing.assert_allclose(got, x * (1 + a * dt + (a * dt) ** 2 / 2), rtol=1e-14)
    assert np.max(np.abs(got - x * np.exp(a * dt))) < 10 * dt ** 3


def test_log_radius_increments_are_gaussian():
    a, sigma, dt = -0.5, 1.0, 1e-2
    model = linear_point_model(a=a, sigma=sigma)
    n = 20000
    rng = np.random.default_rng(0)
    X = np.tile([0.2, 0.0], (n, 1))
    dW = rng.normal(size=(n, 2)) * np.sqrt(dt)
    inc = np.log(radius_level(step(model, X, dt, dW)) / 0.2)
    assert abs(inc.mean() - a * dt) < 4 * sigma * np.sqrt(dt / n)
    assert inc.var() == pytest.approx(sigma ** 2 * dt, rel=0.05)
    assert stats.kstest((inc - inc.mean()) / inc.std(), "norm").pvalue > 1e-3


def test_schemes_agree_on_the_mean_radius():
    a, sigma, t = -0.5, 1.0, 1.0
    model = linear_point_model(a=a, sigma=sigma)
    out = {}
    for scheme in ("heun", "euler"):
        cfg = SimConfig(dt=1e-3, t_max=t, n_traj=4000, scheme=scheme, seed=4)
        res = run_batch(model, cfg, np.array([0.2, 0.0]))
        r = radius_level(res.x)
        out[scheme] = (r.mean(), r.std() / np.sqrt(len(r)))
    exact = 0.2 * np.exp((a + sigma ** 2 / 2) * t)
    for mean, se in out.values():
        assert abs(mean - exact) < 3 * se
    (m1, s1), (m2, s2) = out.values()
    assert abs(m1 - m2) < 3 * np.hypot(s1, s2)


def _weak_errors(model, a, sigma, scheme, n_fine, levels, n_paths, seed):
    """Mean of g(X^dt_1) - g(X_1) with g = log |x|^2 along shared Brownian paths.

    Identity and rotation commute, so the exact Stratonovich solution of the
    linear model is ``exp(a t + sigma W1) R(rho W2) x0`` and its radius is
    ``|x0| exp(a t + sigma W1)`` path by path. The logarithm keeps the
    lognormal tails of ``|x|^2`` out of the Monte Carlo error.
    """
    rng = np.random.default_rng(seed)
    dW = rng.normal(size=(n_fine, n_paths, 2)) * np.sqrt(1.0 / n_fine)
    exact = np.log(0.04) + 2 * (a + sigma * dW[:, :, 0].sum(axis=0))
    out = []
    for k in range(levels):
        m = 2 ** k
        X = np.tile([0.2, 0.0], (n_paths, 1))
        for s in range(n_fine // m):
            X = step(model, X, m / n_fine, dW[s * m:(s + 1) * m].sum(axis=0), scheme)
        out.append(np.mean(np.log(np.sum(X * X, axis=1)) - exact))
    return np.array(out)


@pytest.mark.parametrize("scheme", ["euler", "heun"])
def test_weak_error_under_step_halving(scheme):
    a, sigma = -0.3, 0.8
    model = linear_point_model(a=a, sigma=sigma, rho=0.5)
    err = np.abs(_weak_errors(model, a, sigma, scheme, 64, 4, 20000, seed=2))
    ratios = err[1:] / err[:-1]  # error at 2 dt over error at dt
    assert np.all((ratios > 1.6) & (ratios < 2.6))


def test_noiseless_hit_time():
    a = -0.5
    model = linear_point_model(a=a, sigma=1.0).with_fields(v=(LinearAtPoint(a * np.eye(2), np.zeros(2)),
                                                               zero_field(2), zero_field(2)))
    target = Target(radius_level, 0.1, 0)
    ev = run_until_hit(model, np.array([0.2, 0.0]), [target], SimConfig(dt=1e-3, t_max=10.0))
    assert ev.outcome == "Hit"
    assert ev.t == pytest.approx(np.log(0.5) / a, abs=1e-4)
    assert radius_level(ev.x)[0] == pytest.approx(0.1, abs=1e-6)


def test_start_on_a_target_is_an_immediate_hit(model_a):
    ev = run_until_hit(model_a, np.array([0.1, 0.0]), [Target(radius_level, 0.1, 0)], SimConfig(t_max=1.0))
    assert ev.outcome == "Hit" and ev.t == 0.0


def test_below_target_counts_starts_inside():
    res = run_batch(linear_point_model(), SimConfig(n_traj=3, t_max=1.0), np.array([0.01, 0.0]),
                    [Target(radius_level, 0.1, 0, mode="below")])
    assert np.all(res.outcome == HIT) and np.all(res.t == 0.0)


def test_two_sided_exit_frequency(model_a, levels):
    cfg = SimConfig(dt=1e-3, t_max=100.0, n_traj=3000, adaptive=True, seed=21)
    targets = [Target(levels[0], 0.1, 0), Target(levels[0], 0.4, 0)]
    res = run_batch(model_a, cfg, np.array([0.2, 0.0]), targets)
    assert np.all(res.outcome == HIT)
    p = np.mean(res.target == 1)
    assert abs(p - 1 / 3) < 3 * np.sqrt(p * (1 - p) / cfg.n_traj)
    assert np.all(res.zeta > 1e-12)


def test_timeouts_are_data(model_a):
    cfg = SimConfig(t_max=0.05, n_traj=10)
    res = run_batch(model_a, cfg, np.array([0.2, 0.0]), [Target(radius_level, 5.0, 0)])
    assert res.n_timeout == 10 and np.all(res.t == 0.05)
    assert all(e.outcome == "Timeout" for e in res.events())


def test_empty_batch(model_a):
    res = run_batch(model_a, SimConfig(n_traj=0), np.zeros((0, 2)))
    assert len(res) == 0 and res.x.shape == (0, 2)


def test_escape_from_the_bounding_box_is_flagged():
    model = linear_point_model(a=5.0, sigma=1.0, confinement=None)
    model = type(model)(model.dim, model.surfaces, model.v, model.v_tilde, None, bbox=2.0)
    res = run_batch(model, SimConfig(dt=1e-2, t_max=50.0, n_traj=5), np.array([0.5, 0.0]))
    assert np.all(res.outcome == NONFINITE)
    with pytest.raises(NonFinite):
        run_until_hit(model, np.array([0.5, 0.0]), [Target(radius_level, 1e9, 0)], SimConfig(dt=1e-2, t_max=50.0))


@pytest.mark.parametrize("workers, chunk", [(1, 4096), (1, 37), (3, 50)])
def test_batches_are_bitwise_reproducible(model_a, levels, tmp_path, workers, chunk):
    base = SimConfig(eps=0.02, dt=1e-3, t_max=20.0, n_traj=150, adaptive=True, seed=8)
    targets = [Target(levels[0], 0.05, 0), Target(levels[0], 0.4, 0)]
    ref = run_batch(model_a, base, np.array([0.2, 0.0]), targets)
    res = run_batch(model_a, base.replace(workers=workers, chunk=chunk), np.array([0.2, 0.0]), targets)
    ref.to_csv(tmp_path / "a.csv")
    res.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_worker_env_override(model_a, monkeypatch):
    from metalab.sim import resolve_workers

    monkeypatch.setenv("METALAB_WORKERS", "4")
    assert resolve_workers(1) == 4
    monkeypatch.delenv("METALAB_WORKERS")
    assert resolve_workers(2) == 2


@given(st.integers(0, 2 ** 63 - 1), st.lists(st.integers(0, 10 ** 6), min_size=2, max_size=20, unique=True))
def test_streams_are_distinct(seed, indices):
    keys = stream_keys(seed, np.array(indices))
    assert len(set(keys.tolist())) == len(indices)


@given(st.integers(0, 2 ** 32), st.integers(0, 1000), st.integers(1, 6))
def test_block_normals_match_single_draws(seed, step_index, count):
    keys = stream_keys(seed, np.arange(5))
    block = normal_block(keys, step_index, 6, count)
    for j in range(count):
        np.testing.assert_array_equal(block[:, j], normals(keys, step_index * 6 + j))


def test_normals_look_standard():
    z = normal_block(stream_keys(1, np.arange(20000)), 0, 2, 2).ravel()
    assert stats.kstest(z, "norm").pvalue > 1e-3
