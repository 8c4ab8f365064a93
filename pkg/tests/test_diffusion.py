import numpy as np
import pytest

from distdpo.diffusion import (DiffusionError, NoisySample, SampleConfig, build_schedule,
                               init_noisy, noise_point_cloud, reverse_step, sample,
                               step_coefficients, strided_steps)
from distdpo.pointcloud import replicate_scan

# independent high-precision value of prod(1 - beta_t) for the linear 1e-4..2e-2 schedule
ALPHA_BAR_50 = 0.60295159732971490345


@pytest.fixture(scope="module")
def sched():
    return build_schedule(50)


def test_alpha_bar_terminal(sched):
    assert sched.alpha_bar[50] == pytest.approx(ALPHA_BAR_50, rel=1e-14)
    assert sched.alpha_bar[0] == 1.0


def test_schedule_monotone(sched):
    assert np.all(np.diff(sched.alpha_bar) < 0)
    assert np.all(sched.beta[1:] > 0)


@pytest.mark.parametrize("T", [0, -3, 2.5])
def test_schedule_rejects_T(T):
    with pytest.raises(DiffusionError):
        build_schedule(T)


def test_noise_t_zero_eps_zero(sched):
    g0 = np.random.default_rng(0).normal(size=(10, 3))
    out = noise_point_cloud(g0, 7, np.zeros_like(g0), sched)
    np.testing.assert_array_equal(out.cloud, g0)
    with pytest.raises(DiffusionError):
        noise_point_cloud(g0, 0, np.zeros_like(g0), sched)
    with pytest.raises(DiffusionError):
        noise_point_cloud(g0, 51, np.zeros_like(g0), sched)


def test_forward_marginal_variance(sched):
    rng = np.random.default_rng(4)
    g0 = rng.uniform(-1, 1, size=(10000, 3))
    for t in (1, 10, 25, 50):
        x = noise_point_cloud(g0, t, rng.standard_normal(g0.shape), sched).cloud
        var = np.var(x - g0)
        assert abs(var / (1 - sched.alpha_bar[t]) - 1) < 0.05


def test_init_lambda_one_matches_forward(sched):
    p = replicate_scan(np.random.default_rng(1).normal(size=(5, 3)), 4)
    eps = np.random.default_rng(2).standard_normal(p.shape)
    a = init_noisy(p, sched, 1.0, eps=eps).cloud
    b = noise_point_cloud(p, 50, eps, sched).cloud
    assert a.tobytes() == b.tobytes()
    c = init_noisy(p, sched, 1.0, seed=9).cloud
    d = noise_point_cloud(p, 50, np.random.default_rng(9).standard_normal(p.shape), sched).cloud
    assert c.tobytes() == d.tobytes()


def test_init_lambda_scales_deviation(sched):
    p = np.zeros((6, 3))
    eps = np.random.default_rng(3).standard_normal(p.shape)
    a = init_noisy(p, sched, 1.0, eps=eps).cloud
    b = init_noisy(p, sched, 1.5, eps=eps).cloud
    np.testing.assert_allclose(b, 1.5 * a, rtol=1e-15)
    with pytest.raises(DiffusionError):
        init_noisy(p, sched, 0.9, eps=eps)


@pytest.mark.parametrize("variant", ["ddpm", "local-consistent"])
def test_reverse_step_t1_oracle_recovers(sched, variant):
    rng = np.random.default_rng(5)
    g0 = rng.normal(size=(20, 3))
    eps = rng.standard_normal(g0.shape)
    g1 = noise_point_cloud(g0, 1, eps, sched)
    out = reverse_step(g1, eps, sched, variant)
    if variant == "local-consistent":
        np.testing.assert_allclose(out, g0, atol=1e-12)
    else:
        # the textbook update rescales the signal by 1/sqrt(alpha_1)
        np.testing.assert_allclose(out, g0 / np.sqrt(sched.alpha[1]), atol=1e-12)


@pytest.mark.parametrize("steps", [[50], [25, 50], list(range(1, 51)), [7, 19, 33, 50]])
def test_local_consistent_inverts_forward(sched, steps):
    rng = np.random.default_rng(6)
    scan = rng.normal(size=(12, 3))
    g0 = rng.normal(size=(48, 3))
    eps = rng.standard_normal(g0.shape)
    x = noise_point_cloud(g0, 50, eps, sched).cloud
    # oracle model: the exact noise that maps g0 to the current state
    def oracle(g_t, t):
        return (g_t - g0) / sched.noise_scale(t)
    cfg = SampleConfig(K=4, steps=tuple(steps))
    out = sample(oracle, scan, sched, cfg, eps_T=(x - replicate_scan(scan, 4)) / sched.noise_scale(50))
    assert np.max(np.abs(out - g0)) <= 1e-10


def test_stochastic_marginal_variance(sched):
    # with the true noise, a stochastic step keeps the marginal at t_prev
    rng = np.random.default_rng(8)
    g0 = np.zeros((20000, 3))
    eps = rng.standard_normal(g0.shape)
    g = noise_point_cloud(g0, 40, eps, sched)
    out = reverse_step(g, eps, sched, "local-consistent", seed=1, t_prev=20)
    assert abs(np.var(out) / (1 - sched.alpha_bar[20]) - 1) < 0.05


def test_step_coefficients_validation(sched):
    with pytest.raises(DiffusionError):
        step_coefficients(sched, 5, 5, "local-consistent")
    with pytest.raises(DiffusionError):
        step_coefficients(sched, 5, 4, "nope")
    assert step_coefficients(sched, 5, 0, "ddpm")[2] == 0.0


def test_reverse_step_below_zero(sched):
    with pytest.raises(DiffusionError):
        reverse_step(NoisySample(np.zeros((1, 3)), 0, np.zeros((1, 3))), np.zeros((1, 3)), sched)


@pytest.mark.parametrize("nfe, expected", [(1, [50]), (2, [25, 50]), (5, [10, 20, 30, 40, 50]),
                                           (50, list(range(1, 51)))])
def test_strided_steps(nfe, expected):
    assert strided_steps(50, nfe) == expected


def test_strided_steps_bounds():
    with pytest.raises(DiffusionError):
        strided_steps(50, 0)
    with pytest.raises(DiffusionError):
        strided_steps(50, 51)


def test_sample_counts_model_calls(sched):
    calls = []

    def model(g, t):
        calls.append(t)
        return np.zeros_like(g)

    scan = np.zeros((3, 3))
    out = sample(model, scan, sched, SampleConfig(K=5, steps=(10, 30, 50)), seed=0)
    assert out.shape == (15, 3)
    assert calls == [50, 30, 10]
    with pytest.raises(DiffusionError):
        sample(model, scan, sched, SampleConfig(steps=(10,)))


def test_sample_seed_determinism(sched):
    model = lambda g, t: 0.1 * g
    scan = np.random.default_rng(0).normal(size=(4, 3))
    cfg = SampleConfig(K=2, steps=(25, 50), deterministic=False)
    a = sample(model, scan, sched, cfg, seed=3)
    b = sample(model, scan, sched, cfg, seed=3)
    assert a.tobytes() == b.tobytes()
