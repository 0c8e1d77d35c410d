import csv
import json
import math

import numpy as np
import pytest

from odehmc.benchmarks import generate, get_recipe
from odehmc.data import build_pairs, normalize
from odehmc.dynamics import FeatureLibrary, ModelParams, ModelSpec, build_feature_library, normalize_coefficients
from odehmc.forecast import map_estimate, posterior_forecast, predict_trajectory, write_forecast
from odehmc.sampler import HmcConfig, PosteriorSamples


def _chain(rows, lps, keep=None):
    rows = np.asarray(rows, float)
    T = len(rows)
    keep = keep or max(T, 1)
    return PosteriorSamples(rows, np.asarray(lps, float), np.ones(T, bool), np.zeros(T), 0,
                            HmcConfig(total_steps=max(T, 1), keep_last=keep))


def test_map_single_and_increasing():
    assert map_estimate(_chain([[1.0, 0.0, 0.0]], [-3.0])).theta[0] == 1.0
    rows = [[float(i), 0.0, 0.0] for i in range(5)]
    assert map_estimate(_chain(rows, [-5, -4, -3, -2, -1])).theta[0] == 4.0


def test_map_known_argmax_and_ties():
    rows = [[float(i), 0.0, 0.0] for i in range(6)]
    assert map_estimate(_chain(rows, [-5, -1, -3, -1, -9, -2])).theta[0] == 1.0
    # burn-in draws are ignored even when they score higher
    assert map_estimate(_chain(rows, [0, 0, -3, -1, -9, -2], keep=4)).theta[0] == 3.0


def test_map_empty_chain():
    s = _chain(np.zeros((0, 3)), np.zeros(0))
    with pytest.raises(ValueError):
        map_estimate(s)


@pytest.fixture(scope="module", params=[("lotka_volterra", 0.01), ("cubic_oscillator", 0.005)])
def truth_setup(request):
    name, dt = request.param
    r = get_recipe(name)
    clean, noisy = generate(r, 0)
    _, sigma = normalize(build_pairs(noisy, r.dt_target))
    spec = r.fit_spec(sigma)
    theta = normalize_coefficients(spec, r.truth_theta(spec), sigma)
    return spec, ModelParams(theta, 0.0, 4.0), clean, sigma, dt


def test_true_parameters_reproduce_clean_trajectory(truth_setup):
    spec, params, clean, sigma, dt = truth_setup
    p = predict_trajectory(spec, params, clean.states[0], clean.times, sigma, dt_target=dt)
    assert not p.truncated
    np.testing.assert_allclose(p.states, clean.states, atol=1e-6, rtol=0)


def test_single_time_returns_x0():
    spec = ModelSpec(2, build_feature_library(2, 2))
    p = predict_trajectory(spec, ModelParams(np.ones(spec.P)), [0.3, 0.4], [1.5], [2.0, 3.0])
    np.testing.assert_allclose(p.states, [[0.3, 0.4]], rtol=1e-15)


def test_zero_dynamics_constant():
    spec = ModelSpec(2, build_feature_library(2, 2))
    p = predict_trajectory(spec, ModelParams(np.zeros(spec.P)), [0.3, 0.4], np.linspace(0, 5, 11), [2.0, 3.0])
    np.testing.assert_allclose(p.states, np.tile([0.3, 0.4], (11, 1)), rtol=1e-15)


def test_divergence_truncates():
    spec = ModelSpec(1, FeatureLibrary(1, ((3,),)))
    p = predict_trajectory(spec, ModelParams([1.0]), [3.0], np.linspace(0, 5, 6), [1.0])
    assert p.truncated and 0 < p.n_valid < 6
    assert np.all(np.isnan(p.states[p.n_valid:])) and np.all(np.isfinite(p.states[:p.n_valid]))


def test_bad_times():
    spec = ModelSpec(1, FeatureLibrary(1, ((1,),)))
    for t in ([0.0, 0.0], [], [1.0, 0.5]):
        with pytest.raises(ValueError):
            predict_trajectory(spec, ModelParams([1.0]), [1.0], t, [1.0])


def _lv_chain(rng, T=40, spread=0.02):
    r = get_recipe("lotka_volterra")
    clean, noisy = generate(r, 0)
    _, sigma = normalize(build_pairs(noisy, r.dt_target))
    spec = r.fit_spec(sigma)
    theta = normalize_coefficients(spec, r.truth_theta(spec), sigma)
    rows = np.column_stack([theta * (1 + spread * rng.standard_normal((T, spec.P))),
                            np.zeros(T), np.full(T, 3.0) + rng.uniform(0, 1, T)])
    return spec, _chain(rows, -np.arange(T, dtype=float)), clean, sigma


def test_ensemble_moments_match_streaming_oracle(rng):
    spec, s, clean, sigma = _lv_chain(rng)
    t = np.linspace(0, 5, 26)
    ens = posterior_forecast(spec, s, clean.states[0], t, sigma, n_samples=30)
    assert ens.members.shape == (30, 26, 2) and ens.excluded == 0
    # Welford running moments
    mean = np.zeros((26, 2))
    m2 = np.zeros((26, 2))
    for k, x in enumerate(ens.members, start=1):
        d = x - mean
        mean += d / k
        m2 += d * (x - mean)
    np.testing.assert_allclose(ens.mean, mean, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(ens.var, m2 / len(ens.members), rtol=1e-12, atol=1e-12)
    assert np.all(ens.var >= 0)
    # the last 30 retained draws are used
    first = predict_trajectory(spec, s.params(10), clean.states[0], t, sigma)
    np.testing.assert_array_equal(ens.members[0], first.states)


def test_repeated_sample_zero_variance():
    spec = ModelSpec(2, build_feature_library(2, 1))
    row = np.concatenate([np.array([0.0, -0.2, 1.0, 0.0, -1.0, -0.1]), [0.0, 2.0]])
    s = _chain(np.tile(row, (8, 1)), np.zeros(8))
    t = np.linspace(0, 3, 7)
    ens = posterior_forecast(spec, s, [1.0, 0.0], t, [1.0, 1.0])
    assert np.all(ens.var == 0)
    np.testing.assert_array_equal(ens.mean, predict_trajectory(spec, s.params(0), [1.0, 0.0], t, [1.0, 1.0]).states)


def test_huge_precision_noise_is_negligible(rng):
    spec, s, clean, sigma = _lv_chain(rng, spread=0.0)
    s.samples[:, -1] = 12.0
    t = np.linspace(0, 2, 11)
    a = posterior_forecast(spec, s, clean.states[0], t, sigma, include_noise=False)
    b = posterior_forecast(spec, s, clean.states[0], t, sigma, include_noise=True, seed=3)
    assert np.max(np.abs(b.var - a.var) / sigma ** 2) < 1e-5


def test_noise_inflates_variance_on_average(rng):
    spec, s, clean, sigma = _lv_chain(rng, T=20)
    t = np.linspace(0, 2, 6)
    base = posterior_forecast(spec, s, clean.states[0], t, sigma).var
    noisy = np.mean([posterior_forecast(spec, s, clean.states[0], t, sigma, include_noise=True, seed=k).var
                     for k in range(50)], axis=0)
    assert np.all(noisy >= base)


def test_divergent_members_excluded_and_flagged():
    spec = ModelSpec(1, FeatureLibrary(1, ((3,),)))
    rows = np.array([[-0.1, 0, 0]] * 8 + [[2.0, 0, 0]] * 2, float)
    s = _chain(rows, np.r_[np.zeros(8), -np.ones(2)])
    ens = posterior_forecast(spec, s, [2.0], np.linspace(0, 5, 6), [1.0])
    assert ens.excluded == 2 and len(ens.members) == 8 and ens.unreliable
    # exactly 10% excluded is still reliable
    s2 = _chain(np.array([[-0.1, 0, 0]] * 9 + [[2.0, 0, 0]], float), np.zeros(10))
    ens2 = posterior_forecast(spec, s2, [2.0], np.linspace(0, 5, 6), [1.0])
    assert ens2.excluded == 1 and not ens2.unreliable


def test_n_samples_bounds(rng):
    spec, s, clean, sigma = _lv_chain(rng, T=5)
    with pytest.raises(ValueError):
        posterior_forecast(spec, s, clean.states[0], [0.0, 1.0], sigma, n_samples=6)


def test_write_forecast(rng, tmp_path):
    spec, s, clean, sigma = _lv_chain(rng, T=6)
    t = np.linspace(0, 1, 5)
    ens = posterior_forecast(spec, s, clean.states[0], t, sigma)
    write_forecast(ens, tmp_path / "f.csv", tmp_path / "f.json", ("x1", "x2"), emit_members=True)
    with open(tmp_path / "f.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:7] == ["t", "x1_mean", "x1_sd", "x1_map", "x2_mean", "x2_sd", "x2_map"]
    assert rows[0][7:9] == ["x1_m0", "x2_m0"] and len(rows[0]) == 7 + 12
    assert len(rows) == 6
    assert float(rows[3][1]) == ens.mean[2, 0] and float(rows[3][2]) == math.sqrt(ens.var[2, 0])
    doc = json.loads((tmp_path / "f.json").read_text())
    assert doc["members_used"] == 6 and doc["unreliable"] is False
