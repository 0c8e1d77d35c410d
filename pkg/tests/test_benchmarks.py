import json
import math

import numpy as np
import pytest

from odehmc import kernels
from odehmc.benchmarks import (
    GLYCOLYSIS_SCALE,
    REFERENCE_DT,
    exact_rhs,
    generate,
    get_recipe,
    integrate_exact,
    list_recipes,
    truth_spec,
)
from odehmc.data import build_pairs, normalize
from odehmc.dynamics import GLYCOLYSIS_PARAMS, eval_rhs, normalize_coefficients


def test_exact_rhs_values():
    np.testing.assert_allclose(exact_rhs("cubic_oscillator", [2.0, 0.0]), [-0.8, -16.0], atol=1e-15)
    np.testing.assert_array_equal(exact_rhs("damped_pendulum", [0.0, 0.0]), [0.0, 0.0])
    # 1*5 - 0.1*25, -1.5*5 + 0.75*25
    np.testing.assert_allclose(exact_rhs("lotka_volterra", [5.0, 5.0]), [2.5, 11.25], atol=1e-14)


def test_exact_rhs_unknown_system():
    with pytest.raises(KeyError, match="cubic_oscillator"):
        exact_rhs("van_der_pol", [0.0, 0.0])


def test_recipe_lookup():
    assert set(list_recipes()) >= {"cubic_oscillator", "lotka_volterra", "damped_pendulum",
                                   "pendulum_hybrid", "glycolysis"}
    with pytest.raises(KeyError, match="available"):
        get_recipe("nope")
    for name in list_recipes():
        json.dumps(get_recipe(name).to_dict())


@pytest.mark.parametrize("name", ["cubic_oscillator", "lotka_volterra", "glycolysis"])
def test_fit_spec_at_truth_reproduces_exact_rhs(name):
    r = get_recipe(name)
    _, noisy = generate(r, 0)
    ds, sigma = normalize(build_pairs(noisy, r.dt_target))
    spec = r.fit_spec(sigma)
    truth = r.truth_theta(spec)
    if r.system == "glycolysis":
        theta = truth / np.array([GLYCOLYSIS_SCALE[n] for n in GLYCOLYSIS_PARAMS])
    else:
        theta = normalize_coefficients(spec, truth, sigma)
    for x in ds.x_start[::97]:
        got = eval_rhs(spec, theta, x) * sigma
        np.testing.assert_allclose(got, exact_rhs(r.system, x * sigma), rtol=1e-12, atol=1e-12)


def test_pendulum_truth_spec_matches():
    spec, theta = truth_spec("damped_pendulum")
    x = np.array([0.7, -1.3])
    np.testing.assert_allclose(eval_rhs(spec, theta, x), exact_rhs("damped_pendulum", x), rtol=1e-14)


def test_regular_sampling_counts():
    r = get_recipe("cubic_oscillator")
    clean, noisy = generate(r, 0)
    assert clean.m == r.n_pairs + 1
    np.testing.assert_allclose(np.diff(clean.times), 20.0 / 300, rtol=1e-12)
    assert noisy.states.tobytes() == clean.states.tobytes()


def test_irregular_sampling():
    r = get_recipe("lotka_volterra")
    clean, noisy = generate(r, 2)
    assert clean.m == r.n_pairs + 1 and clean.times[0] == 0.0
    assert np.all(np.diff(clean.times) > 0) and clean.times[-1] <= r.t_end
    ds = build_pairs(noisy, r.dt_target)
    assert ds.n == 1000 and len(np.unique(ds.n_steps)) > 1
    assert math.fsum(ds.delta_t) == pytest.approx(clean.times[-1] - clean.times[0], abs=1e-12)
    # the clean states lie on the fine reference trajectory
    i = 17
    t = clean.times[i]
    ref = integrate_exact(r.system, r.x0, [0.0, t])[-1]
    np.testing.assert_allclose(clean.states[i], ref, rtol=1e-9)


def test_generate_is_deterministic():
    r = get_recipe("glycolysis")
    a, b = generate(r, 5), generate(r, 5)
    assert a[1].states.tobytes() == b[1].states.tobytes()
    assert a[1].times.tobytes() == b[1].times.tobytes()
    c = generate(r, 6)
    assert c[1].states.tobytes() != a[1].states.tobytes()


def test_relative_noise_level():
    r = get_recipe("lotka_volterra")
    clean, noisy = generate(r, 0)
    resid = noisy.states - clean.states
    np.testing.assert_allclose(resid.std(axis=0), 0.03 * clean.states.std(axis=0), rtol=0.1)


def test_lv_and_glycolysis_stay_positive():
    for name in ("lotka_volterra", "glycolysis"):
        clean, _ = generate(get_recipe(name), 0)
        assert np.all(clean.states > 0), name


def test_pendulum_amplitude_decays():
    t = np.linspace(0, 20, 4001)
    X = integrate_exact("damped_pendulum", (-1.193, -3.876), t, dt=1e-3)
    period = 2 * math.pi / math.sqrt(8.91)
    amps = [np.abs(X[(t >= k * period) & (t < (k + 1) * period), 0]).max() for k in range(int(20 // period))]
    assert all(b <= a for a, b in zip(amps, amps[1:])), amps


def test_reference_step_is_converged():
    t = [0.0, 3.0]
    a = integrate_exact("cubic_oscillator", (2.0, 0.0), t, dt=REFERENCE_DT)[-1]
    b = integrate_exact("cubic_oscillator", (2.0, 0.0), t, dt=REFERENCE_DT / 2)[-1]
    np.testing.assert_allclose(a, b, atol=1e-12)


@pytest.mark.parametrize("name", ["cubic_oscillator", "lotka_volterra", "damped_pendulum", "glycolysis"])
def test_dt_target_error_far_below_noise(name):
    # RK4 at the recipe's dt_target, run with the true model, against the fine reference
    r = get_recipe(name)
    clean, _ = generate(r, 0)
    ds = build_pairs(clean, r.dt_target)
    spec, theta = truth_spec(r.system)
    pred = kernels.propagate(spec, theta, ds.x_start, ds.h, ds.n_steps)
    err = np.abs(pred - ds.x_end).max(axis=0) / clean.states.std(axis=0)
    bound = r.noise / 100 if r.noise else 1e-5
    assert np.all(err < bound), err
