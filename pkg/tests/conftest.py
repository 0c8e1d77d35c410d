import numpy as np
import pytest

from odehmc import kernels
from odehmc.benchmarks import GLYCOLYSIS_SCALE, get_recipe
from odehmc.dynamics import GLYCOLYSIS_PARAMS, BuiltinSystem, MlpClosure, ModelSpec, build_feature_library


def random_specs():
    """Small specs covering every model family the kernels support."""
    lib3 = build_feature_library(2, 3)
    return {
        "cubic": ModelSpec(2, lib3),
        "lv": get_recipe("lotka_volterra").fit_spec(),
        "pendulum": get_recipe("damped_pendulum").fit_spec(),
        "hybrid": get_recipe("pendulum_hybrid").fit_spec(),
        "trig_mlp": ModelSpec(3, build_feature_library(3, 2, ["sin:0", "cos:2"]),
                              closure=MlpClosure(3, (0, 2), (1, 2), (5, 4))),
        "glycolysis": get_recipe("glycolysis").fit_spec(np.array([0.5, 0.6, 0.05, 0.07, 0.04, 0.7, 0.01])),
    }


def random_theta(spec, rng, scale=0.3, margin=1e-3):
    th = rng.normal(size=spec.P) * scale
    th = np.where(np.abs(th) < margin, np.sign(th + 1e-300) * margin * 2, th)
    if spec.builtin is not None:
        nb = spec.n_builtin
        th[spec.n_dict:spec.n_dict + nb] = rng.uniform(0.8, 1.2, nb) * np.array(truth_scaled())
    return th


def truth_scaled():
    truth = get_recipe("glycolysis").truth
    return [truth[n] / GLYCOLYSIS_SCALE[n] for n in GLYCOLYSIS_PARAMS]


def random_states(spec, rng, B):
    if spec.builtin is not None:
        x0 = np.array([0.5, 1.9, 0.18, 0.15, 0.16, 0.1, 0.064]) / np.array(spec.builtin.state_scale)
        return x0 * rng.uniform(0.8, 1.2, (B, spec.dim))
    return rng.uniform(-1.0, 1.0, (B, spec.dim))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    prev = kernels.BACKEND
    kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(prev)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
