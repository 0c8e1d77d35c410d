"""Reference systems, ground truth and data-generation recipes."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional

import numpy as np

from .data import Trajectory, add_absolute_noise, add_noise
from .dynamics import (
    GLYCOLYSIS_PARAMS,
    GLYCOLYSIS_STATES,
    BuiltinSystem,
    MlpClosure,
    ModelSpec,
    build_feature_library,
)

REFERENCE_DT = 1e-4

SYSTEMS = ("cubic_oscillator", "lotka_volterra", "damped_pendulum", "glycolysis")

TRUTH = {
    "cubic_oscillator": {"alpha": -0.1, "beta": 2.0, "gamma": -2.0, "delta": -0.1},
    # dx1 = alpha x1 + beta x1 x2, dx2 = gamma x2 + delta x1 x2 (signs carried by the values)
    "lotka_volterra": {"alpha": 1.0, "beta": -0.1, "gamma": -1.5, "delta": 0.75},
    "damped_pendulum": {"gamma": 1.0, "alpha": 0.2, "beta": 8.91},
    "glycolysis": {
        "J0": 2.5, "k1": 100.0, "k2": 6.0, "k3": 16.0, "k4": 100.0, "k5": 1.28, "k6": 12.0,
        "k": 1.8, "kappa": 13.0, "q": 4.0, "K_I": 0.52, "phi": 0.1, "N": 1.0, "A": 4.0,
    },
}

# Order-of-magnitude scales; also the starting guess handed to the optimizer.
GLYCOLYSIS_SCALE = {
    "J0": 1.0, "k1": 100.0, "k2": 10.0, "k3": 10.0, "k4": 100.0, "k5": 1.0, "k6": 10.0,
    "k": 1.0, "kappa": 10.0, "q": 1.0, "K_I": 1.0, "phi": 0.1, "N": 1.0, "A": 1.0,
}


def _cubic(x, p):
    x1, x2 = x
    return np.array([p["alpha"] * x1 ** 3 + p["beta"] * x2 ** 3,
                     p["gamma"] * x1 ** 3 + p["delta"] * x2 ** 3])


def _lotka_volterra(x, p):
    x1, x2 = x
    return np.array([p["alpha"] * x1 + p["beta"] * x1 * x2,
                     p["gamma"] * x2 + p["delta"] * x1 * x2])


def _pendulum(x, p):
    x1, x2 = x
    return np.array([p["gamma"] * x2, -p["alpha"] * x2 - p["beta"] * math.sin(x1)])


def _glycolysis(x, p):
    S1, S2, S3, S4, N2, A3, S4ex = x
    N1 = p["N"] - N2
    A2 = p["A"] - A3
    inhib = 1.0 / (1.0 + (A3 / p["K_I"]) ** p["q"])
    upper = p["k1"] * S1 * A3 * inhib
    v2 = p["k2"] * S2 * N1
    v3 = p["k3"] * S3 * A2
    v4 = p["k4"] * S4 * N2
    v6 = p["k6"] * S2 * N2
    flux = p["kappa"] * (S4 - S4ex)
    return np.array([
        p["J0"] - upper,
        2.0 * upper - v2 - v6,
        v2 - v3,
        v3 - v4 - flux,
        v2 - v4 - v6,
        -2.0 * upper + 2.0 * v3 - p["k5"] * A3,
        p["phi"] * flux - p["k"] * S4ex,
    ])


_RHS = {
    "cubic_oscillator": _cubic,
    "lotka_volterra": _lotka_volterra,
    "damped_pendulum": _pendulum,
    "glycolysis": _glycolysis,
}


def exact_rhs(system: str, x, t: float = 0.0, params: Optional[dict] = None) -> np.ndarray:
    """Ground-truth derivative (autonomous; ``t`` is accepted for symmetry)."""
    if system not in _RHS:
        raise KeyError(f"unknown system {system!r}; choose from {', '.join(SYSTEMS)}")
    p = dict(TRUTH[system], **(params or {}))
    return _RHS[system](np.asarray(x, float), p)


def integrate_exact(system: str, x0, times, params: Optional[dict] = None, dt: float = REFERENCE_DT) -> np.ndarray:
    """Classical RK4 on :func:`exact_rhs` through ``times``; each gap uses ``ceil(gap/dt)`` steps."""
    p = dict(TRUTH[system], **(params or {}))
    f = _RHS[system]
    x = np.array(x0, float)
    out = np.empty((len(times), x.size))
    out[0] = x
    for i in range(1, len(times)):
        gap = times[i] - times[i - 1]
        n = max(1, math.ceil(gap / dt * (1 - 1e-12)))
        h = gap / n
        for _ in range(n):
            k1 = f(x, p)
            k2 = f(x + 0.5 * h * k1, p)
            k3 = f(x + 0.5 * h * k2, p)
            k4 = f(x + h * k3, p)
            x = x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"{system} reference integration diverged before t={times[i]}")
        out[i] = x
    return out


@lru_cache(maxsize=8)
def _fine_solution(system: str, x0: tuple, t_end: float, dt: float) -> np.ndarray:
    n = round(t_end / dt)
    grid = np.arange(n + 1) * dt
    p = TRUTH[system]
    f = _RHS[system]
    X = np.empty((n + 1, len(x0)))
    x = np.array(x0, float)
    X[0] = x
    for i in range(n):
        k1 = f(x, p)
        k2 = f(x + 0.5 * dt * k1, p)
        k3 = f(x + 0.5 * dt * k2, p)
        k4 = f(x + dt * k3, p)
        x = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        X[i + 1] = x
    if not np.all(np.isfinite(X)):
        raise FloatingPointError(f"{system} reference integration diverged")
    X.setflags(write=False)
    return grid, X


# ---------------------------------------------------------------------------
# recipes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BenchmarkRecipe:
    name: str
    system: str
    x0: tuple[float, ...]
    t_end: float
    sampling: str  # "regular" | "irregular"
    n_pairs: int
    noise: float = 0.0
    noise_kind: str = "relative"  # "relative" (x per-dimension std) | "absolute"
    dt_target: float = 0.01
    precondition: dict = field(default_factory=dict)
    hmc: dict = field(default_factory=dict)
    description: str = ""

    def __post_init__(self):
        if self.system not in SYSTEMS:
            raise ValueError(f"unknown system {self.system!r}")
        if self.sampling not in ("regular", "irregular"):
            raise ValueError("sampling must be 'regular' or 'irregular'")
        if self.n_pairs < 1:
            raise ValueError("n_pairs must be >= 1")
        if self.noise_kind not in ("relative", "absolute"):
            raise ValueError("noise_kind must be 'relative' or 'absolute'")

    @property
    def truth(self) -> dict:
        return dict(TRUTH[self.system])

    @property
    def var_names(self) -> tuple[str, ...]:
        return GLYCOLYSIS_STATES if self.system == "glycolysis" else ("x1", "x2")

    def with_overrides(self, **kw) -> "BenchmarkRecipe":
        return replace(self, **kw)

    def sample_times(self, rng: np.random.Generator) -> np.ndarray:
        if self.sampling == "regular":
            return np.linspace(0.0, self.t_end, self.n_pairs + 1)
        n_grid = round(self.t_end / REFERENCE_DT)
        if self.n_pairs > n_grid:
            raise ValueError("more pairs requested than reference grid points")
        picks = np.sort(rng.choice(np.arange(1, n_grid + 1), size=self.n_pairs, replace=False))
        return np.concatenate([[0.0], picks * REFERENCE_DT])

    def fit_spec(self, sigma=None) -> ModelSpec:
        """Model to fit; ``sigma`` is the data normalization (needed for known-form systems)."""
        return _FIT_SPECS[self.name](self, sigma)

    def truth_theta(self, spec: ModelSpec) -> np.ndarray:
        """Ground truth in the fit spec's physical-unit theta layout (dictionary/built-in part only)."""
        return _truth_theta(self, spec)

    def to_dict(self) -> dict:
        return {
            "name": self.name, "system": self.system, "x0": list(self.x0), "t_end": self.t_end,
            "sampling": self.sampling, "n_pairs": self.n_pairs, "noise": self.noise,
            "noise_kind": self.noise_kind, "dt_target": self.dt_target, "truth": self.truth,
            "precondition": dict(self.precondition), "hmc": dict(self.hmc), "description": self.description,
        }


def _lib_spec(dim, degree, mask=None, closure=None, transforms=()):
    lib = build_feature_library(dim, degree, transforms)
    return ModelSpec(dim, lib, None if mask is None else np.asarray(mask, bool), closure=closure)


def _cubic_spec(recipe, sigma):
    return _lib_spec(2, 3)


def _lv_spec(recipe, sigma):
    # library order: 1, x1, x2, x1^2, x1x2, x2^2
    return _lib_spec(2, 2, [[0, 1, 0, 0, 1, 0], [0, 0, 1, 0, 1, 0]])


def _pendulum_spec(recipe, sigma):
    return _lib_spec(2, 1)


def _hybrid_spec(recipe, sigma):
    return _lib_spec(2, 2, [[1, 1, 1, 1, 1, 1], [0, 0, 1, 0, 1, 1]],
                     closure=MlpClosure(2, (0,), (1,), (20, 20)))


def _glycolysis_spec(recipe, sigma):
    scale = tuple(GLYCOLYSIS_SCALE[n] for n in GLYCOLYSIS_PARAMS)
    sigma = tuple(float(s) for s in sigma) if sigma is not None else (1.0,) * 7
    b = BuiltinSystem("glycolysis", scale, (True,) * 14, scale, sigma)
    return ModelSpec(7, builtin=b)


_FIT_SPECS = {
    "cubic_oscillator": _cubic_spec,
    "cubic_oscillator_noisy": _cubic_spec,
    "lotka_volterra": _lv_spec,
    "damped_pendulum": _pendulum_spec,
    "pendulum_hybrid": _hybrid_spec,
    "glycolysis": _glycolysis_spec,
}


def _truth_theta(recipe: BenchmarkRecipe, spec: ModelSpec) -> np.ndarray:
    p = recipe.truth
    if recipe.system == "glycolysis":
        return np.array([p[n] for n in GLYCOLYSIS_PARAMS])
    A = np.zeros((2, spec.K))
    names = spec.library.names(("x1", "x2"))
    col = {n: k for k, n in enumerate(names)}
    if recipe.system == "cubic_oscillator":
        A[0, col["x1^3"]], A[0, col["x2^3"]] = p["alpha"], p["beta"]
        A[1, col["x1^3"]], A[1, col["x2^3"]] = p["gamma"], p["delta"]
    elif recipe.system == "lotka_volterra":
        A[0, col["x1"]], A[0, col["x1*x2"]] = p["alpha"], p["beta"]
        A[1, col["x2"]], A[1, col["x1*x2"]] = p["gamma"], p["delta"]
    else:
        # the sin(x1) term has no dictionary slot; only its linear neighbours are set
        A[0, col["x2"]] = p["gamma"]
        A[1, col["x2"]] = -p["alpha"]
    return A[spec.mask]


def truth_spec(system: str) -> tuple[ModelSpec, np.ndarray]:
    """A fixed-parameter model reproducing the exact dynamics in physical units."""
    p = TRUTH[system]
    if system == "glycolysis":
        vals = tuple(p[n] for n in GLYCOLYSIS_PARAMS)
        b = BuiltinSystem("glycolysis", vals, (False,) * 14, (1.0,) * 14, (1.0,) * 7)
        return ModelSpec(7, builtin=b), np.zeros(0)
    if system == "damped_pendulum":
        lib = build_feature_library(2, 1, ["sin:0"])  # 1, x1, x2, sin(x1)
        A = np.array([[0, 0, p["gamma"], 0], [0, 0, -p["alpha"], -p["beta"]]], float)
    else:
        lib = build_feature_library(2, 3 if system == "cubic_oscillator" else 2)
        A = np.zeros((2, lib.K))
        r = get_recipe(system)
        A[ModelSpec(2, lib, _FIT_SPECS[system](r, None).mask).mask] = _truth_theta(r, _FIT_SPECS[system](r, None))
    spec = ModelSpec(2, lib, np.zeros_like(A, bool), A)
    return spec, np.zeros(0)


RECIPES = {
    r.name: r
    for r in (
        BenchmarkRecipe(
            "cubic_oscillator", "cubic_oscillator", (2.0, 0.0), 20.0, "regular", 300,
            precondition={"l1_weight": 1e-6}, hmc={"step_size": 3e-4},
            description="cubic damped oscillator, 300 regular noise-free pairs, full cubic dictionary",
        ),
        BenchmarkRecipe(
            "cubic_oscillator_noisy", "cubic_oscillator", (2.0, 0.0), 20.0, "regular", 1000,
            noise=0.02, noise_kind="absolute",
            precondition={"l1_weight": 1e-6}, hmc={"step_size": 1e-3},
            description="cubic damped oscillator, 1000 regular pairs, N(0, 0.02^2) noise",
        ),
        BenchmarkRecipe(
            "lotka_volterra", "lotka_volterra", (5.0, 5.0), 25.0, "irregular", 1000, noise=0.03,
            precondition={"l1_weight": 1e-5}, hmc={"step_size": 1e-3},
            description="predator-prey, 1000 irregular pairs on [0, 25], 3% noise, exact active terms",
        ),
        BenchmarkRecipe(
            "damped_pendulum", "damped_pendulum", (-1.193, -3.876), 20.0, "irregular", 500,
            precondition={"l1_weight": 1e-5}, hmc={"step_size": 3e-3},
            description="damped pendulum, linear dictionary (misspecified)",
        ),
        BenchmarkRecipe(
            "pendulum_hybrid", "damped_pendulum", (-1.193, -3.876), 20.0, "irregular", 500,
            precondition={"l1_weight": 1e-7, "iterations": 8000}, hmc={"step_size": 5e-4},
            description="damped pendulum, quadratic dictionary plus MLP closure on x1",
        ),
        BenchmarkRecipe(
            "glycolysis", "glycolysis", (0.5, 1.9, 0.18, 0.15, 0.16, 0.1, 0.064), 5.0, "irregular", 1000,
            noise=0.02, dt_target=0.002,
            precondition={"l1_weight": 1e-6, "iterations": 20000}, hmc={"step_size": 1e-3},
            description="yeast glycolysis, 14 known-form parameters, 1000 irregular pairs, 2% noise",
        ),
    )
}

GLYCOLYSIS_UNSEEN_X0 = (0.428, 1.42, 0.11, 0.296, 0.252, 0.830, 0.064)


def list_recipes() -> list[str]:
    return list(RECIPES)


def get_recipe(name: str) -> BenchmarkRecipe:
    try:
        return RECIPES[name]
    except KeyError:
        raise KeyError(f"unknown recipe {name!r}; available: {', '.join(RECIPES)}") from None


def generate(recipe: BenchmarkRecipe, seed: int) -> tuple[Trajectory, Trajectory]:
    """Clean and noisy observations of the recipe's trajectory.

    Irregular times are drawn uniformly without replacement from the reference
    grid (the initial time is always observed). Noise is added to every row.
    """
    ss = np.random.SeedSequence(seed)
    time_seq, noise_seq = ss.spawn(2)
    times = recipe.sample_times(np.random.default_rng(time_seq))
    if recipe.sampling == "irregular":
        grid, X = _fine_solution(recipe.system, tuple(recipe.x0), recipe.t_end, REFERENCE_DT)
        states = X[np.rint(times / REFERENCE_DT).astype(int)]
    else:
        states = integrate_exact(recipe.system, recipe.x0, times)
    clean = Trajectory(times, states, recipe.var_names)
    noise_seed = int(noise_seq.generate_state(1, np.uint64)[0])
    if recipe.noise == 0:
        noisy = Trajectory(times, states.copy(), recipe.var_names)
    elif recipe.noise_kind == "relative":
        noisy = add_noise(clean, recipe.noise, noise_seed)
    else:
        noisy = add_absolute_noise(clean, recipe.noise, noise_seed)
    return clean, noisy
