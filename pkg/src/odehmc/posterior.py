"""Unnormalized log-posterior over ``Theta = (theta, log lambda, log gamma)``.

    log p = sum_i log N(x_end_i | h_theta(x_start_i), gamma^-1 I)
          + sum_p log Laplace(theta_p | 0, 1/lambda)
          + log Gam(log lambda | a1, b1) + log Gam(log gamma | a2, b2)

The Gamma densities sit on the log-precisions, whose natural domain is the
whole real line; for ``u <= 0`` the Gamma log-density is replaced by the
quadratic barrier ``c - u^2/2`` with ``c = a log b - lgamma(a)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .data import Dataset
from .dynamics import ModelParams, ModelSpec

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class HyperPriors:
    alpha1: float = 1.0
    beta1: float = 1.0
    alpha2: float = 1.0
    beta2: float = 1.0

    def __post_init__(self):
        if min(self.alpha1, self.beta1, self.alpha2, self.beta2) <= 0:
            raise ValueError("Gamma hyper-parameters must be positive")


def log_gamma_on_log(u: float, alpha: float, beta: float) -> tuple[float, float]:
    """Value and derivative of the Gamma prior placed on a log-precision ``u``."""
    c = alpha * math.log(beta) - math.lgamma(alpha)
    if u > 0:
        return c + (alpha - 1.0) * math.log(u) - beta * u, (alpha - 1.0) / u - beta
    return c - 0.5 * u * u, -u


class Target:
    """Log-posterior and gradient as a function of the flat vector ``Theta``."""

    def __init__(self, spec: ModelSpec, dataset: Dataset, hyper: HyperPriors = HyperPriors()):
        if dataset.n == 0:
            raise ValueError("dataset is empty")
        if dataset.D != spec.dim:
            raise ValueError("dataset and model dimensions differ")
        self.spec = spec
        self.ds = dataset
        self.hyper = hyper
        self.h = np.ascontiguousarray(dataset.h)
        self.N = np.ascontiguousarray(dataset.n_steps, dtype=np.int64)
        self.n_evals = 0

    @property
    def dim(self) -> int:
        return self.spec.P + 2

    def sse(self, theta, grad=False):
        return kernels.sse_and_grad(self.spec, theta, self.ds.x_start, self.ds.x_end, self.h, self.N, grad)

    def __call__(self, Theta, grad: bool = True):
        """``(log p, gradient)``; ``(-inf, None)`` when the integration diverges."""
        Theta = np.asarray(Theta, float)
        theta, ll, lg = Theta[:-2], float(Theta[-2]), float(Theta[-1])
        if not (math.isfinite(ll) and math.isfinite(lg)):
            raise ValueError("log lambda and log gamma must be finite")
        self.n_evals += 1
        if not np.all(np.isfinite(theta)):
            return -math.inf, None
        sse, g_sse = self.sse(theta, grad)
        if not math.isfinite(sse):
            return -math.inf, None
        n, D, P = self.ds.n, self.ds.D, self.spec.P
        hp = self.hyper
        lam, gam = math.exp(ll), math.exp(lg)
        abs_sum = float(np.abs(theta).sum())
        pl, dpl = log_gamma_on_log(ll, hp.alpha1, hp.beta1)
        pg, dpg = log_gamma_on_log(lg, hp.alpha2, hp.beta2)
        lik = 0.5 * n * D * (lg - LOG_2PI) - 0.5 * gam * sse
        lap = P * (ll - math.log(2.0)) - lam * abs_sum
        value = lik + lap + pl + pg
        if not math.isfinite(value):
            return -math.inf, None
        if not grad:
            return value, None
        g = np.empty(P + 2)
        g[:P] = -0.5 * gam * g_sse - lam * np.sign(theta)
        g[P] = P - lam * abs_sum + dpl
        g[P + 1] = 0.5 * n * D - 0.5 * gam * sse + dpg
        if not np.all(np.isfinite(g)):
            return -math.inf, None
        return value, g


def log_posterior(spec: ModelSpec, params: ModelParams, dataset: Dataset, hyper: HyperPriors = HyperPriors()) -> float:
    return Target(spec, dataset, hyper)(params.to_vector(), grad=False)[0]


def grad_log_posterior(spec: ModelSpec, params: ModelParams, dataset: Dataset,
                       hyper: HyperPriors = HyperPriors()) -> np.ndarray:
    value, g = Target(spec, dataset, hyper)(params.to_vector())
    if g is None:
        raise FloatingPointError("log-posterior is not finite at this parameter point")
    return g
