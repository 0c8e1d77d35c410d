"""Adam warm start for the sampler.

Minimizes ``(1/n) sum_i ||x_end_i - h_theta(x_start_i)||^2 + beta * ||theta||_1``
with full-batch gradients, then sets ``log lambda = 0`` and ``log gamma`` from
the residual precision (capped at 6).
"""
from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels
from .data import Dataset
from .dynamics import ModelParams, ModelSpec

log = logging.getLogger(__name__)

GAMMA_CAP = 6.0
MAX_HALVINGS = 10


class PreconditionError(RuntimeError):
    pass


@dataclass(frozen=True)
class PreconditionConfig:
    iterations: int = 3000
    learning_rate: float = 1e-2
    l1_weight: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.l1_weight < 0:
            raise ValueError("l1_weight must be non-negative")


def init_gamma(residual_mse: float) -> float:
    if residual_mse < 0 or math.isnan(residual_mse):
        raise ValueError("residual_mse must be non-negative")
    if residual_mse == 0:
        return GAMMA_CAP
    return min(-math.log(residual_mse), GAMMA_CAP)


class Objective:
    """Reconstruction loss plus L1 penalty, with its (sub)gradient."""

    def __init__(self, spec: ModelSpec, dataset: Dataset, l1_weight: float):
        self.spec = spec
        self.ds = dataset
        self.beta = float(l1_weight)

    def terms(self, theta, grad: bool = True):
        """``(reconstruction, l1, gradient)``; reconstruction is ``inf`` on divergence."""
        ds = self.ds
        sse, g = kernels.sse_and_grad(self.spec, theta, ds.x_start, ds.x_end, ds.h, ds.n_steps, grad)
        l1 = self.beta * float(np.abs(theta).sum())
        rec = sse / ds.n
        if not math.isfinite(rec):
            return math.inf, l1, None
        if grad:
            g = g / ds.n + self.beta * np.sign(theta)
        return rec, l1, g

    def __call__(self, theta) -> float:
        rec, l1, _ = self.terms(theta, grad=False)
        return rec + l1


@dataclass
class PreconditionResult:
    params: ModelParams
    trace: np.ndarray  # (iterations + 1, 4): iteration, objective, reconstruction, l1
    residual_mse: float
    skipped: int

    def write_trace(self, path_or_buf) -> None:
        out = io.StringIO()
        out.write("iteration,objective,reconstruction,l1\n")
        for it, obj, rec, l1 in self.trace:
            out.write(f"{int(it)},{obj!r},{rec!r},{l1!r}\n")
        if hasattr(path_or_buf, "write"):
            path_or_buf.write(out.getvalue())
        else:
            with open(path_or_buf, "w", newline="") as fh:
                fh.write(out.getvalue())


def adam(terms, theta0, config: PreconditionConfig = PreconditionConfig()):
    """Adam on ``terms(theta) -> (reconstruction, penalty, gradient)``.

    A step whose evaluation fails (``None`` gradient) is halved up to
    ``MAX_HALVINGS`` times and skipped after that. Returns the final iterate,
    the trace rows ``(iteration, objective, reconstruction, penalty)``, the
    final reconstruction and the number of skipped updates.
    """
    theta = np.array(theta0, float)
    rec, l1, g = terms(theta)
    if g is None:
        raise PreconditionError("integration diverges at the starting point; check the spec and data scaling")
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    b1, b2 = config.beta1, config.beta2
    trace = [(0, rec + l1, rec, l1)]
    skipped = 0
    for t in range(1, config.iterations + 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        step = config.learning_rate * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + config.eps)
        for k in range(MAX_HALVINGS + 1):
            cand = theta - step / 2.0 ** k
            c_rec, c_l1, c_g = terms(cand)
            if c_g is not None:
                theta, rec, l1, g = cand, c_rec, c_l1, c_g
                break
        else:
            skipped += 1
        trace.append((t, rec + l1, rec, l1))
        if t % 500 == 0:
            log.info("adam iter %d  objective %.6g  reconstruction %.6g", t, rec + l1, rec)
    return theta, np.array(trace, float), rec, skipped


def adam_minimize(spec: ModelSpec, dataset: Dataset, config: PreconditionConfig = PreconditionConfig(),
                  theta0: Optional[np.ndarray] = None) -> PreconditionResult:
    obj = Objective(spec, dataset, config.l1_weight)
    start = spec.initial_theta(np.random.default_rng(config.seed)) if theta0 is None else theta0
    theta, trace, rec, skipped = adam(obj.terms, start, config)
    residual = rec / dataset.D
    params = ModelParams(theta, 0.0, init_gamma(residual))
    return PreconditionResult(params, trace, residual, skipped)


def precondition(spec: ModelSpec, dataset: Dataset, config: PreconditionConfig = PreconditionConfig()) -> ModelParams:
    return adam_minimize(spec, dataset, config).params
