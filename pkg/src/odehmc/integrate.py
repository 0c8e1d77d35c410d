"""Fixed-step RK4 over one observation segment and its discrete adjoint.

These functions work on a single segment and are the reference path; the
batched loss/gradient used by the sampler lives in :mod:`odehmc.kernels`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import ModelSpec, NonFiniteError, rhs_batch, rhs_vjp_batch


class DivergenceError(NonFiniteError):
    """Integration produced a non-finite state; ``step`` is the failing sub-step."""

    def __init__(self, step: int, msg: str = ""):
        super().__init__(msg or f"non-finite state at sub-step {step}")
        self.step = step


@dataclass(frozen=True)
class SegmentPlan:
    t0: float
    delta_t: float
    N: int

    def __post_init__(self):
        if not (self.delta_t > 0) or not math.isfinite(self.delta_t):
            raise ValueError("delta_t must be positive")
        if int(self.N) != self.N or self.N < 1:
            raise ValueError("N must be a positive integer")

    @property
    def dt(self) -> float:
        return self.delta_t / self.N

    @classmethod
    def from_target(cls, t0: float, delta_t: float, dt_target: float) -> "SegmentPlan":
        return cls(t0, delta_t, n_substeps(delta_t, dt_target))


def n_substeps(delta_t, dt_target):
    """``max(1, ceil(delta_t / dt_target))``, elementwise for arrays."""
    if np.any(np.asarray(dt_target) <= 0):
        raise ValueError("dt_target must be positive")
    # guard against 0.02/0.01 -> 2.0000000000000004
    ratio = np.asarray(delta_t, float) / dt_target
    n = np.maximum(1, np.ceil(ratio - 1e-9 * np.maximum(ratio, 1.0))).astype(np.int64)
    return int(n) if n.ndim == 0 else n


@dataclass(frozen=True, eq=False)
class SegmentTape:
    """Stage inputs of every RK4 step: ``stages[n, s]`` is the state at which
    stage ``s`` of step ``n`` was evaluated (``stages[n, 0]`` is the step start)."""

    stages: np.ndarray  # (N, 4, D)
    k: np.ndarray  # (N, 4, D) stage slopes
    dt: float
    x_end: np.ndarray
    P: int

    @property
    def N(self) -> int:
        return self.stages.shape[0]

    def replay(self) -> np.ndarray:
        x = self.stages[0, 0].copy()
        h = self.dt
        for n in range(self.N):
            k1, k2, k3, k4 = self.k[n]
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        return x


def _f(spec, theta, x):
    return rhs_batch(spec, theta, x[None, :])[0]


def _rk4(spec, theta, x, h):
    k1 = _f(spec, theta, x)
    y2 = x + 0.5 * h * k1
    k2 = _f(spec, theta, y2)
    y3 = x + 0.5 * h * k2
    k3 = _f(spec, theta, y3)
    y4 = x + h * k3
    k4 = _f(spec, theta, y4)
    x_new = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x_new, (x, y2, y3, y4), (k1, k2, k3, k4)


def rk4_step(spec: ModelSpec, theta, x, t: float, dt: float) -> np.ndarray:
    if not dt > 0:
        raise ValueError("dt must be positive")
    with np.errstate(over="ignore", invalid="ignore"):
        x_new, _, _ = _rk4(spec, theta, np.asarray(x, float), dt)
    if not np.all(np.isfinite(x_new)):
        raise DivergenceError(0)
    return x_new


def integrate_segment(spec: ModelSpec, theta, x0, plan: SegmentPlan):
    """Chain ``plan.N`` RK4 steps; returns ``(x_end, tape)``."""
    x = np.array(x0, float)
    h = plan.dt
    stages = np.empty((plan.N, 4, spec.dim))
    ks = np.empty((plan.N, 4, spec.dim))
    with np.errstate(over="ignore", invalid="ignore"):
        for n in range(plan.N):
            x, ys, k = _rk4(spec, theta, x, h)
            stages[n] = ys
            ks[n] = k
            if not np.all(np.isfinite(x)):
                raise DivergenceError(n)
    return x, SegmentTape(stages, ks, h, x, spec.P)


def segment_vjp(spec: ModelSpec, theta, tape: SegmentTape, endpoint_cotangent):
    """Reverse pass through the taped RK4 steps.

    Returns ``(cotangent on x0, cotangent on theta)`` of the discrete endpoint.
    """
    if tape.P != spec.P or tape.stages.shape[2] != spec.dim:
        raise ValueError("tape was produced by a different model spec")
    a = np.array(endpoint_cotangent, float)
    if a.shape != (spec.dim,):
        raise ValueError("cotangent must have shape (D,)")
    h = tape.dt
    gth = np.zeros(spec.P)

    def pull(y, c):
        gx, gt = rhs_vjp_batch(spec, theta, y[None, :], c[None, :])
        return gx[0], gt

    for n in range(tape.N - 1, -1, -1):
        x, y2, y3, y4 = tape.stages[n]
        a_k4 = (h / 6.0) * a
        a_k3 = (h / 3.0) * a
        a_k2 = (h / 3.0) * a
        a_k1 = (h / 6.0) * a
        ax = a.copy()
        gx, gt = pull(y4, a_k4)
        ax += gx
        gth += gt
        a_k3 = a_k3 + h * gx
        gx, gt = pull(y3, a_k3)
        ax += gx
        gth += gt
        a_k2 = a_k2 + 0.5 * h * gx
        gx, gt = pull(y2, a_k2)
        ax += gx
        gth += gt
        a_k1 = a_k1 + 0.5 * h * gx
        gx, gt = pull(x, a_k1)
        ax += gx
        gth += gt
        a = ax
    return a, gth
