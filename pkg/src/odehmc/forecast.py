"""MAP selection, MAP trajectories and posterior-predictive ensembles."""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .dynamics import ModelParams, ModelSpec
from .integrate import n_substeps
from .sampler import PosteriorSamples

UNRELIABLE_FRACTION = 0.1


def map_estimate(samples: PosteriorSamples) -> ModelParams:
    """Retained draw with the largest log-posterior (earliest on ties)."""
    lp = samples.retained_log_post()
    if lp.size == 0:
        raise ValueError("no retained samples")
    i = int(np.argmax(lp))
    return ModelParams.from_vector(samples.retained()[i])


def _check_times(times) -> np.ndarray:
    t = np.asarray(times, float)
    if t.ndim != 1 or t.size == 0:
        raise ValueError("times must be a non-empty 1-D grid")
    if np.any(np.diff(t) <= 0):
        raise ValueError("times must be strictly increasing")
    return t


@dataclass
class Prediction:
    times: np.ndarray
    states: np.ndarray  # physical units; NaN rows after a divergence
    n_valid: int

    @property
    def truncated(self) -> bool:
        return self.n_valid < len(self.times)


def _integrate(spec, theta, x0n, t, dt_target):
    if t.size == 1:
        return x0n[None, :].copy()
    dt = np.diff(t)
    N = n_substeps(dt, dt_target)
    return kernels.trajectory(spec, theta, x0n, dt / N, N)


def predict_trajectory(spec: ModelSpec, params: ModelParams, x0, times, sigma,
                       dt_target: float = 0.01) -> Prediction:
    """Integrate from ``x0`` (physical units) through ``times`` with the normalized model."""
    t = _check_times(times)
    sigma = np.asarray(sigma, float)
    x0 = np.asarray(x0, float)
    if x0.shape != (spec.dim,) or sigma.shape != (spec.dim,):
        raise ValueError(f"x0 and sigma must have length {spec.dim}")
    Z = _integrate(spec, params.theta, x0 / sigma, t, dt_target)
    ok = np.all(np.isfinite(Z), axis=1)
    n_valid = len(t) if ok.all() else int(np.argmin(ok))
    X = Z * sigma
    X[n_valid:] = np.nan
    return Prediction(t, X, n_valid)


@dataclass
class ForecastEnsemble:
    times: np.ndarray
    members: np.ndarray  # (N_s kept, T, D), physical units
    mean: np.ndarray
    var: np.ndarray
    map_trajectory: Prediction
    include_noise: bool
    n_requested: int
    excluded: int

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(self.var)

    @property
    def unreliable(self) -> bool:
        return self.excluded > UNRELIABLE_FRACTION * self.n_requested

    def summary(self) -> dict:
        return {
            "n_times": int(len(self.times)),
            "t_start": float(self.times[0]),
            "t_end": float(self.times[-1]),
            "members_requested": self.n_requested,
            "members_used": int(len(self.members)),
            "members_excluded": self.excluded,
            "unreliable": self.unreliable,
            "include_noise": self.include_noise,
            "map_truncated_at": None if not self.map_trajectory.truncated else self.map_trajectory.n_valid,
            "max_sd": [float(v) for v in np.nanmax(self.sd, axis=0)] if len(self.members) else None,
        }


def posterior_forecast(spec: ModelSpec, samples: PosteriorSamples, x0, times, sigma,
                       n_samples: Optional[int] = None, include_noise: bool = False, seed: int = 0,
                       dt_target: float = 0.01) -> ForecastEnsemble:
    """Trajectories of the last ``n_samples`` retained draws with their mean and variance.

    Noise, when requested, is drawn per member and time point from
    ``N(0, 1/gamma_i)`` in normalized units. Divergent members are dropped.
    """
    t = _check_times(times)
    R = samples.retained()
    n_samples = len(R) if n_samples is None else int(n_samples)
    if not 1 <= n_samples <= len(R):
        raise ValueError(f"n_samples must be in [1, {len(R)}]")
    sigma = np.asarray(sigma, float)
    x0n = np.asarray(x0, float) / sigma
    rng = np.random.default_rng(seed)
    kept = []
    excluded = 0
    for row in R[len(R) - n_samples:]:
        p = ModelParams.from_vector(row)
        Z = _integrate(spec, p.theta, x0n, t, dt_target)
        if include_noise:
            Z = Z + rng.standard_normal(Z.shape) / math.sqrt(p.gamma)
        if not np.all(np.isfinite(Z)):
            excluded += 1
            continue
        kept.append(Z * sigma)
    members = np.array(kept) if kept else np.zeros((0, len(t), spec.dim))
    if kept:
        # moments about the first member: identical members give exactly zero variance
        d = members - members[0]
        dm = d.mean(axis=0)
        mean = members[0] + dm
        var = ((d - dm) ** 2).mean(axis=0)
    else:
        mean = var = np.full((len(t), spec.dim), np.nan)
    map_traj = predict_trajectory(spec, map_estimate(samples), x0, t, sigma, dt_target)
    return ForecastEnsemble(t, members, mean, var, map_traj, include_noise, n_samples, excluded)


def write_forecast(ens: ForecastEnsemble, csv_path, json_path=None, names: Sequence[str] = (),
                   emit_members: bool = False) -> None:
    D = ens.mean.shape[1]
    names = list(names) or [f"x{j + 1}" for j in range(D)]
    cols = ["t"]
    for n in names:
        cols += [f"{n}_mean", f"{n}_sd", f"{n}_map"]
    if emit_members:
        cols += [f"{n}_m{i}" for i in range(len(ens.members)) for n in names]
    out = io.StringIO()
    out.write(",".join(cols) + "\n")
    sd = ens.sd
    for k, tk in enumerate(ens.times):
        row = [tk]
        for j in range(D):
            row += [ens.mean[k, j], sd[k, j], ens.map_trajectory.states[k, j]]
        if emit_members:
            row += list(ens.members[:, k, :].ravel())
        out.write(",".join(repr(float(v)) for v in row) + "\n")
    with open(csv_path, "w", newline="") as fh:
        fh.write(out.getvalue())
    if json_path is not None:
        with open(json_path, "w") as fh:
            json.dump(ens.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")
