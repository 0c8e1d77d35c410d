"""Hamiltonian Monte Carlo over ``Theta`` with identity mass matrix."""
from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .data import Dataset
from .dynamics import ModelParams, ModelSpec
from .posterior import HyperPriors, Target

log = logging.getLogger(__name__)

ValueAndGrad = Callable[[np.ndarray], tuple]


@dataclass(frozen=True)
class HmcConfig:
    step_size: float = 1e-4
    leapfrog_steps: int = 10
    total_steps: int = 5000
    keep_last: int = 2000
    seed: int = 0
    update_mode: str = "joint"
    chains: int = 1

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.leapfrog_steps < 1 or self.total_steps < 1 or self.keep_last < 1:
            raise ValueError("leapfrog_steps, total_steps and keep_last must be positive")
        if self.keep_last > self.total_steps:
            raise ValueError("keep_last cannot exceed total_steps")
        if self.update_mode not in ("joint", "gibbs"):
            raise ValueError("update_mode must be 'joint' or 'gibbs'")
        if self.chains < 1:
            raise ValueError("chains must be >= 1")

    @property
    def burn_in(self) -> int:
        return self.total_steps - self.keep_last


class LeapfrogResult(NamedTuple):
    position: np.ndarray
    velocity: np.ndarray
    log_prob: float
    grad: Optional[np.ndarray]
    divergent: bool


def leapfrog(position, velocity, step_size: float, n_steps: int, value_and_grad: ValueAndGrad,
             grad0: Optional[np.ndarray] = None) -> LeapfrogResult:
    """Half kick, ``n_steps`` drift/kick pairs, half kick, then negate velocity.

    ``value_and_grad(q)`` returns the log-density and its gradient (``None``
    gradient or non-finite value marks a divergence).
    """
    q = np.array(position, float)
    v = np.array(velocity, float)
    g = grad0
    if g is None:
        _, g = value_and_grad(q)
    if g is None or not np.all(np.isfinite(g)):
        return LeapfrogResult(q, v, -math.inf, None, True)
    eps = step_size
    v = v + 0.5 * eps * g
    lp = -math.inf
    for i in range(n_steps):
        q = q + eps * v
        lp, g = value_and_grad(q)
        if g is None or not math.isfinite(lp):
            return LeapfrogResult(q, v, -math.inf, None, True)
        if i < n_steps - 1:
            v = v + eps * g
    v = v + 0.5 * eps * g
    return LeapfrogResult(q, -v, lp, g, False)


@dataclass(eq=False)
class PosteriorSamples:
    """Full chain, including burn-in; rejected proposals repeat the state."""

    samples: np.ndarray  # (T, P + 2)
    log_post: np.ndarray  # (T,)
    accepted: np.ndarray  # (T,) bool
    energy_error: np.ndarray  # (T,) |H_new - H_old|, nan for divergent proposals
    divergences: int
    config: HmcConfig
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.names:
            P = self.samples.shape[1] - 2
            self.names = [f"theta{i}" for i in range(P)] + ["log_lambda", "log_gamma"]

    @property
    def T(self) -> int:
        return len(self.log_post)

    @property
    def P(self) -> int:
        return self.samples.shape[1] - 2

    @property
    def acceptance_rate(self) -> float:
        return float(np.mean(self.accepted)) if self.T else 0.0

    @property
    def burn_in(self) -> int:
        return max(0, self.T - self.config.keep_last)

    def retained(self) -> np.ndarray:
        return self.samples[self.burn_in:]

    def retained_log_post(self) -> np.ndarray:
        return self.log_post[self.burn_in:]

    def params(self, i: int) -> ModelParams:
        return ModelParams.from_vector(self.samples[i])

    def summary(self, theta_physical: Optional[np.ndarray] = None) -> dict:
        """Per-coordinate moments and box-plot quantiles over the retained draws."""
        R = self.retained() if theta_physical is None else theta_physical
        q = np.quantile(R, [0.0, 0.25, 0.5, 0.75, 1.0], axis=0)
        coords = {}
        for j, name in enumerate(self.names[:R.shape[1]]):
            coords[name] = {
                "mean": float(R[:, j].mean()), "sd": float(R[:, j].std(ddof=1)) if len(R) > 1 else 0.0,
                "min": float(q[0, j]), "q1": float(q[1, j]), "median": float(q[2, j]),
                "q3": float(q[3, j]), "max": float(q[4, j]),
            }
        return {
            "total_steps": self.T,
            "retained": len(R),
            "acceptance_rate": self.acceptance_rate,
            "divergences": int(self.divergences),
            "mean_energy_error": float(np.nanmean(self.energy_error)) if self.T else float("nan"),
            "coordinates": coords,
        }

    # -- columnar file ---------------------------------------------------

    def to_csv(self, path_or_buf) -> None:
        """One column per Theta coordinate, then log_posterior and accepted."""
        out = io.StringIO()
        out.write(",".join(list(self.names) + ["log_posterior", "accepted"]) + "\n")
        for row, lp, acc in zip(self.samples, self.log_post, self.accepted):
            out.write(",".join(repr(float(v)) for v in row) + f",{float(lp)!r},{int(acc)}\n")
        text = out.getvalue()
        if hasattr(path_or_buf, "write"):
            path_or_buf.write(text)
        else:
            with open(path_or_buf, "w", newline="") as fh:
                fh.write(text)

    @classmethod
    def from_csv(cls, path, config: Optional[HmcConfig] = None) -> "PosteriorSamples":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        arr = np.array([[float(c) for c in r] for r in body]) if body else np.zeros((0, len(header)))
        T = len(arr)
        cfg = config or HmcConfig(total_steps=max(T, 1), keep_last=max(T, 1))
        return cls(
            samples=arr[:, :-2], log_post=arr[:, -2], accepted=arr[:, -1].astype(bool),
            energy_error=np.full(T, np.nan), divergences=0, config=cfg, names=header[:-2],
        )


def _hmc_update(f: ValueAndGrad, q, lp, g, eps, L, rng):
    """One Metropolis-corrected HMC transition. Returns (q, lp, g, accepted, |dH|, divergent)."""
    v = rng.standard_normal(q.shape)
    u = 1.0 - rng.random()  # (0, 1]
    res = leapfrog(q, v, eps, L, f, grad0=g)
    if res.divergent:
        return q, lp, g, False, math.nan, True
    h_old = -lp + 0.5 * float(v @ v)
    h_new = -res.log_prob + 0.5 * float(res.velocity @ res.velocity)
    dh = h_new - h_old
    if not math.isfinite(dh):
        return q, lp, g, False, math.nan, True
    if math.log(u) < -dh:
        return res.position, res.log_prob, res.grad, True, abs(dh), False
    return q, lp, g, False, abs(dh), False


def _block(f: ValueAndGrad, q_full: np.ndarray, idx: np.ndarray) -> ValueAndGrad:
    def fb(qb):
        q = q_full.copy()
        q[idx] = qb
        lp, g = f(q)
        return lp, (None if g is None else g[idx])
    return fb


def _gibbs_update(f, q, lp, g, eps, L, rng, split: int):
    """HMC on ``q[:split]`` with the rest frozen, then on ``q[split:]``."""
    acc = []
    dhs = []
    div = False
    for idx in (np.arange(split), np.arange(split, len(q))):
        if idx.size == 0:
            continue
        fb = _block(f, q, idx)
        qb, lpb, gb, a, dh, d = _hmc_update(fb, q[idx].copy(), lp, g[idx], eps, L, rng)
        if a:
            q = q.copy()
            q[idx] = qb
            lp, g = f(q)
        acc.append(a)
        dhs.append(dh)
        div = div or d
    return q, lp, g, acc[0], float(np.nanmean(dhs)) if not all(np.isnan(dhs)) else math.nan, div


def sample(value_and_grad: ValueAndGrad, q0, config: HmcConfig, split: Optional[int] = None,
           rng: Optional[np.random.Generator] = None, names: Sequence[str] = ()) -> PosteriorSamples:
    """Run one chain on an arbitrary differentiable log-density."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    q = np.array(q0, float)
    lp, g = value_and_grad(q)
    if g is None or not math.isfinite(lp):
        raise ValueError("initial state has non-finite log-density")
    T = config.total_steps
    out = np.empty((T, q.size))
    lps = np.empty(T)
    accepted = np.zeros(T, bool)
    dh = np.full(T, np.nan)
    n_div = 0
    eps, L = config.step_size, config.leapfrog_steps
    for t in range(T):
        if config.update_mode == "gibbs":
            q, lp, g, a, e, d = _gibbs_update(value_and_grad, q, lp, g, eps, L, rng,
                                              split if split is not None else q.size - 2)
        else:
            q, lp, g, a, e, d = _hmc_update(value_and_grad, q, lp, g, eps, L, rng)
        out[t] = q
        lps[t] = lp
        accepted[t] = a
        dh[t] = e
        n_div += d
        if (t + 1) % 500 == 0:
            log.info("hmc step %d/%d  log-post %.4g  acceptance %.3f", t + 1, T, lp, accepted[:t + 1].mean())
    return PosteriorSamples(out, lps, accepted, dh, n_div, config, list(names))


def _names(spec: ModelSpec) -> list[str]:
    return spec.param_names() + ["log_lambda", "log_gamma"]


def hmc_run(spec: ModelSpec, init: ModelParams, dataset: Dataset, hyper: HyperPriors = HyperPriors(),
            config: HmcConfig = HmcConfig()) -> PosteriorSamples:
    target = Target(spec, dataset, hyper)
    lp, _ = target(init.to_vector(), grad=False)
    if not math.isfinite(lp):
        raise ValueError("log-posterior at the initial state is -inf")
    if config.chains > 1:
        return run_chains(spec, init, dataset, hyper, config)[0]
    return sample(target, init.to_vector(), config, split=spec.P, names=_names(spec))


def _chain_job(args):
    spec_json, init_vec, ds, hyper, config, seq = args
    spec = ModelSpec.from_json(spec_json)
    target = Target(spec, ds, hyper)
    return sample(target, init_vec, config, split=spec.P, rng=np.random.default_rng(seq), names=_names(spec))


def run_chains(spec: ModelSpec, init: ModelParams, dataset: Dataset, hyper: HyperPriors = HyperPriors(),
               config: HmcConfig = HmcConfig()) -> list[PosteriorSamples]:
    """Independent chains with spawned seed streams, ordered by chain index."""
    seqs = np.random.SeedSequence(config.seed).spawn(config.chains)
    jobs = [(spec.to_json(), init.to_vector(), dataset, hyper, config, s) for s in seqs]
    with ProcessPoolExecutor(max_workers=config.chains) as pool:
        return list(pool.map(_chain_job, jobs))


def gibbs_step(spec: ModelSpec, state: ModelParams, dataset: Dataset, hyper: HyperPriors = HyperPriors(),
               config: HmcConfig = HmcConfig(update_mode="gibbs"),
               rng: Optional[np.random.Generator] = None) -> ModelParams:
    """One theta-block then one precision-block HMC update, each Metropolis-tested."""
    target = Target(spec, dataset, hyper)
    q = state.to_vector()
    lp, g = target(q)
    if g is None:
        raise ValueError("log-posterior at the current state is -inf")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    q, *_ = _gibbs_update(target, q, lp, g, config.step_size, config.leapfrog_steps, rng, spec.P)
    return ModelParams.from_vector(q)
