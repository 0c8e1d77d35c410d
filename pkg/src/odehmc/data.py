"""Time-series loading, observation pairs and scale normalization."""
from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional, Sequence

import numpy as np

from .integrate import SegmentPlan, n_substeps


class DataError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    names: tuple[str, ...] = ()
    units: Optional[dict] = None

    def __post_init__(self):
        t = np.asarray(self.times, float)
        X = np.asarray(self.states, float)
        if X.ndim != 2 or t.shape != (X.shape[0],):
            raise DataError("states must be (m, D) with one time per row")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(X))):
            raise DataError("trajectory contains non-finite values")
        bad = np.nonzero(np.diff(t) <= 0)[0]
        if bad.size:
            raise DataError(f"times not strictly increasing at row {bad[0] + 1}")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "states", X)
        if not self.names:
            object.__setattr__(self, "names", tuple(f"x{j + 1}" for j in range(X.shape[1])))
        elif len(self.names) != X.shape[1]:
            raise DataError("one name per state column required")

    @property
    def m(self) -> int:
        return len(self.times)

    @property
    def D(self) -> int:
        return self.states.shape[1]


def save_trajectory(traj: Trajectory, path_or_buf) -> None:
    """CSV with header ``t,<names>``; floats written with shortest round-trip repr."""
    lines = [",".join(("t",) + tuple(traj.names))]
    for t, row in zip(traj.times, traj.states):
        lines.append(",".join(repr(float(v)) for v in (t, *row)))
    text = "\n".join(lines) + "\n"
    if hasattr(path_or_buf, "write"):
        path_or_buf.write(text)
    else:
        with open(path_or_buf, "w", newline="") as fh:
            fh.write(text)


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def load_trajectory(source) -> Trajectory:
    """Parse a CSV stream or path: header row, first column time, then D states.

    Errors carry the 1-based line number of the offending row.
    """
    if isinstance(source, (str, os.PathLike)):
        with open(source, newline="") as fh:
            return load_trajectory(io.StringIO(fh.read()))
    reader = csv.reader(source)
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("empty file") from None
    header = [h.strip() for h in header]
    if len(header) < 2:
        raise DataError("need a time column and at least one state column")
    if all(_is_number(h) for h in header):
        raise DataError("header row required (first row is numeric)")
    rows = []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataError(f"row {lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            vals = [float(c) for c in row]
        except ValueError:
            raise DataError(f"row {lineno}: non-numeric cell") from None
        if not all(math.isfinite(v) for v in vals):
            raise DataError(f"row {lineno}: non-finite value")
        if rows and vals[0] <= rows[-1][0]:
            kind = "duplicated timestamp" if vals[0] == rows[-1][0] else "time goes backwards"
            raise DataError(f"row {lineno}: {kind} ({vals[0]!r})")
        rows.append(vals)
    if not rows:
        raise DataError("no data rows")
    arr = np.array(rows)
    return Trajectory(arr[:, 0], arr[:, 1:], tuple(header[1:]))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observation pairs ``(x(t_i), x(t_i + dt_i))`` with per-pair RK4 plans."""

    x_start: np.ndarray
    x_end: np.ndarray
    t0: np.ndarray
    delta_t: np.ndarray
    n_steps: np.ndarray
    sigma: np.ndarray
    normalized: bool = False
    dt_target: Optional[float] = None

    def __post_init__(self):
        if self.x_start.shape != self.x_end.shape or self.x_start.ndim != 2:
            raise DataError("x_start and x_end must both be (n, D)")
        if np.any(~(self.delta_t > 0)):
            raise DataError("every pair needs a positive delta_t")
        if np.any(self.n_steps < 1):
            raise DataError("every pair needs at least one sub-step")

    @property
    def n(self) -> int:
        return self.x_start.shape[0]

    @property
    def D(self) -> int:
        return self.x_start.shape[1]

    @property
    def h(self) -> np.ndarray:
        return self.delta_t / self.n_steps

    @property
    def plans(self) -> list[SegmentPlan]:
        return [SegmentPlan(float(t), float(d), int(k)) for t, d, k in zip(self.t0, self.delta_t, self.n_steps)]

    def pairs(self) -> Iterator[tuple[np.ndarray, np.ndarray, SegmentPlan]]:
        for i, plan in enumerate(self.plans):
            yield self.x_start[i], self.x_end[i], plan

    def subset(self, idx) -> "Dataset":
        return replace(self, x_start=self.x_start[idx], x_end=self.x_end[idx], t0=self.t0[idx],
                       delta_t=self.delta_t[idx], n_steps=self.n_steps[idx])


def build_pairs(traj: Trajectory, dt_target: float) -> Dataset:
    """Consecutive pairs with ``N_i = max(1, ceil(dt_i / dt_target))``."""
    if not dt_target > 0:
        raise DataError("dt_target must be positive")
    if traj.m < 2:
        raise DataError("need at least two observations")
    dt = np.diff(traj.times)
    return Dataset(
        x_start=traj.states[:-1].copy(),
        x_end=traj.states[1:].copy(),
        t0=traj.times[:-1].copy(),
        delta_t=dt,
        n_steps=n_substeps(dt, dt_target),
        sigma=np.ones(traj.D),
        normalized=False,
        dt_target=float(dt_target),
    )


def concat(datasets: Sequence[Dataset]) -> Dataset:
    """Stack pairs from several trajectories (no pair spans two sources)."""
    first = datasets[0]
    return replace(
        first,
        x_start=np.concatenate([d.x_start for d in datasets]),
        x_end=np.concatenate([d.x_end for d in datasets]),
        t0=np.concatenate([d.t0 for d in datasets]),
        delta_t=np.concatenate([d.delta_t for d in datasets]),
        n_steps=np.concatenate([d.n_steps for d in datasets]),
    )


def normalize(ds: Dataset) -> tuple[Dataset, np.ndarray]:
    """Divide states by the per-dimension population std of the start states.

    The mean is not removed. Returns the normalized dataset (whose ``sigma``
    accumulates over repeated calls) and the scale applied by this call.
    """
    sigma = ds.x_start.std(axis=0)
    for j, s in enumerate(sigma):
        if not s > 0:
            raise DataError(f"dimension {j} has zero spread; cannot normalize")
    out = replace(ds, x_start=ds.x_start / sigma, x_end=ds.x_end / sigma,
                  sigma=ds.sigma * sigma, normalized=True)
    return out, sigma


def denormalize(ds: Dataset) -> Dataset:
    return replace(ds, x_start=ds.x_start * ds.sigma, x_end=ds.x_end * ds.sigma,
                   sigma=np.ones(ds.D), normalized=False)


def add_noise(traj: Trajectory, relative_level: float, seed: int) -> Trajectory:
    """Gaussian noise with sd = level * per-dimension std of the clean states."""
    if relative_level < 0:
        raise DataError("noise level must be non-negative")
    if relative_level == 0:
        return replace(traj, states=traj.states.copy())
    sd = relative_level * traj.states.std(axis=0)
    return add_absolute_noise(traj, sd, seed)


def add_absolute_noise(traj: Trajectory, sd, seed: int) -> Trajectory:
    sd = np.broadcast_to(np.asarray(sd, float), (traj.D,))
    if np.any(sd < 0):
        raise DataError("noise sd must be non-negative")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(traj.states.shape) * sd
    return replace(traj, states=traj.states + noise)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def write_manifest(path, csv_files: Sequence[str], dt_target: float, seed: Optional[int], sigma,
                   extra: Optional[dict] = None) -> None:
    base = os.path.dirname(os.path.abspath(path))
    doc = {
        "csv": [os.path.relpath(os.path.abspath(f), base) for f in csv_files],
        "dt_target": float(dt_target),
        "seed": seed,
        "sigma": [float(s) for s in sigma],
        "normalization": "x / sigma, sigma = population std of start states",
    }
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(path) -> tuple[Dataset, dict]:
    """Rebuild the normalized training set described by a manifest."""
    with open(path) as fh:
        doc = json.load(fh)
    base = os.path.dirname(os.path.abspath(path))
    files = doc["csv"] if isinstance(doc["csv"], list) else [doc["csv"]]
    parts = [build_pairs(load_trajectory(os.path.join(base, f)), doc["dt_target"]) for f in files]
    ds, _ = normalize(concat(parts))
    if "sigma" in doc and not np.allclose(ds.sigma, doc["sigma"], rtol=1e-12, atol=0):
        raise DataError("manifest sigma does not match the data it references")
    return ds, doc
