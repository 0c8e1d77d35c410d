"""Parametrized right-hand sides ``dx/dt = A phi(x) + f_w(x)``.

A model is described by a :class:`ModelSpec` (dictionary, coefficient mask,
optional tanh MLP closure, or a built-in known-form system) and evaluated at a
flat parameter vector ``theta``. The flattening order is

1. masked dictionary coefficients, row-major over ``(equation, feature)``;
2. free parameters of a built-in system, in declaration order;
3. closure weights, layer by layer (weight matrix row-major, then bias).

Every evaluation here works on a batch of states of shape ``(B, D)``; the
single-state functions :func:`eval_rhs` and :func:`vjp_rhs` are thin wrappers.
Derivatives are closed-form (monomials, sin/cos, tanh backprop).
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from math import comb
from typing import Optional, Sequence

import numpy as np

TRANSFORMS = ("sin", "cos")


class NonFiniteError(FloatingPointError):
    """Raised when a right-hand side evaluation overflows or produces NaN."""


# ---------------------------------------------------------------------------
# feature library
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureLibrary:
    """Ordered monomial features followed by unary sin/cos transforms."""

    dim: int
    exponents: tuple[tuple[int, ...], ...]
    transforms: tuple[tuple[str, int], ...] = ()

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dimension must be >= 1")
        seen = set()
        for e in self.exponents:
            if len(e) != self.dim or min(e) < 0:
                raise ValueError(f"bad exponent vector {e!r}")
            if e in seen:
                raise ValueError(f"duplicate feature {e!r}")
            seen.add(e)
        for t in self.transforms:
            kind, j = t
            if kind not in TRANSFORMS or not 0 <= j < self.dim:
                raise ValueError(f"bad transform {t!r}")
            if t in seen:
                raise ValueError(f"duplicate transform descriptor {kind}(x{j + 1})")
            seen.add(t)

    @property
    def n_monomials(self) -> int:
        return len(self.exponents)

    @property
    def K(self) -> int:
        return len(self.exponents) + len(self.transforms)

    def names(self, var_names: Optional[Sequence[str]] = None) -> list[str]:
        var_names = var_names or [f"x{j + 1}" for j in range(self.dim)]
        out = []
        for e in self.exponents:
            parts = []
            for j, p in enumerate(e):
                if p == 1:
                    parts.append(var_names[j])
                elif p > 1:
                    parts.append(f"{var_names[j]}^{p}")
            out.append("*".join(parts) if parts else "1")
        out += [f"{kind}({var_names[j]})" for kind, j in self.transforms]
        return out

    def evaluate(self, X: np.ndarray) -> np.ndarray:
        """Feature matrix ``(B, K)`` for states ``X`` of shape ``(B, D)``."""
        X = np.atleast_2d(X)
        cols = []
        for e in self.exponents:
            col = np.ones(X.shape[0])
            for j, p in enumerate(e):
                if p:
                    col = col * X[:, j] ** p
            cols.append(col)
        for kind, j in self.transforms:
            cols.append(np.sin(X[:, j]) if kind == "sin" else np.cos(X[:, j]))
        if not cols:
            return np.zeros((X.shape[0], 0))
        return np.stack(cols, axis=1)

    def jacobian(self, X: np.ndarray) -> np.ndarray:
        """Feature derivatives ``(B, K, D)``."""
        X = np.atleast_2d(X)
        B = X.shape[0]
        J = np.zeros((B, self.K, self.dim))
        for k, e in enumerate(self.exponents):
            for j, p in enumerate(e):
                if p == 0:
                    continue
                col = p * X[:, j] ** (p - 1)
                for l, q in enumerate(e):
                    if l != j and q:
                        col = col * X[:, l] ** q
                J[:, k, j] = col
        for i, (kind, j) in enumerate(self.transforms):
            k = self.n_monomials + i
            J[:, k, j] = np.cos(X[:, j]) if kind == "sin" else -np.sin(X[:, j])
        return J

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "exponents": [list(e) for e in self.exponents],
            "transforms": [[k, j] for k, j in self.transforms],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureLibrary":
        return cls(
            dim=int(d["dim"]),
            exponents=tuple(tuple(int(p) for p in e) for e in d["exponents"]),
            transforms=tuple((str(k), int(j)) for k, j in d.get("transforms", [])),
        )


def graded_lex_exponents(dim: int, max_degree: int) -> list[tuple[int, ...]]:
    """All exponent vectors of total degree <= ``max_degree``.

    Sorted by total degree, then descending lexicographically within a degree,
    so that for two variables degree 2 reads ``x1^2, x1*x2, x2^2``.
    """
    out = []
    for deg in range(max_degree + 1):
        block = [e for e in itertools.product(range(deg + 1), repeat=dim) if sum(e) == deg]
        out.extend(sorted(block, reverse=True))
    return out


def build_feature_library(dim: int, max_degree: int, transforms=()) -> FeatureLibrary:
    if dim < 1:
        raise ValueError("dimension must be >= 1")
    if max_degree < 0:
        raise ValueError("max_degree must be >= 0")
    tr = []
    for t in transforms:
        if isinstance(t, str):
            # "sin:0" shorthand
            kind, j = t.split(":")
            t = (kind, int(j))
        tr.append((str(t[0]), int(t[1])))
    lib = FeatureLibrary(dim, tuple(graded_lex_exponents(dim, max_degree)), tuple(tr))
    assert lib.n_monomials == comb(dim + max_degree, max_degree)
    return lib


# ---------------------------------------------------------------------------
# MLP closure
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MlpClosure:
    """tanh MLP reading ``input_indices`` and adding to ``output_indices``.

    ``hidden`` lists hidden widths; the output layer is linear.
    """

    dim: int
    input_indices: tuple[int, ...]
    output_indices: tuple[int, ...]
    hidden: tuple[int, ...] = (20, 20)

    def __post_init__(self):
        if not self.input_indices or not self.output_indices:
            raise ValueError("closure needs at least one input and one output")
        for j in self.input_indices + self.output_indices:
            if not 0 <= j < self.dim:
                raise ValueError(f"closure index {j} out of range")
        if any(h < 1 for h in self.hidden):
            raise ValueError("layer widths must be positive")

    @property
    def widths(self) -> tuple[int, ...]:
        return (len(self.input_indices),) + tuple(self.hidden) + (len(self.output_indices),)

    @property
    def n_params(self) -> int:
        w = self.widths
        return sum((w[i] + 1) * w[i + 1] for i in range(len(w) - 1))

    def unflatten(self, w: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        layers = []
        pos = 0
        widths = self.widths
        for a, b in zip(widths[:-1], widths[1:]):
            W = w[pos:pos + a * b].reshape(b, a)
            pos += a * b
            bias = w[pos:pos + b]
            pos += b
            layers.append((W, bias))
        return layers

    def init_weights(self, rng: np.random.Generator) -> np.ndarray:
        """Glorot-uniform weights, zero biases."""
        parts = []
        widths = self.widths
        for a, b in zip(widths[:-1], widths[1:]):
            lim = np.sqrt(6.0 / (a + b))
            parts.append(rng.uniform(-lim, lim, size=a * b))
            parts.append(np.zeros(b))
        return np.concatenate(parts)

    def forward(self, w: np.ndarray, Xin: np.ndarray) -> tuple[np.ndarray, list]:
        """Network output ``(B, n_out)`` and the hidden activations."""
        h = Xin
        acts = [h]
        layers = self.unflatten(w)
        for W, b in layers[:-1]:
            h = np.tanh(h @ W.T + b)
            acts.append(h)
        W, b = layers[-1]
        return h @ W.T + b, acts

    def vjp(self, w: np.ndarray, Xin: np.ndarray, cot: np.ndarray):
        """Cotangents w.r.t. inputs ``(B, n_in)`` and weights (summed over batch)."""
        _, acts = self.forward(w, Xin)
        layers = self.unflatten(w)
        grads = []
        g = cot
        for li in range(len(layers) - 1, -1, -1):
            W, _ = layers[li]
            h_in = acts[li]
            grads.append((g.T @ h_in, g.sum(axis=0)))
            g = g @ W
            if li > 0:
                g = g * (1.0 - h_in ** 2)
        flat = []
        for gW, gb in reversed(grads):
            flat.append(gW.ravel())
            flat.append(gb)
        return g, np.concatenate(flat)

    def to_dict(self) -> dict:
        return {
            "input_indices": list(self.input_indices),
            "output_indices": list(self.output_indices),
            "hidden": list(self.hidden),
            "activation": "tanh",
        }


# ---------------------------------------------------------------------------
# built-in known-form systems
# ---------------------------------------------------------------------------

GLYCOLYSIS_PARAMS = ("J0", "k1", "k2", "k3", "k4", "k5", "k6", "k", "kappa", "q", "K_I", "phi", "N", "A")
GLYCOLYSIS_STATES = ("S1", "S2", "S3", "S4", "N2", "A3", "S4ex")


def glycolysis_rhs(S: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Yeast glycolysis right-hand side for states ``(B, 7)`` in physical units."""
    J0, k1, k2, k3, k4, k5, k6, k, kappa, q, KI, phi, Ntot, Atot = p
    S1, S2, S3, S4, N2, A3, S4ex = S.T
    r = np.maximum(A3, 0.0) / KI
    with np.errstate(divide="ignore", invalid="ignore"):
        P = np.where(r > 0, r ** q, 0.0)
    v1 = k1 * S1 * A3 / (1.0 + P)
    N1 = Ntot - N2
    A2 = Atot - A3
    u1 = k2 * S2 * N1
    u2 = k6 * S2 * N2
    u3 = k3 * S3 * A2
    u4 = k4 * S4 * N2
    u5 = kappa * (S4 - S4ex)
    u6 = k5 * A3
    u7 = k * S4ex
    return np.stack([
        J0 - v1,
        2 * v1 - u1 - u2,
        u1 - u3,
        u3 - u4 - u5,
        u1 - u4 - u2,
        -2 * v1 + 2 * u3 - u6,
        phi * u5 - u7,
    ], axis=1)


def glycolysis_vjp(S: np.ndarray, p: np.ndarray, c: np.ndarray):
    """Reverse-mode derivative of :func:`glycolysis_rhs`.

    Returns ``(gS (B, 7), gp (14,))`` with ``gp`` summed over the batch.
    """
    J0, k1, k2, k3, k4, k5, k6, k, kappa, q, KI, phi, Ntot, Atot = p
    S1, S2, S3, S4, N2, A3, S4ex = S.T
    c0, c1, c2, c3, c4, c5, c6 = c.T
    r = np.maximum(A3, 0.0) / KI
    pos = r > 0
    rs = np.where(pos, r, 1.0)
    P = np.where(pos, rs ** q, 0.0)
    H = 1.0 + P
    v1 = k1 * S1 * A3 / H
    N1 = Ntot - N2
    A2 = Atot - A3

    gv1 = -c0 + 2 * c1 - 2 * c5
    gu1 = -c1 + c2 + c4
    gu2 = -c1 - c4
    gu3 = -c2 + c3 + 2 * c5
    gu4 = -c3 - c4
    gu5 = -c3 + phi * c6
    gu6 = -c5
    gu7 = -c6

    gS = np.zeros_like(S)
    gp = np.zeros(14)
    gp[0] = c0.sum()
    gp[11] = (kappa * (S4 - S4ex) * c6).sum()
    # u1 = k2 S2 N1
    gp[2] = (gu1 * S2 * N1).sum()
    gS2 = gu1 * k2 * N1
    gN1 = gu1 * k2 * S2
    # u2 = k6 S2 N2
    gp[6] = (gu2 * S2 * N2).sum()
    gS2 = gS2 + gu2 * k6 * N2
    gN2 = gu2 * k6 * S2
    # u3 = k3 S3 A2
    gp[3] = (gu3 * S3 * A2).sum()
    gS3 = gu3 * k3 * A2
    gA2 = gu3 * k3 * S3
    # u4 = k4 S4 N2
    gp[4] = (gu4 * S4 * N2).sum()
    gS4 = gu4 * k4 * N2
    gN2 = gN2 + gu4 * k4 * S4
    # u5 = kappa (S4 - S4ex)
    gp[8] = (gu5 * (S4 - S4ex)).sum()
    gS4 = gS4 + gu5 * kappa
    gS4ex = -gu5 * kappa
    # u6 = k5 A3
    gp[5] = (gu6 * A3).sum()
    gA3 = gu6 * k5
    # u7 = k S4ex
    gp[7] = (gu7 * S4ex).sum()
    gS4ex = gS4ex + gu7 * k
    # N1 = N - N2, A2 = A - A3
    gp[12] = gN1.sum()
    gN2 = gN2 - gN1
    gp[13] = gA2.sum()
    gA3 = gA3 - gA2
    # v1 = k1 S1 A3 / H
    gp[1] = (gv1 * S1 * A3 / H).sum()
    gS1 = gv1 * k1 * A3 / H
    gA3 = gA3 + gv1 * k1 * S1 / H
    gP = -gv1 * v1 / H
    # P = (A3 / KI)^q for A3 > 0
    gr = np.where(pos, gP * q * P / rs, 0.0)
    gp[9] = np.where(pos, gP * P * np.log(rs), 0.0).sum()
    gA3 = gA3 + gr / KI
    gp[10] = (-gr * np.maximum(A3, 0.0) / KI ** 2).sum()

    gS[:, 0] = gS1
    gS[:, 1] = gS2
    gS[:, 2] = gS3
    gS[:, 3] = gS4
    gS[:, 4] = gN2
    gS[:, 5] = gA3
    gS[:, 6] = gS4ex
    return gS, gp


BUILTINS = {
    "glycolysis": (GLYCOLYSIS_PARAMS, GLYCOLYSIS_STATES, glycolysis_rhs, glycolysis_vjp),
}


@dataclass(frozen=True)
class BuiltinSystem:
    """A known-form right-hand side with some free scalar parameters.

    Free parameter ``p`` is represented in ``theta`` as ``value / scale[p]``;
    fixed ones are held at ``values[p]``. ``state_scale`` is the
    normalization vector of the training data: the model integrates
    ``x / state_scale`` while the physics is evaluated in physical units.
    """

    name: str
    values: tuple[float, ...]
    free: tuple[bool, ...]
    scale: tuple[float, ...]
    state_scale: tuple[float, ...]

    def __post_init__(self):
        if self.name not in BUILTINS:
            raise ValueError(f"unknown built-in system {self.name!r}")
        n = len(BUILTINS[self.name][0])
        if not (len(self.values) == len(self.free) == len(self.scale) == n):
            raise ValueError(f"{self.name} expects {n} parameters")
        if len(self.state_scale) != len(BUILTINS[self.name][1]):
            raise ValueError("state_scale length mismatch")

    @property
    def param_names(self) -> tuple[str, ...]:
        return BUILTINS[self.name][0]

    @property
    def n_free(self) -> int:
        return int(sum(self.free))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "values": list(self.values),
            "free": list(self.free),
            "scale": list(self.scale),
            "state_scale": list(self.state_scale),
        }


# ---------------------------------------------------------------------------
# model spec and params
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ModelSpec:
    dim: int
    library: Optional[FeatureLibrary] = None
    mask: Optional[np.ndarray] = None
    constants: Optional[np.ndarray] = None
    closure: Optional[MlpClosure] = None
    builtin: Optional[BuiltinSystem] = None
    var_names: tuple[str, ...] = ()

    def __post_init__(self):
        K = self.library.K if self.library is not None else 0
        if self.library is not None and self.library.dim != self.dim:
            raise ValueError("library dimension mismatch")
        mask = np.ones((self.dim, K), bool) if self.mask is None else np.asarray(self.mask, bool)
        const = np.zeros((self.dim, K)) if self.constants is None else np.asarray(self.constants, float)
        if mask.shape != (self.dim, K) or const.shape != (self.dim, K):
            raise ValueError(f"mask/constants must have shape {(self.dim, K)}")
        mask.setflags(write=False)
        const.setflags(write=False)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "constants", const)
        if self.closure is not None and self.closure.dim != self.dim:
            raise ValueError("closure dimension mismatch")
        if self.builtin is not None and len(self.builtin.state_scale) != self.dim:
            raise ValueError("built-in system dimension mismatch")
        if not self.var_names:
            names = BUILTINS[self.builtin.name][1] if self.builtin else [f"x{j + 1}" for j in range(self.dim)]
            object.__setattr__(self, "var_names", tuple(names))

    @property
    def K(self) -> int:
        return self.library.K if self.library is not None else 0

    @property
    def n_dict(self) -> int:
        return int(self.mask.sum())

    @property
    def n_builtin(self) -> int:
        return self.builtin.n_free if self.builtin is not None else 0

    @property
    def n_closure(self) -> int:
        return self.closure.n_params if self.closure is not None else 0

    @property
    def P(self) -> int:
        return self.n_dict + self.n_builtin + self.n_closure

    def param_names(self) -> list[str]:
        names = []
        if self.library is not None:
            feats = self.library.names(self.var_names)
            for i, k in zip(*np.nonzero(self.mask)):
                names.append(f"d{self.var_names[i]}/dt:{feats[k]}")
        if self.builtin is not None:
            names += [n for n, f in zip(self.builtin.param_names, self.builtin.free) if f]
        names += [f"w{i}" for i in range(self.n_closure)]
        return names

    def split(self, theta: np.ndarray):
        """``theta`` -> (coefficient matrix A, built-in physical params, closure weights)."""
        theta = np.asarray(theta, float)
        if theta.shape != (self.P,):
            raise ValueError(f"theta must have length {self.P}, got {theta.shape}")
        A = self.constants.copy()
        nd, nb = self.n_dict, self.n_builtin
        A[self.mask] = theta[:nd]
        bp = None
        if self.builtin is not None:
            bp = np.array(self.builtin.values, float)
            free = np.array(self.builtin.free)
            bp[free] = theta[nd:nd + nb] * np.array(self.builtin.scale)[free]
        return A, bp, theta[nd + nb:]

    def join_grad(self, gA: np.ndarray, gbp: Optional[np.ndarray], gw: Optional[np.ndarray]) -> np.ndarray:
        """Map gradients of (A, physical built-in params, weights) onto ``theta``."""
        parts = [gA[self.mask]]
        if self.builtin is not None:
            free = np.array(self.builtin.free)
            parts.append(gbp[free] * np.array(self.builtin.scale)[free])
        if self.closure is not None:
            parts.append(gw)
        return np.concatenate(parts) if parts else np.zeros(0)

    def initial_theta(self, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """Zero dictionary block, built-in values, Glorot closure weights."""
        parts = [np.zeros(self.n_dict)]
        if self.builtin is not None:
            free = np.array(self.builtin.free)
            parts.append(np.array(self.builtin.values)[free] / np.array(self.builtin.scale)[free])
        if self.closure is not None:
            rng = rng if rng is not None else np.random.default_rng(0)
            parts.append(self.closure.init_weights(rng))
        return np.concatenate(parts)

    def with_state_scale(self, sigma) -> "ModelSpec":
        """Same model for data normalized by ``sigma`` (built-in systems only)."""
        if self.builtin is None:
            return self
        b = self.builtin
        nb = BuiltinSystem(b.name, b.values, b.free, b.scale, tuple(float(s) for s in sigma))
        return ModelSpec(self.dim, self.library, self.mask, self.constants, self.closure, nb, self.var_names)

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "_header": [
                "theta layout: masked dictionary coefficients row-major over (equation, feature),",
                "then free built-in parameters divided by their scale, then closure weights",
                "layer by layer (weight matrix row-major [out, in], then bias).",
            ],
            "dim": self.dim,
            "var_names": list(self.var_names),
            "library": self.library.to_dict() if self.library is not None else None,
            "mask": [bool(v) for v in self.mask.ravel()],
            "constants": [float(v) for v in self.constants.ravel()],
            "closure": self.closure.to_dict() if self.closure is not None else None,
            "builtin": self.builtin.to_dict() if self.builtin is not None else None,
            "n_params": self.P,
            "param_names": self.param_names(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        dim = int(d["dim"])
        lib = FeatureLibrary.from_dict(d["library"]) if d.get("library") else None
        K = lib.K if lib is not None else 0
        mask = np.array(d.get("mask", [True] * dim * K), bool).reshape(dim, K)
        const = np.array(d.get("constants", [0.0] * dim * K), float).reshape(dim, K)
        closure = None
        if d.get("closure"):
            c = d["closure"]
            closure = MlpClosure(dim, tuple(c["input_indices"]), tuple(c["output_indices"]), tuple(c["hidden"]))
        builtin = None
        if d.get("builtin"):
            b = d["builtin"]
            builtin = BuiltinSystem(b["name"], tuple(map(float, b["values"])), tuple(map(bool, b["free"])),
                                    tuple(map(float, b["scale"])), tuple(map(float, b["state_scale"])))
        return cls(dim, lib, mask, const, closure, builtin, tuple(d.get("var_names", ())))

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Full sampler state ``(theta, log lambda, log gamma)``."""

    theta: np.ndarray
    log_lambda: float = 0.0
    log_gamma: float = 0.0

    def __post_init__(self):
        theta = np.array(self.theta, float)
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "log_lambda", float(self.log_lambda))
        object.__setattr__(self, "log_gamma", float(self.log_gamma))
        if not (np.all(np.isfinite(theta)) and np.isfinite(self.log_lambda) and np.isfinite(self.log_gamma)):
            raise ValueError("model parameters must be finite")

    @property
    def lam(self) -> float:
        return float(np.exp(self.log_lambda))

    @property
    def gamma(self) -> float:
        return float(np.exp(self.log_gamma))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.theta, [self.log_lambda, self.log_gamma]])

    @classmethod
    def from_vector(cls, v) -> "ModelParams":
        v = np.asarray(v, float)
        return cls(v[:-2], v[-2], v[-1])


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def rhs_batch(spec: ModelSpec, theta, X: np.ndarray) -> np.ndarray:
    """Right-hand side for a batch of states ``(B, D)``."""
    A, bp, w = spec.split(theta)
    X = np.atleast_2d(np.asarray(X, float))
    with np.errstate(over="ignore", invalid="ignore"):
        F = np.zeros_like(X)
        if spec.library is not None:
            F = F + spec.library.evaluate(X) @ A.T
        if spec.builtin is not None:
            s = np.array(spec.builtin.state_scale)
            F = F + BUILTINS[spec.builtin.name][2](X * s, bp) / s
        if spec.closure is not None:
            c = spec.closure
            out, _ = c.forward(w, X[:, list(c.input_indices)])
            F[:, list(c.output_indices)] += out
    return F


def rhs_vjp_batch(spec: ModelSpec, theta, X: np.ndarray, C: np.ndarray):
    """Cotangent pullback for a batch: ``(gX (B, D), gtheta (P,))``.

    The parameter cotangent is summed over the batch.
    """
    A, bp, w = spec.split(theta)
    X = np.atleast_2d(np.asarray(X, float))
    C = np.atleast_2d(np.asarray(C, float))
    gX = np.zeros_like(X)
    gA = np.zeros_like(A)
    gbp = gw = None
    with np.errstate(over="ignore", invalid="ignore"):
        if spec.library is not None:
            Phi = spec.library.evaluate(X)
            gA = C.T @ Phi
            # gX_j = sum_i C_i sum_k A_ik dphi_k/dx_j
            gX = gX + np.einsum("bk,bkj->bj", C @ A, spec.library.jacobian(X))
        if spec.builtin is not None:
            s = np.array(spec.builtin.state_scale)
            gS, gbp = BUILTINS[spec.builtin.name][3](X * s, bp, C / s)
            gX = gX + gS * s
        if spec.closure is not None:
            c = spec.closure
            gin, gw = c.vjp(w, X[:, list(c.input_indices)], C[:, list(c.output_indices)])
            gX[:, list(c.input_indices)] += gin
    return gX, spec.join_grad(gA, gbp, gw)


def eval_rhs(spec: ModelSpec, theta, x, t: float = 0.0) -> np.ndarray:
    """``A phi(x) + f_w(x)`` at one state. Raises :class:`NonFiniteError` on overflow."""
    x = np.asarray(x, float)
    if x.shape != (spec.dim,):
        raise ValueError(f"state must have shape ({spec.dim},)")
    out = rhs_batch(spec, theta, x[None, :])[0]
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"non-finite right-hand side at x={x}")
    return out


def vjp_rhs(spec: ModelSpec, theta, x, t: float, cotangent):
    """``(c^T df/dx, c^T df/dtheta)`` at one state."""
    gX, gth = rhs_vjp_batch(spec, theta, np.asarray(x, float)[None, :], np.asarray(cotangent, float)[None, :])
    return gX[0], gth


# ---------------------------------------------------------------------------
# coefficient (de)normalization
# ---------------------------------------------------------------------------


def _dictionary_factors(spec: ModelSpec, sigma) -> np.ndarray:
    """Per-theta factor f with physical = normalized * f."""
    sigma = np.asarray(sigma, float)
    if sigma.shape != (spec.dim,) or np.any(~(sigma > 0)):
        raise ValueError("sigma must be a strictly positive vector of length D")
    if spec.library is not None and spec.library.transforms and spec.mask[:, spec.library.n_monomials:].any():
        raise ValueError("coefficients of sin/cos features have no physical-unit form")
    fac = np.ones(spec.P)
    if spec.library is not None:
        E = np.array(spec.library.exponents, float).reshape(-1, spec.dim)
        F = np.ones((spec.dim, spec.K))
        F[:, :len(E)] = sigma[:, None] / np.prod(sigma[None, :] ** E, axis=1)[None, :]
        fac[:spec.n_dict] = F[spec.mask]
    return fac


def denormalize_coefficients(spec: ModelSpec, theta_normalized, sigma) -> np.ndarray:
    """Dictionary coefficients in physical units.

    For data ``x~ = x / sigma`` the coefficient of ``prod x_j^e_j`` in
    equation ``i`` maps as ``a = a~ * sigma_i / prod sigma_j^e_j``. Built-in and
    closure parameters pass through unchanged.
    """
    return np.asarray(theta_normalized, float) * _dictionary_factors(spec, sigma)


def normalize_coefficients(spec: ModelSpec, theta_physical, sigma) -> np.ndarray:
    return np.asarray(theta_physical, float) / _dictionary_factors(spec, sigma)


def normalize_constants(spec: ModelSpec, sigma) -> ModelSpec:
    """Rescale fixed dictionary constants into normalized units."""
    if spec.library is None or not np.any(spec.constants):
        return spec
    full = ModelSpec(spec.dim, spec.library, np.ones_like(spec.mask), None, None, None, spec.var_names)
    const = normalize_coefficients(full, spec.constants.ravel(), sigma).reshape(spec.constants.shape)
    return ModelSpec(spec.dim, spec.library, spec.mask, const, spec.closure, spec.builtin, spec.var_names)


def physical_theta(spec: ModelSpec, theta_normalized, sigma) -> np.ndarray:
    """Dictionary coefficients denormalized, built-in parameters in their own units.

    Closure weights are returned unchanged (they act on normalized states).
    """
    out = denormalize_coefficients(spec, theta_normalized, sigma)
    if spec.builtin is not None:
        nd, nb = spec.n_dict, spec.n_builtin
        free = np.array(spec.builtin.free)
        out[..., nd:nd + nb] = out[..., nd:nd + nb] * np.array(spec.builtin.scale)[free]
    return out
