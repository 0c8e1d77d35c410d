"""Batched segment integration: compiled core with a numpy fallback.

The compiled extension ``odehmc._rk4core`` is used when it imports; otherwise
the pure-numpy implementation in :mod:`odehmc._fallback` is used. Both expose
the same three operations:

``sse_and_grad``
    sum over segments of ``||x_end - h_theta(x_start)||^2`` and its gradient
    with respect to ``theta`` (exact discrete adjoint of RK4);
``propagate``
    endpoint of every segment;
``trajectory``
    one state chained through a grid of segments.

Divergent segments yield ``inf`` (loss) or ``NaN`` rows (states).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _fallback

try:
    from . import _rk4core
except ImportError:  # pragma: no cover - depends on build
    _rk4core = None

BACKEND = "compiled" if _rk4core is not None else "python"


def available_backends() -> list[str]:
    return ["compiled", "python"] if _rk4core is not None else ["python"]


def set_backend(name: str) -> None:
    global BACKEND
    if name not in available_backends():
        raise ValueError(f"backend {name!r} not available (have {available_backends()})")
    BACKEND = name


@dataclass
class PackedModel:
    D: int
    K: int
    Km: int
    md: int
    A: np.ndarray
    exps: np.ndarray
    tr_kind: np.ndarray
    tr_coord: np.ndarray
    builtin: int
    bp: np.ndarray
    sscale: np.ndarray
    nl: int
    widths: np.ndarray
    offs: np.ndarray
    w: np.ndarray
    in_idx: np.ndarray
    out_idx: np.ndarray
    maxw: int


def _i32(v):
    a = np.ascontiguousarray(v, dtype=np.int32).ravel()
    return a if a.size else np.zeros(1, np.int32)


def pack(spec, theta) -> PackedModel:
    # the compiled kernel takes writable buffers; parameter vectors may be frozen
    A, bp, w = spec.split(np.array(theta, float))
    D = spec.dim
    lib = spec.library
    K = lib.K if lib is not None else 0
    Km = lib.n_monomials if lib is not None else 0
    exps = np.array(lib.exponents, np.int32).reshape(Km, D) if Km else np.zeros((0, D), np.int32)
    md = int(exps.max()) if exps.size else 0
    tr = lib.transforms if lib is not None else ()
    if spec.closure is not None:
        c = spec.closure
        widths = np.array(c.widths, np.int32)
        offs = np.zeros(len(widths), np.int32)
        for i in range(len(widths) - 1):
            offs[i + 1] = offs[i] + (widths[i] + 1) * widths[i + 1]
        nl, maxw = len(widths) - 1, int(widths.max())
        in_idx, out_idx = c.input_indices, c.output_indices
        w = np.ascontiguousarray(w, float)
    else:
        widths = offs = np.zeros(1, np.int32)
        nl, maxw, in_idx, out_idx = 0, 1, (), ()
        w = np.zeros(1)
    if spec.builtin is not None:
        builtin = 0
        bp = np.ascontiguousarray(bp, float)
        sscale = np.array(spec.builtin.state_scale, float)
    else:
        builtin, bp, sscale = -1, np.zeros(1), np.ones(D)
    return PackedModel(
        D=D, K=K, Km=Km, md=md,
        A=np.ascontiguousarray(A, float).ravel() if K else np.zeros(1),
        exps=_i32(exps), tr_kind=_i32([0 if k == "sin" else 1 for k, _ in tr]),
        tr_coord=_i32([j for _, j in tr]), builtin=builtin, bp=bp, sscale=sscale,
        nl=nl, widths=_i32(widths), offs=_i32(offs), w=w,
        in_idx=_i32(in_idx), out_idx=_i32(out_idx), maxw=maxw,
    )


def _args(X, h, N):
    return (np.require(X, float, ["C", "W"]), np.require(h, float, ["C", "W"]),
            np.require(N, np.int64, ["C", "W"]))


def sse_and_grad(spec, theta, X0, X1, h, N, grad: bool = True):
    """Returns ``(sse, gradient)``; ``sse`` is ``inf`` if any segment diverges."""
    X0, h, N = _args(X0, h, N)
    X1 = np.require(X1, float, ["C", "W"])
    if BACKEND == "python":
        return _fallback.sse_and_grad(spec, theta, X0, X1, h, N, grad)
    pm = pack(spec, theta)
    sse, gA, gbp, gw = _rk4core.sse_and_grad(pm, X0, X1, h, N, grad)
    if not np.isfinite(sse):
        return np.inf, (np.full(spec.P, np.nan) if grad else None)
    if not grad:
        return sse, None
    gA = gA if spec.K else np.zeros((spec.dim, 0))
    return sse, spec.join_grad(gA, gbp, gw)


def propagate(spec, theta, X0, h, N) -> np.ndarray:
    X0, h, N = _args(X0, h, N)
    if BACKEND == "python":
        return _fallback.propagate(spec, theta, X0, h, N)
    return _rk4core.propagate(pack(spec, theta), X0, h, N)


def trajectory(spec, theta, x0, h, N) -> np.ndarray:
    x0 = np.require(x0, float, ["C", "W"])
    h = np.require(h, float, ["C", "W"])
    N = np.require(N, np.int64, ["C", "W"])
    if BACKEND == "python":
        return _fallback.trajectory(spec, theta, x0, h, N)
    return _rk4core.trajectory(pack(spec, theta), x0, h, N)
