"""Pure-numpy batched RK4 forward/reverse passes.

Segments are sorted by sub-step count (descending) so that sub-step ``k`` only
touches the prefix of segments that still have steps left; every numpy call
then works on a contiguous view.
"""
from __future__ import annotations

import numpy as np

from .dynamics import rhs_batch, rhs_vjp_batch


def _order(N):
    order = np.argsort(-N, kind="stable")
    Ns = N[order]
    max_n = int(Ns[0]) if len(Ns) else 0
    # active[k] = number of segments with more than k sub-steps
    active = [int(np.searchsorted(-Ns, -k, side="left")) for k in range(max_n)]
    return order, active


def propagate(spec, theta, X0, h, N):
    X0 = np.asarray(X0, float)
    order, active = _order(N)
    X = X0[order].copy()
    H = h[order][:, None]
    with np.errstate(over="ignore", invalid="ignore"):
        for k, m in enumerate(active):
            x = X[:m]
            hh = H[:m]
            k1 = rhs_batch(spec, theta, x)
            k2 = rhs_batch(spec, theta, x + 0.5 * hh * k1)
            k3 = rhs_batch(spec, theta, x + 0.5 * hh * k2)
            k4 = rhs_batch(spec, theta, x + hh * k3)
            X[:m] = x + (hh / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    out = np.empty_like(X)
    out[order] = X
    out[~np.all(np.isfinite(out), axis=1)] = np.nan
    return out


def sse_and_grad(spec, theta, X0, X1, h, N, grad=True):
    X0 = np.asarray(X0, float)
    order, active = _order(N)
    X = X0[order].copy()
    H = h[order][:, None]
    tape = []
    with np.errstate(over="ignore", invalid="ignore"):
        for m in active:
            x = X[:m]
            hh = H[:m]
            k1 = rhs_batch(spec, theta, x)
            y2 = x + 0.5 * hh * k1
            k2 = rhs_batch(spec, theta, y2)
            y3 = x + 0.5 * hh * k2
            k3 = rhs_batch(spec, theta, y3)
            y4 = x + hh * k3
            k4 = rhs_batch(spec, theta, y4)
            tape.append((x.copy(), y2, y3, y4))
            X[:m] = x + (hh / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        R = np.asarray(X1, float)[order] - X
        sse = float(np.sum(R * R))
        if not np.isfinite(sse):
            return np.inf, np.full(spec.P, np.nan)
        if not grad:
            return sse, None
        g = np.zeros(spec.P)
        a = -2.0 * R
        for m, (x, y2, y3, y4) in zip(reversed(active), reversed(tape)):
            hh = H[:m]
            am = a[:m]
            ax = am.copy()
            gx, gt = rhs_vjp_batch(spec, theta, y4, (hh / 6.0) * am)
            ax += gx
            g += gt
            gx, gt = rhs_vjp_batch(spec, theta, y3, (hh / 3.0) * am + hh * gx)
            ax += gx
            g += gt
            gx, gt = rhs_vjp_batch(spec, theta, y2, (hh / 3.0) * am + 0.5 * hh * gx)
            ax += gx
            g += gt
            gx, gt = rhs_vjp_batch(spec, theta, x, (hh / 6.0) * am + 0.5 * hh * gx)
            ax += gx
            g += gt
            a[:m] = ax
    return sse, g


def trajectory(spec, theta, x0, h, N):
    x = np.array(x0, float)
    out = np.full((len(h) + 1, len(x)), np.nan)
    out[0] = x
    with np.errstate(over="ignore", invalid="ignore"):
        for i, (hh, n) in enumerate(zip(h, N)):
            for _ in range(int(n)):
                k1 = rhs_batch(spec, theta, x[None])[0]
                k2 = rhs_batch(spec, theta, (x + 0.5 * hh * k1)[None])[0]
                k3 = rhs_batch(spec, theta, (x + 0.5 * hh * k2)[None])[0]
                k4 = rhs_batch(spec, theta, (x + hh * k3)[None])[0]
                x = x + (hh / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if not np.all(np.isfinite(x)):
                break
            out[i + 1] = x
    return out
