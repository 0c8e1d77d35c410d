# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled RK4 forward/reverse kernels over batches of observation segments.

Mirrors ``odehmc._fallback``; the model arrives packed as flat arrays (see
``odehmc.kernels.pack``).
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sin, cos, log, pow, expm1, fabs, isfinite, NAN
from libc.stdlib cimport malloc, free
from libc.string cimport memset

cnp.import_array()


ctypedef struct Model:
    int D
    int K
    int Km
    int md
    const double* A
    const int* exps
    const int* tr_kind
    const int* tr_coord
    int builtin
    const double* bp
    const double* sscale
    int nl
    const int* widths
    const int* offs
    const double* w
    const int* in_idx
    const int* out_idx
    int maxw
    double* pw
    double* phi
    double* acts
    double* g0
    double* g1
    double* scratch
    int AS


cdef inline double _tanh(double x) noexcept nogil:
    # expm1 form keeps full relative accuracy near 0; glibc tanh is ~4x slower here
    cdef double e
    if fabs(x) > 20.0:
        return 1.0 if x > 0 else -1.0
    e = expm1(2.0 * x)
    return e / (e + 2.0)


cdef inline void _powers(Model* m, const double* x) noexcept nogil:
    cdef int j, p, md1 = m.md + 1
    for j in range(m.D):
        m.pw[j * md1] = 1.0
        for p in range(1, md1):
            m.pw[j * md1 + p] = m.pw[j * md1 + p - 1] * x[j]


cdef inline void _features(Model* m, const double* x) noexcept nogil:
    cdef int k, j, t, md1 = m.md + 1
    cdef double v
    _powers(m, x)
    for k in range(m.Km):
        v = 1.0
        for j in range(m.D):
            v *= m.pw[j * md1 + m.exps[k * m.D + j]]
        m.phi[k] = v
    for t in range(m.K - m.Km):
        if m.tr_kind[t] == 0:
            m.phi[m.Km + t] = sin(x[m.tr_coord[t]])
        else:
            m.phi[m.Km + t] = cos(x[m.tr_coord[t]])


cdef inline void _glyc(Model* m, const double* x, double* out) noexcept nogil:
    cdef const double* p = m.bp
    cdef const double* sc = m.sscale
    cdef double S1 = x[0] * sc[0], S2 = x[1] * sc[1], S3 = x[2] * sc[2], S4 = x[3] * sc[3]
    cdef double N2 = x[4] * sc[4], A3 = x[5] * sc[5], S4ex = x[6] * sc[6]
    cdef double r = A3 / p[10] if A3 > 0 else 0.0
    cdef double P = pow(r, p[9]) if r > 0 else 0.0
    cdef double v1 = p[1] * S1 * A3 / (1.0 + P)
    cdef double N1 = p[12] - N2, A2 = p[13] - A3
    cdef double u1 = p[2] * S2 * N1, u2 = p[6] * S2 * N2, u3 = p[3] * S3 * A2
    cdef double u4 = p[4] * S4 * N2, u5 = p[8] * (S4 - S4ex), u6 = p[5] * A3, u7 = p[7] * S4ex
    out[0] += (p[0] - v1) / sc[0]
    out[1] += (2 * v1 - u1 - u2) / sc[1]
    out[2] += (u1 - u3) / sc[2]
    out[3] += (u3 - u4 - u5) / sc[3]
    out[4] += (u1 - u4 - u2) / sc[4]
    out[5] += (-2 * v1 + 2 * u3 - u6) / sc[5]
    out[6] += (p[11] * u5 - u7) / sc[6]


cdef inline void _glyc_vjp(Model* m, const double* x, const double* cn, double* gx, double* gp) noexcept nogil:
    cdef const double* p = m.bp
    cdef const double* sc = m.sscale
    cdef double S1 = x[0] * sc[0], S2 = x[1] * sc[1], S3 = x[2] * sc[2], S4 = x[3] * sc[3]
    cdef double N2 = x[4] * sc[4], A3 = x[5] * sc[5], S4ex = x[6] * sc[6]
    cdef double c0 = cn[0] / sc[0], c1 = cn[1] / sc[1], c2 = cn[2] / sc[2], c3 = cn[3] / sc[3]
    cdef double c4 = cn[4] / sc[4], c5 = cn[5] / sc[5], c6 = cn[6] / sc[6]
    cdef double kappa = p[8], q = p[9], KI = p[10], phi = p[11]
    cdef bint pos = A3 > 0
    cdef double r = A3 / KI if pos else 0.0
    cdef double P = pow(r, q) if pos else 0.0
    cdef double H = 1.0 + P
    cdef double v1 = p[1] * S1 * A3 / H
    cdef double N1 = p[12] - N2, A2 = p[13] - A3
    cdef double gv1 = -c0 + 2 * c1 - 2 * c5
    cdef double gu1 = -c1 + c2 + c4
    cdef double gu2 = -c1 - c4
    cdef double gu3 = -c2 + c3 + 2 * c5
    cdef double gu4 = -c3 - c4
    cdef double gu5 = -c3 + phi * c6
    cdef double gu6 = -c5
    cdef double gu7 = -c6
    cdef double gS1, gS2, gS3, gS4, gN2, gA3, gS4ex, gN1, gA2, gP, gr
    gp[0] += c0
    gp[11] += kappa * (S4 - S4ex) * c6
    gp[2] += gu1 * S2 * N1
    gS2 = gu1 * p[2] * N1
    gN1 = gu1 * p[2] * S2
    gp[6] += gu2 * S2 * N2
    gS2 += gu2 * p[6] * N2
    gN2 = gu2 * p[6] * S2
    gp[3] += gu3 * S3 * A2
    gS3 = gu3 * p[3] * A2
    gA2 = gu3 * p[3] * S3
    gp[4] += gu4 * S4 * N2
    gS4 = gu4 * p[4] * N2
    gN2 += gu4 * p[4] * S4
    gp[8] += gu5 * (S4 - S4ex)
    gS4 += gu5 * kappa
    gS4ex = -gu5 * kappa
    gp[5] += gu6 * A3
    gA3 = gu6 * p[5]
    gp[7] += gu7 * S4ex
    gS4ex += gu7 * p[7]
    gp[12] += gN1
    gN2 -= gN1
    gp[13] += gA2
    gA3 -= gA2
    gp[1] += gv1 * S1 * A3 / H
    gS1 = gv1 * p[1] * A3 / H
    gA3 += gv1 * p[1] * S1 / H
    gP = -gv1 * v1 / H
    if pos:
        gr = gP * q * P / r
        gp[9] += gP * P * log(r)
        gA3 += gr / KI
        gp[10] += -gr * A3 / (KI * KI)
    gx[0] += gS1 * sc[0]
    gx[1] += gS2 * sc[1]
    gx[2] += gS3 * sc[2]
    gx[3] += gS4 * sc[3]
    gx[4] += gN2 * sc[4]
    gx[5] += gA3 * sc[5]
    gx[6] += gS4ex * sc[6]


cdef inline void _mlp_forward(Model* m, const double* x, double* out) noexcept nogil:
    cdef int l, o, i, a, b
    cdef const double* W
    cdef const double* bias
    cdef double* h
    cdef double s
    for i in range(m.widths[0]):
        m.acts[i] = x[m.in_idx[i]]
    for l in range(m.nl):
        a = m.widths[l]
        b = m.widths[l + 1]
        W = m.w + m.offs[l]
        bias = W + a * b
        h = m.acts + l * m.maxw
        for o in range(b):
            s = bias[o]
            for i in range(a):
                s += W[o * a + i] * h[i]
            if l < m.nl - 1:
                m.acts[(l + 1) * m.maxw + o] = _tanh(s)
            else:
                out[m.out_idx[o]] += s


cdef inline void _mlp_vjp(Model* m, const double* c, double* gx, double* gw) noexcept nogil:
    """Backprop through the closure; activations must already sit in m.acts."""
    cdef int l, o, i, a, b
    cdef const double* W
    cdef double* gW
    cdef double* h
    cdef double* g = m.g0
    cdef double* gp = m.g1
    cdef double* tmp
    cdef double go
    for o in range(m.widths[m.nl]):
        g[o] = c[m.out_idx[o]]
    for l in range(m.nl - 1, -1, -1):
        a = m.widths[l]
        b = m.widths[l + 1]
        W = m.w + m.offs[l]
        gW = gw + m.offs[l]
        h = m.acts + l * m.maxw
        for i in range(a):
            gp[i] = 0.0
        for o in range(b):
            go = g[o]
            if go == 0.0:
                continue
            for i in range(a):
                gW[o * a + i] += go * h[i]
                gp[i] += W[o * a + i] * go
            gW[a * b + o] += go
        if l > 0:
            for i in range(a):
                gp[i] *= 1.0 - h[i] * h[i]
        tmp = g
        g = gp
        gp = tmp
    for i in range(m.widths[0]):
        gx[m.in_idx[i]] += g[i]


cdef inline void _rhs(Model* m, const double* x, double* out) noexcept nogil:
    cdef int i, k
    cdef double s
    for i in range(m.D):
        out[i] = 0.0
    if m.K > 0:
        _features(m, x)
        for i in range(m.D):
            s = 0.0
            for k in range(m.K):
                s += m.A[i * m.K + k] * m.phi[k]
            out[i] = s
    if m.builtin == 0:
        _glyc(m, x, out)
    if m.nl > 0:
        _mlp_forward(m, x, out)


cdef inline void _vjp(Model* m, const double* x, const double* c, double* gx,
                      double* gA, double* gbp, double* gw, bint recompute) noexcept nogil:
    """Accumulate c^T df/dx into gx and c^T df/dparams into gA, gbp, gw."""
    cdef int i, j, k, l, e, t, md1 = m.md + 1
    cdef double s, d
    if m.K > 0:
        _features(m, x)
        for i in range(m.D):
            if c[i] != 0.0:
                for k in range(m.K):
                    gA[i * m.K + k] += c[i] * m.phi[k]
        for k in range(m.K):
            s = 0.0
            for i in range(m.D):
                s += c[i] * m.A[i * m.K + k]
            if s == 0.0:
                continue
            if k < m.Km:
                for j in range(m.D):
                    e = m.exps[k * m.D + j]
                    if e == 0:
                        continue
                    d = e * m.pw[j * md1 + e - 1]
                    for l in range(m.D):
                        if l != j:
                            d *= m.pw[l * md1 + m.exps[k * m.D + l]]
                    gx[j] += s * d
            else:
                t = k - m.Km
                j = m.tr_coord[t]
                if m.tr_kind[t] == 0:
                    gx[j] += s * cos(x[j])
                else:
                    gx[j] -= s * sin(x[j])
    if m.builtin == 0:
        _glyc_vjp(m, x, c, gx, gbp)
    if m.nl > 0:
        if recompute:
            _mlp_forward(m, x, m.scratch)
        _mlp_vjp(m, c, gx, gw)


cdef inline bint _finite(const double* x, int D) noexcept nogil:
    cdef int i
    for i in range(D):
        if not isfinite(x[i]):
            return False
    return True


cdef int _forward(Model* m, double* x, double h, int N, double* tape, double* atape, double* k) noexcept nogil:
    """RK4 chain in place on x. tape[n, s, :] receives stage inputs and
    atape[n, s, :] closure activations (both may be NULL).
    Returns -1 on success or the failing step index."""
    cdef int n, s, i, D = m.D
    cdef double* y
    cdef double ystore[256]
    cdef double* own = m.acts
    for n in range(N):
        if tape != NULL:
            y = tape + n * 4 * D
        else:
            y = ystore
        for i in range(D):
            y[i] = x[i]
        for s in range(4):
            if atape != NULL:
                m.acts = atape + (n * 4 + s) * m.AS
            _rhs(m, y + s * D, k + s * D)
            if s < 3:
                for i in range(D):
                    y[(s + 1) * D + i] = x[i] + (h if s == 2 else 0.5 * h) * k[s * D + i]
        for i in range(D):
            x[i] = x[i] + (h / 6.0) * (k[i] + 2.0 * k[D + i] + 2.0 * k[2 * D + i] + k[3 * D + i])
        if not _finite(x, D):
            m.acts = own
            return n
    m.acts = own
    return -1


cdef void _backward(Model* m, double* a, double h, int N, const double* tape, double* atape,
                    double* gA, double* gbp, double* gw, double* work) noexcept nogil:
    cdef int n, s, i, D = m.D
    cdef const double* y
    cdef double* ax = work
    cdef double* gx = work + D
    cdef double* ck = work + 2 * D
    cdef double* own = m.acts
    # stage s cotangent = w_s * h * a + c_s * h * (pullback of stage s + 1)
    cdef double wts[4]
    cdef double carry[4]
    wts[0] = 1.0 / 6.0
    wts[1] = 1.0 / 3.0
    wts[2] = 1.0 / 3.0
    wts[3] = 1.0 / 6.0
    carry[0] = 0.5
    carry[1] = 0.5
    carry[2] = 1.0
    for n in range(N - 1, -1, -1):
        y = tape + n * 4 * D
        for i in range(D):
            ax[i] = a[i]
            gx[i] = 0.0
        for s in range(3, -1, -1):
            for i in range(D):
                ck[i] = (wts[s] * h) * a[i]
                if s < 3:
                    ck[i] += carry[s] * h * gx[i]
                gx[i] = 0.0
            m.acts = atape + (n * 4 + s) * m.AS
            _vjp(m, y + s * D, ck, gx, gA, gbp, gw, False)
            for i in range(D):
                ax[i] += gx[i]
        for i in range(D):
            a[i] = ax[i]
    m.acts = own


cdef class _Packed:
    cdef Model m
    cdef object refs
    cdef double[::1] pw_buf, phi_buf, acts_buf, g0_buf, g1_buf, scratch_buf

    def __init__(self, pm):
        cdef double[::1] A = pm.A
        cdef int[::1] exps = pm.exps
        cdef int[::1] tr_kind = pm.tr_kind
        cdef int[::1] tr_coord = pm.tr_coord
        cdef double[::1] bp = pm.bp
        cdef double[::1] sscale = pm.sscale
        cdef int[::1] widths = pm.widths
        cdef int[::1] offs = pm.offs
        cdef double[::1] w = pm.w
        cdef int[::1] in_idx = pm.in_idx
        cdef int[::1] out_idx = pm.out_idx
        if pm.D > 64:
            raise ValueError("compiled kernel supports at most 64 state dimensions")
        self.refs = (A, exps, tr_kind, tr_coord, bp, sscale, widths, offs, w, in_idx, out_idx)
        self.m.D = pm.D
        self.m.K = pm.K
        self.m.Km = pm.Km
        self.m.md = pm.md
        self.m.A = &A[0]
        self.m.exps = &exps[0]
        self.m.tr_kind = &tr_kind[0]
        self.m.tr_coord = &tr_coord[0]
        self.m.builtin = pm.builtin
        self.m.bp = &bp[0]
        self.m.sscale = &sscale[0]
        self.m.nl = pm.nl
        self.m.widths = &widths[0]
        self.m.offs = &offs[0]
        self.m.w = &w[0]
        self.m.in_idx = &in_idx[0]
        self.m.out_idx = &out_idx[0]
        self.m.maxw = pm.maxw
        self.pw_buf = np.zeros(pm.D * (pm.md + 1) + 1)
        self.phi_buf = np.zeros(pm.K + 1)
        self.acts_buf = np.zeros((pm.nl + 1) * pm.maxw + 1)
        self.g0_buf = np.zeros(pm.maxw + 1)
        self.g1_buf = np.zeros(pm.maxw + 1)
        self.m.pw = &self.pw_buf[0]
        self.m.phi = &self.phi_buf[0]
        self.m.acts = &self.acts_buf[0]
        self.m.g0 = &self.g0_buf[0]
        self.m.g1 = &self.g1_buf[0]
        self.scratch_buf = np.zeros(pm.D)
        self.m.scratch = &self.scratch_buf[0]
        self.m.AS = pm.nl * pm.maxw + 1


def propagate(pm, const double[:, ::1] X0, const double[::1] h, const long[::1] N):
    cdef _Packed P = _Packed(pm)
    cdef Py_ssize_t B = X0.shape[0], b
    cdef int D = pm.D, i
    cdef double[:, ::1] X = np.array(X0, copy=True)
    cdef double[::1] k = np.zeros(4 * D)
    with nogil:
        for b in range(B):
            if _forward(&P.m, &X[b, 0], h[b], <int>N[b], NULL, NULL, &k[0]) >= 0:
                for i in range(D):
                    X[b, i] = NAN
    return np.asarray(X)


def trajectory(pm, const double[::1] x0, const double[::1] h, const long[::1] N):
    cdef _Packed P = _Packed(pm)
    cdef Py_ssize_t M = h.shape[0], j
    cdef int D = pm.D, i
    cdef double[:, ::1] out = np.full((M + 1, D), np.nan)
    cdef double[::1] x = np.array(x0, copy=True)
    cdef double[::1] k = np.zeros(4 * D)
    for i in range(D):
        out[0, i] = x[i]
    with nogil:
        for j in range(M):
            if _forward(&P.m, &x[0], h[j], <int>N[j], NULL, NULL, &k[0]) >= 0:
                break
            for i in range(D):
                out[j + 1, i] = x[i]
    return np.asarray(out)


def sse_and_grad(pm, const double[:, ::1] X0, const double[:, ::1] X1,
                 const double[::1] h, const long[::1] N, bint grad=True):
    """Sum of squared endpoint residuals and its gradient w.r.t. (A, bp, w)."""
    cdef _Packed P = _Packed(pm)
    cdef Py_ssize_t B = X0.shape[0], b
    cdef int D = pm.D, i, maxN = 1, n
    for b in range(B):
        if N[b] > maxN:
            maxN = <int>N[b]
    cdef double[::1] tape = np.zeros(maxN * 4 * D)
    cdef double[::1] atape = np.zeros(maxN * 4 * P.m.AS)
    cdef double[::1] x = np.zeros(D)
    cdef double[::1] k = np.zeros(4 * D)
    cdef double[::1] a = np.zeros(D)
    cdef double[::1] work = np.zeros(3 * D)
    cdef double[::1] gA = np.zeros(D * pm.K + 1)
    cdef double[::1] gbp = np.zeros(len(pm.bp))
    cdef double[::1] gw = np.zeros(len(pm.w))
    cdef double sse = 0.0, r
    cdef bint failed = False
    with nogil:
        for b in range(B):
            for i in range(D):
                x[i] = X0[b, i]
            if _forward(&P.m, &x[0], h[b], <int>N[b], &tape[0], &atape[0], &k[0]) >= 0:
                failed = True
                break
            for i in range(D):
                r = X1[b, i] - x[i]
                sse += r * r
                a[i] = -2.0 * r
            if grad:
                _backward(&P.m, &a[0], h[b], <int>N[b], &tape[0], &atape[0], &gA[0], &gbp[0], &gw[0], &work[0])
    if failed or not isfinite(sse):
        return np.inf, None, None, None
    if not grad:
        return sse, None, None, None
    return sse, np.asarray(gA)[:D * pm.K].reshape(D, pm.K), np.asarray(gbp), np.asarray(gw)
