# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for the two-head MLP (float64).

Same contracts as :mod:`taxdqn._pycore`.  Matrices are row-major; BLAS is
column-major, so every product is issued in its transposed form.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, pow, isfinite
from libc.string cimport memcpy, memset

cdef extern from *:
    """
    extern void dgemm_(const char*, const char*, const int*, const int*, const int*,
                       const double*, const double*, const int*, const double*, const int*,
                       const double*, double*, const int*);
    extern void dgemv_(const char*, const int*, const int*, const double*, const double*,
                       const int*, const double*, const int*, const double*, double*, const int*);
    #define dgemm dgemm_
    #define dgemv dgemv_
    """
    void dgemm(const char*, const char*, const int*, const int*, const int*, const double*,
               const double*, const int*, const double*, const int*, const double*, double*,
               const int*) nogil
    void dgemv(const char*, const int*, const int*, const double*, const double*, const int*,
               const double*, const int*, const double*, double*, const int*) nogil

cnp.import_array()

NAME = "compiled"


cdef inline void mm_nn(const double* A, const double* B, double* C, int m, int k, int n,
                       double beta) noexcept nogil:
    # C(m,n) = A(m,k) @ B(k,n) + beta C
    cdef char t = b'N'
    cdef double one = 1.0
    dgemm(&t, &t, &n, &m, &k, &one, <double*>B, &n, <double*>A, &k, &beta, C, &n)


cdef inline void mm_tn(const double* A, const double* D, double* C, int m, int k, int n,
                       double beta) noexcept nogil:
    # C(k,n) = A(m,k).T @ D(m,n) + beta C
    cdef char tn = b'N'
    cdef char tt = b'T'
    cdef double one = 1.0
    dgemm(&tn, &tt, &n, &k, &m, &one, <double*>D, &n, <double*>A, &k, &beta, C, &n)


cdef inline void mm_nt(const double* D, const double* W, double* C, int m, int n, int k,
                       double beta) noexcept nogil:
    # C(m,k) = D(m,n) @ W(k,n).T + beta C
    cdef char tn = b'N'
    cdef char tt = b'T'
    cdef double one = 1.0
    dgemm(&tt, &tn, &k, &m, &n, &one, <double*>W, &n, <double*>D, &n, &beta, C, &k)


cdef class _Workspace:
    cdef public int n_layers, n_trunk, batch, max_width
    cdef public object w_off, b_off, n_in, n_out
    cdef public list acts, nacts
    cdef public cnp.ndarray q1, q2, q1n, q2n, q1t, q2t, delta, delta2, y1, y2

    def __init__(self, layout, int batch):
        self.n_layers = len(layout)
        self.n_trunk = self.n_layers - 2
        self.batch = batch
        self.w_off = np.array([l[0] for l in layout], dtype=np.intp)
        self.b_off = np.array([l[1] for l in layout], dtype=np.intp)
        self.n_in = np.array([l[2] for l in layout], dtype=np.intc)
        self.n_out = np.array([l[3] for l in layout], dtype=np.intc)
        self.max_width = max(l[3] for l in layout[:self.n_trunk])
        self.acts = [np.empty((batch, layout[k][3])) for k in range(self.n_trunk)]
        self.nacts = [np.empty((batch, layout[k][3])) for k in range(self.n_trunk)]
        self.q1 = np.empty((batch, layout[self.n_layers - 2][3]))
        self.q2 = np.empty((batch, layout[self.n_layers - 1][3]))
        self.q1n = np.empty_like(self.q1)
        self.q2n = np.empty_like(self.q2)
        self.q1t = np.empty_like(self.q1)
        self.q2t = np.empty_like(self.q2)
        self.delta = np.empty((batch, self.max_width))
        self.delta2 = np.empty((batch, self.max_width))
        self.y1 = np.empty(batch)
        self.y2 = np.empty(batch)


_workspaces = {}


cdef _Workspace _workspace(layout, int batch):
    key = (layout, batch)
    ws = _workspaces.get(key)
    if ws is None:
        ws = _Workspace(layout, batch)
        _workspaces[key] = ws
    return ws


cdef inline void _colsum(const double* D, double* out, int n, int m) noexcept nogil:
    cdef int i, j
    memset(out, 0, m * sizeof(double))
    for i in range(n):
        for j in range(m):
            out[j] += D[i * m + j]


cdef void _forward(double* P, _Workspace ws, const double* X, int n, list acts,
                   double* q1, double* q2):
    """Trunk activations into ``acts``; head outputs into q1/q2."""
    cdef int k, i, j, n_in, n_out
    cdef const double* h = X
    cdef double* z
    cdef double* b
    cdef cnp.ndarray a
    cdef Py_ssize_t[:] w_off = ws.w_off
    cdef Py_ssize_t[:] b_off = ws.b_off
    cdef int[:] ni = ws.n_in
    cdef int[:] no = ws.n_out
    for k in range(ws.n_trunk):
        a = acts[k]
        z = <double*>cnp.PyArray_DATA(a)
        n_in = ni[k]
        n_out = no[k]
        b = P + b_off[k]
        for i in range(n):
            memcpy(z + i * n_out, b, n_out * sizeof(double))
        mm_nn(h, P + w_off[k], z, n, n_in, n_out, 1.0)
        # branchless so the compiler vectorises it (fmax is a libm call)
        for i in range(n * n_out):
            z[i] = z[i] if z[i] > 0.0 else 0.0
        h = z
    for k in range(ws.n_trunk, ws.n_layers):
        z = q1 if k == ws.n_trunk else q2
        n_in = ni[k]
        n_out = no[k]
        b = P + b_off[k]
        for i in range(n):
            memcpy(z + i * n_out, b, n_out * sizeof(double))
        mm_nn(h, P + w_off[k], z, n, n_in, n_out, 1.0)


def forward(double[::1] flat, layout, X):
    """Batch forward pass; returns ``(q1, q2, acts)`` like the numpy kernel."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    cdef int n = X.shape[0]
    ws = _Workspace(layout, n)
    cdef double[:, ::1] xv = X
    _forward(&flat[0], ws, &xv[0, 0], n, ws.acts, <double*>cnp.PyArray_DATA(ws.q1),
             <double*>cnp.PyArray_DATA(ws.q2))
    return ws.q1, ws.q2, [X] + ws.acts


def backward(double[::1] flat, layout, acts, g1, g2, double[::1] grad):
    """Dense-gradient backward pass (overwrites ``grad``)."""
    cdef int n = acts[0].shape[0]
    cdef _Workspace ws = _workspace(layout, n)
    cdef double[:, ::1] G1 = np.ascontiguousarray(g1, dtype=np.float64)
    cdef double[:, ::1] G2 = np.ascontiguousarray(g2, dtype=np.float64)
    cdef double* P = &flat[0]
    cdef double* G = &grad[0]
    cdef Py_ssize_t[:] w_off = ws.w_off
    cdef Py_ssize_t[:] b_off = ws.b_off
    cdef int[:] ni = ws.n_in
    cdef int[:] no = ws.n_out
    cdef int L = ws.n_layers, T = ws.n_trunk
    cdef int H = ni[L - 2], k, i
    cdef double[:, ::1] h = np.ascontiguousarray(acts[T], dtype=np.float64)
    cdef double[:, ::1] a
    cdef double* d = <double*>cnp.PyArray_DATA(ws.delta)
    cdef double* dprev = <double*>cnp.PyArray_DATA(ws.delta2)
    cdef double* tmp
    # heads
    mm_tn(&h[0, 0], &G1[0, 0], G + w_off[L - 2], n, H, no[L - 2], 0.0)
    mm_tn(&h[0, 0], &G2[0, 0], G + w_off[L - 1], n, H, no[L - 1], 0.0)
    _colsum(&G1[0, 0], G + b_off[L - 2], n, no[L - 2])
    _colsum(&G2[0, 0], G + b_off[L - 1], n, no[L - 1])
    mm_nt(&G1[0, 0], P + w_off[L - 2], d, n, no[L - 2], H, 0.0)
    mm_nt(&G2[0, 0], P + w_off[L - 1], d, n, no[L - 1], H, 1.0)
    for k in range(T - 1, -1, -1):
        a = np.ascontiguousarray(acts[k + 1], dtype=np.float64)
        for i in range(n * no[k]):
            d[i] = d[i] if (&a[0, 0])[i] > 0.0 else 0.0
        a = np.ascontiguousarray(acts[k], dtype=np.float64)
        mm_tn(&a[0, 0], d, G + w_off[k], n, ni[k], no[k], 0.0)
        _colsum(d, G + b_off[k], n, no[k])
        if k:
            mm_nt(d, P + w_off[k], dprev, n, no[k], ni[k], 0.0)
            tmp = d
            d = dprev
            dprev = tmp
    return np.asarray(grad)


cdef long _adam(double* P, const double* G, double* M, double* V, Py_ssize_t size, long t,
                double lr, double b1, double b2, double eps) noexcept nogil:
    cdef Py_ssize_t i
    cdef double g, c1, c2, step, eps_hat
    t += 1
    c1 = 1.0 - pow(b1, <double>t)
    c2 = 1.0 - pow(b2, <double>t)
    # algebraically identical to lr * (m/c1) / (sqrt(v/c2) + eps)
    step = lr * sqrt(c2) / c1
    eps_hat = eps * sqrt(c2)
    for i in range(size):
        g = G[i]
        M[i] = b1 * M[i] + (1.0 - b1) * g
        V[i] = b2 * V[i] + (1.0 - b2) * g * g
        P[i] -= step * M[i] / (sqrt(V[i]) + eps_hat)
    return t


def adam(double[::1] flat, double[::1] grad, double[::1] m, double[::1] v, long t,
         double lr, double b1, double b2, double eps):
    return _adam(&flat[0], &grad[0], &m[0], &v[0], flat.shape[0], t, lr, b1, b2, eps)


def greedy(double[::1] flat, layout, double[::1] x, bint offered):
    """Argmax of each head for one observation (head 2 forced to 0 without an offer)."""
    cdef int L = len(layout), k, j, best
    cdef int n_in, n_out
    cdef double* P = &flat[0]
    cdef char tn = b'N'
    cdef int inc = 1
    cdef double one = 1.0
    cdef double[::1] buf_a = np.empty(max(l[3] for l in layout))
    cdef double[::1] buf_b = np.empty(max(l[3] for l in layout))
    cdef double* h = &x[0]
    cdef double* z
    cdef double* out_t
    for k in range(L - 2):
        _, _, n_in, n_out = layout[k]
        z = &buf_a[0] if k % 2 == 0 else &buf_b[0]
        for j in range(n_out):
            z[j] = P[<Py_ssize_t>layout[k][1] + j]
        dgemv(&tn, &n_out, &n_in, &one, P + <Py_ssize_t>layout[k][0], &n_out, h, &inc, &one, z, &inc)
        for j in range(n_out):
            if z[j] < 0.0:
                z[j] = 0.0
        h = z
    out_t = &buf_a[0] if (L - 2) % 2 == 0 else &buf_b[0]
    _, _, n_in, n_out = layout[L - 2]
    for j in range(n_out):
        out_t[j] = P[<Py_ssize_t>layout[L - 2][1] + j]
    dgemv(&tn, &n_out, &n_in, &one, P + <Py_ssize_t>layout[L - 2][0], &n_out, h, &inc, &one, out_t, &inc)
    best = 0
    for j in range(1, n_out):
        if out_t[j] > out_t[best]:
            best = j
    if not offered:
        return best, 0
    cdef double q0, q1v
    cdef Py_ssize_t wo = layout[L - 1][0], bo = layout[L - 1][1]
    q0 = P[bo]
    q1v = P[bo + 1]
    for j in range(n_in):
        q0 += h[j] * P[wo + 2 * j]
        q1v += h[j] * P[wo + 2 * j + 1]
    return best, 1 if q1v > q0 else 0


def ddqn_targets(double[::1] online, double[::1] target, layout, util, next_obs,
                 next_offered, double gamma):
    cdef int n = len(util)
    ws = _workspace(layout, n)
    y1, y2 = _targets(&online[0], &target[0], ws, util, next_obs, next_offered, gamma)
    return y1.copy(), y2.copy()


cdef tuple _targets(double* online, double* target, _Workspace ws, util, next_obs,
                    next_offered, double gamma):
    cdef int n = ws.batch, i, j, best
    cdef double[:, ::1] X = np.ascontiguousarray(next_obs, dtype=np.float64)
    cdef double[::1] u = np.ascontiguousarray(util, dtype=np.float64)
    cdef cnp.uint8_t[::1] off = np.ascontiguousarray(next_offered, dtype=np.uint8)
    cdef double* q1o = <double*>cnp.PyArray_DATA(ws.q1n)
    cdef double* q2o = <double*>cnp.PyArray_DATA(ws.q2n)
    cdef double* q1t = <double*>cnp.PyArray_DATA(ws.q1t)
    cdef double* q2t = <double*>cnp.PyArray_DATA(ws.q2t)
    cdef double* y1 = <double*>cnp.PyArray_DATA(ws.y1)
    cdef double* y2 = <double*>cnp.PyArray_DATA(ws.y2)
    cdef int A1 = ws.q1.shape[1]
    _forward(online, ws, &X[0, 0], n, ws.nacts, q1o, q2o)
    _forward(target, ws, &X[0, 0], n, ws.nacts, q1t, q2t)
    for i in range(n):
        best = 0
        for j in range(1, A1):
            if q1o[i * A1 + j] > q1o[i * A1 + best]:
                best = j
        y1[i] = u[i] + gamma * q1t[i * A1 + best]
        best = 1 if (off[i] and q2o[2 * i + 1] > q2o[2 * i]) else 0
        y2[i] = u[i] + gamma * q2t[2 * i + best]
    return ws.y1, ws.y2


def train_step(double[::1] online, double[::1] target, double[::1] grad, double[::1] m,
               double[::1] v, long t, double lr, double b1, double b2, double eps, layout,
               obs, a1, a2, util, next_obs, next_offered, double gamma):
    """Fused double-DQN minibatch update.  Returns ``(loss, t)``."""
    cdef int n = len(util)
    ws = _workspace(layout, n)
    _targets(&online[0], &target[0], ws, util, next_obs, next_offered, gamma)
    cdef double[:, ::1] X = np.ascontiguousarray(obs, dtype=np.float64)
    cdef cnp.int64_t[::1] A1v = np.ascontiguousarray(a1, dtype=np.int64)
    cdef cnp.int64_t[::1] A2v = np.ascontiguousarray(a2, dtype=np.int64)
    cdef double* P = &online[0]
    cdef double* G = &grad[0]
    cdef double* q1 = <double*>cnp.PyArray_DATA(ws.q1)
    cdef double* q2 = <double*>cnp.PyArray_DATA(ws.q2)
    cdef double* y1 = <double*>cnp.PyArray_DATA(ws.y1)
    cdef double* y2 = <double*>cnp.PyArray_DATA(ws.y2)
    cdef Py_ssize_t[:] w_off = ws.w_off
    cdef Py_ssize_t[:] b_off = ws.b_off
    cdef int[:] ni = ws.n_in
    cdef int[:] no = ws.n_out
    cdef int L = ws.n_layers, T = ws.n_trunk
    cdef int H = ni[L - 2], N1 = no[L - 2], N2 = no[L - 1]
    cdef int i, j, k, c1, c2
    cdef double loss = 0.0, d1, d2, e1, e2
    cdef double* h
    cdef double* a
    cdef double* d = <double*>cnp.PyArray_DATA(ws.delta)
    cdef double* dp = <double*>cnp.PyArray_DATA(ws.delta2)
    cdef double* tmp
    cdef double* w1
    cdef double* w2
    cdef double* gw
    cdef double s
    cdef Py_ssize_t size = online.shape[0], q
    _forward(P, ws, &X[0, 0], n, ws.acts, q1, q2)
    h = <double*>cnp.PyArray_DATA(ws.acts[T - 1])
    for q in range(size):
        G[q] = 0.0
    w1 = P + w_off[L - 2]
    w2 = P + w_off[L - 1]
    for i in range(n):
        c1 = A1v[i]
        c2 = A2v[i]
        d1 = y1[i] - q1[i * N1 + c1]
        d2 = y2[i] - q2[i * N2 + c2]
        loss += d1 * d1 + d2 * d2
        e1 = -2.0 * d1 / n
        e2 = -2.0 * d2 / n
        gw = G + w_off[L - 2]
        for j in range(H):
            gw[j * N1 + c1] += h[i * H + j] * e1
        G[b_off[L - 2] + c1] += e1
        gw = G + w_off[L - 1]
        for j in range(H):
            gw[j * N2 + c2] += h[i * H + j] * e2
        G[b_off[L - 1] + c2] += e2
        for j in range(H):
            d[i * H + j] = (w1[j * N1 + c1] * e1 + w2[j * N2 + c2] * e2) if h[i * H + j] > 0.0 else 0.0
    loss /= n
    for k in range(T - 1, -1, -1):
        if k < T - 1:
            a = <double*>cnp.PyArray_DATA(ws.acts[k])
            for i in range(n * no[k]):
                d[i] = d[i] if a[i] > 0.0 else 0.0
        a = &X[0, 0] if k == 0 else <double*>cnp.PyArray_DATA(ws.acts[k - 1])
        mm_tn(a, d, G + w_off[k], n, ni[k], no[k], 0.0)
        _colsum(d, G + b_off[k], n, no[k])
        if k:
            mm_nt(d, P + w_off[k], dp, n, no[k], ni[k], 0.0)
            tmp = d
            d = dp
            dp = tmp
    if not isfinite(loss):
        raise FloatingPointError(f"non-finite loss ({loss})")
    for q in range(size):
        if not isfinite(G[q]):
            raise FloatingPointError("non-finite gradient")
    t = _adam(P, G, &m[0], &v[0], size, t, lr, b1, b2, eps)
    return loss, t

