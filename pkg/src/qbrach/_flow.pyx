# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled flow kernel.  Same algorithm and state layout as ``_flow_py``."""
import numpy as np

from libc.math cimport sqrt, fabs, pow
from libc.string cimport memcpy

from ._flow_py import IntegrationError
from ._tableau import A as _A, B4 as _B4, B5 as _B5

cdef double SAFETY = 0.9
cdef double MIN_FACTOR = 0.2
cdef double MAX_FACTOR = 5.0


cdef struct Sys:
    int d
    int n
    int nn
    int variational
    int replay
    int off_z
    int off_phi
    int off_j
    int off_v
    int size
    double *f
    double *a
    double *b
    double *s
    double *e
    double *r
    double complex *C
    double *x
    double *w
    double *m
    double *fy
    double *lin
    double *ad
    double complex *H
    double complex *W
    double complex *T1


cdef void _matmul(int n, double complex *A, double complex *B, double complex *out) noexcept nogil:
    cdef int i, j, k
    cdef double complex acc
    for i in range(n):
        for j in range(n):
            acc = 0
            for k in range(n):
                acc = acc + A[i * n + k] * B[k * n + j]
            out[i * n + j] = acc


cdef void _rhs(Sys *S, double *y, double *dy) noexcept nogil:
    cdef int d = S.d, n = S.n, nn = S.nn
    cdef int aa, bb, c, k, i, j, l
    cdef double acc, sv
    cdef double complex cacc
    cdef double complex *U = <double complex *> y
    cdef double complex *dU = <double complex *> dy
    cdef double *z = y + S.off_z
    cdef double *dz = dy + S.off_z
    cdef double *f = S.f
    cdef double complex *Cm
    cdef double *phi
    cdef double *dphi
    cdef double *dj
    cdef double complex *V
    cdef double complex *dV

    for aa in range(d):
        S.x[aa] = S.a[aa] * z[aa]
        S.w[aa] = S.b[aa] * z[aa]
    for bb in range(d * d):
        S.m[bb] = 0.0
    for aa in range(d):
        sv = S.x[aa]
        if sv != 0.0:
            for bb in range(d * d):
                S.m[bb] += f[aa * d * d + bb] * sv
    for c in range(d):
        acc = 0.0
        for bb in range(d):
            acc += S.w[bb] * S.m[bb * d + c]
        dz[c] = S.s[c] * acc

    for i in range(nn):
        S.H[i] = 0
    for c in range(d):
        sv = S.e[c] * z[c]
        if sv != 0.0:
            Cm = S.C + c * nn
            for i in range(nn):
                S.H[i] = S.H[i] + sv * Cm[i]
    _matmul(n, S.H, U, dU)
    for i in range(nn):
        dU[i] = -1j * dU[i]

    if S.variational:
        phi = y + S.off_phi
        dphi = dy + S.off_phi
        dj = dy + S.off_j
        for k in range(d):
            for c in range(d):
                acc = 0.0
                for bb in range(d):
                    acc += f[(k * d + bb) * d + c] * S.w[bb]
                S.fy[k * d + c] = acc
        for c in range(d):
            for k in range(d):
                S.lin[c * d + k] = S.s[c] * (S.a[k] * S.fy[k * d + c] + S.b[k] * S.m[k * d + c])
        for c in range(d):
            for k in range(d):
                acc = 0.0
                for l in range(d):
                    acc += S.lin[c * d + l] * phi[l * d + k]
                dphi[c * d + k] = acc
        # ad[aa, bb] = Re Tr(C_aa U^dag C_bb U)
        for bb in range(d):
            Cm = S.C + bb * nn
            _matmul(n, Cm, U, S.T1)
            for i in range(n):
                for j in range(n):
                    cacc = 0
                    for l in range(n):
                        cacc = cacc + (U[l * n + i].real - 1j * U[l * n + i].imag) * S.T1[l * n + j]
                    S.W[i * n + j] = cacc
            for aa in range(d):
                Cm = S.C + aa * nn
                acc = 0.0
                for i in range(n):
                    for j in range(n):
                        acc += (Cm[i * n + j] * S.W[j * n + i]).real
                S.ad[aa * d + bb] = acc
        for aa in range(d):
            for k in range(d):
                acc = 0.0
                for bb in range(d):
                    acc += S.ad[aa * d + bb] * S.e[bb] * phi[bb * d + k]
                dj[aa * d + k] = acc

    if S.replay:
        V = <double complex *> (y + S.off_v)
        dV = <double complex *> (dy + S.off_v)
        for i in range(nn):
            S.H[i] = 0
        for c in range(d):
            sv = S.r[c] * z[c]
            if sv != 0.0:
                Cm = S.C + c * nn
                for i in range(nn):
                    S.H[i] = S.H[i] + sv * Cm[i]
        _matmul(n, S.H, V, dV)
        for i in range(nn):
            dV[i] = -1j * dV[i]


cdef double _unitarity(int n, double complex *U, double complex *G) noexcept nogil:
    """Writes U^dag U into G and returns max |U^dag U - I|."""
    cdef int i, j, l
    cdef double complex acc
    cdef double worst = 0.0, dev
    for i in range(n):
        for j in range(n):
            acc = 0
            for l in range(n):
                acc = acc + (U[l * n + i].real - 1j * U[l * n + i].imag) * U[l * n + j]
            G[i * n + j] = acc
            if i == j:
                acc = acc - 1
            dev = sqrt(acc.real * acc.real + acc.imag * acc.imag)
            if dev > worst:
                worst = dev
    return worst


cdef void _newton_schulz(int n, double complex *U, double complex *G, double complex *T) noexcept nogil:
    cdef int it, i
    for it in range(3):
        _unitarity(n, U, G)
        for i in range(n * n):
            G[i] = -G[i]
        for i in range(n):
            G[i * n + i] = G[i * n + i] + 3
        _matmul(n, U, G, T)
        for i in range(n * n):
            U[i] = 0.5 * T[i]


cdef double _rms_scaled(int size, double *v, double *y, double rtol, double atol) noexcept nogil:
    cdef int i
    cdef double acc = 0.0, sc
    for i in range(size):
        sc = atol + rtol * fabs(y[i])
        acc += (v[i] / sc) * (v[i] / sc)
    return sqrt(acc / size)


def flow(f, a, b, s, e, r, elements, z0, u0, double T, double rtol, double atol, t_out,
         variational=False, replay=False, long max_steps=200000, double unitarity_tol=1e-10):
    cdef int d = z0.shape[0]
    cdef int n = elements.shape[1]
    cdef int nn = n * n
    cdef Sys S
    S.d = d
    S.n = n
    S.nn = nn
    S.variational = 1 if variational else 0
    S.replay = 1 if replay else 0
    S.off_z = 2 * nn
    S.off_phi = S.off_z + d
    S.off_j = S.off_phi + (d * d if variational else 0)
    S.off_v = S.off_j + (d * d if variational else 0)
    S.size = S.off_v + (2 * nn if replay else 0)
    cdef int size = S.size

    cdef double[::1] f_v = np.ascontiguousarray(f, dtype=float).ravel()
    cdef double[::1] a_v = np.ascontiguousarray(a, dtype=float)
    cdef double[::1] b_v = np.ascontiguousarray(b, dtype=float)
    cdef double[::1] s_v = np.ascontiguousarray(s, dtype=float)
    cdef double[::1] e_v = np.ascontiguousarray(e, dtype=float)
    cdef double[::1] r_v = np.ascontiguousarray(r if r is not None else np.zeros(d), dtype=float)
    cdef double complex[::1] c_v = np.ascontiguousarray(elements, dtype=complex).ravel()
    cdef double[::1] work = np.zeros(4 * d + 3 * d * d + d * d)
    cdef double complex[::1] cwork = np.zeros(6 * nn, dtype=complex)
    S.f = &f_v[0]
    S.a = &a_v[0]
    S.b = &b_v[0]
    S.s = &s_v[0]
    S.e = &e_v[0]
    S.r = &r_v[0]
    S.C = &c_v[0]
    S.x = &work[0]
    S.w = &work[d]
    S.m = &work[2 * d]
    S.fy = &work[2 * d + d * d]
    S.lin = &work[2 * d + 2 * d * d]
    S.ad = &work[2 * d + 3 * d * d]
    S.H = &cwork[0]
    S.W = &cwork[nn]
    S.T1 = &cwork[2 * nn]
    cdef double complex *G = &cwork[3 * nn]
    cdef double complex *T2 = &cwork[4 * nn]

    y_arr = np.zeros(size)
    y_arr[:2 * nn] = np.ascontiguousarray(u0, dtype=complex).view(float).ravel()
    y_arr[S.off_z:S.off_phi] = np.asarray(z0, dtype=float)
    if variational:
        y_arr[S.off_phi:S.off_j] = np.eye(d).ravel()
    if replay:
        y_arr[S.off_v:] = np.eye(n, dtype=complex).view(float).ravel()
    cdef double[::1] y = y_arr
    cdef double[::1] y5 = np.zeros(size)
    cdef double[::1] ytmp = np.zeros(size)
    cdef double[:, ::1] k = np.zeros((7, size))
    cdef double[::1] errv = np.zeros(size)
    cdef double[:, ::1] Am = np.ascontiguousarray(_A)
    cdef double[::1] B5 = np.ascontiguousarray(_B5)
    cdef double[::1] B4 = np.ascontiguousarray(_B4)
    cdef double[::1] tout = np.ascontiguousarray(t_out, dtype=float)
    cdef int n_out = tout.shape[0]
    cdef int i_out = 0
    cdef int i, j, stage
    cdef double acc, sc, err, fac, h, hstep, t = 0.0, target, h0, h1, d0, d1, d2
    cdef long nsteps = 0, nrej = 0
    cdef bint landing, projected
    cdef double tiny = 1e-13 * (T if T > 1.0 else 1.0)

    samples_t = []
    samples_y = []
    while i_out < n_out and tout[i_out] <= 0.0:
        samples_t.append(0.0)
        samples_y.append(np.asarray(y).copy())
        i_out += 1

    _rhs(&S, &y[0], &k[0, 0])
    d0 = _rms_scaled(size, &y[0], &y[0], rtol, atol)
    d1 = _rms_scaled(size, &k[0, 0], &y[0], rtol, atol)
    if d0 < 1e-5 or d1 < 1e-5:
        h0 = 1e-6
    else:
        h0 = 0.01 * d0 / d1
    if h0 > T:
        h0 = T
    for i in range(size):
        ytmp[i] = y[i] + h0 * k[0, i]
    _rhs(&S, &ytmp[0], &k[1, 0])
    for i in range(size):
        errv[i] = k[1, i] - k[0, i]
    d2 = _rms_scaled(size, &errv[0], &y[0], rtol, atol) / h0
    if (d1 if d1 > d2 else d2) <= 1e-15:
        h1 = 1e-6 * h0 if 1e-6 * h0 > 1e-3 else 1e-3
    else:
        h1 = pow(0.01 / (d1 if d1 > d2 else d2), 0.2)
    hstep = 100 * h0
    if h1 < hstep:
        hstep = h1
    if T < hstep:
        hstep = T

    while t < T:
        if nsteps + nrej >= max_steps:
            raise IntegrationError("maximum number of steps exceeded", t)
        if hstep < 1e-14 * (T if T > 1.0 else 1.0):
            raise IntegrationError("step size underflow", t)
        target = T
        if i_out < n_out and tout[i_out] < T:
            target = tout[i_out]
        h = hstep
        landing = False
        if t + h >= target - tiny:
            h = target - t
            landing = True
        with nogil:
            for stage in range(1, 6):
                for i in range(size):
                    acc = 0.0
                    for j in range(stage):
                        acc += Am[stage, j] * k[j, i]
                    ytmp[i] = y[i] + h * acc
                _rhs(&S, &ytmp[0], &k[stage, 0])
            for i in range(size):
                acc = 0.0
                for j in range(6):
                    acc += B5[j] * k[j, i]
                y5[i] = y[i] + h * acc
            _rhs(&S, &y5[0], &k[6, 0])
            err = 0.0
            for i in range(size):
                acc = 0.0
                for j in range(6):
                    acc += (B5[j] - B4[j]) * k[j, i]
                acc = h * (acc - B4[6] * k[6, i])
                sc = atol + rtol * (fabs(y[i]) if fabs(y[i]) > fabs(y5[i]) else fabs(y5[i]))
                err += (acc / sc) * (acc / sc)
            err = sqrt(err / size)
        if err <= 1.0:
            t = target if landing else t + h
            memcpy(&y[0], &y5[0], size * sizeof(double))
            nsteps += 1
            projected = False
            if _unitarity(n, <double complex *> &y[0], G) > 0.1 * unitarity_tol:
                _newton_schulz(n, <double complex *> &y[0], G, T2)
                projected = True
            if S.replay:
                if _unitarity(n, <double complex *> &y[S.off_v], G) > 0.1 * unitarity_tol:
                    _newton_schulz(n, <double complex *> &y[S.off_v], G, T2)
                    projected = True
            if projected:
                _rhs(&S, &y[0], &k[0, 0])
            else:
                memcpy(&k[0, 0], &k[6, 0], size * sizeof(double))
            if err == 0.0:
                fac = MAX_FACTOR
            else:
                fac = SAFETY * pow(err, -0.2)
                if fac > MAX_FACTOR:
                    fac = MAX_FACTOR
            if landing:
                while i_out < n_out and tout[i_out] <= t + tiny:
                    samples_t.append(tout[i_out])
                    samples_y.append(np.asarray(y).copy())
                    i_out += 1
                if h < hstep:
                    if h * fac > hstep:
                        hstep = h * fac
                else:
                    hstep = h * fac
            else:
                hstep = h * fac
        else:
            nrej += 1
            fac = SAFETY * pow(err, -0.2)
            if fac < MIN_FACTOR:
                fac = MIN_FACTOR
            hstep = h * fac

    y_fin = np.asarray(y)
    off_z, off_phi, off_j, off_v = S.off_z, S.off_phi, S.off_j, S.off_v

    def unpack(yv):
        u = yv[:off_z].view(complex).reshape(n, n).copy()
        z = yv[off_z:off_phi].copy()
        v = yv[off_v:].view(complex).reshape(n, n).copy() if replay else None
        return u, z, v

    u_t, z_t, v_t = unpack(y_fin)
    out = {
        "z": z_t,
        "U": u_t,
        "V": v_t,
        "Phi": y_fin[off_phi:off_j].reshape(d, d).copy() if variational else None,
        "J": y_fin[off_j:off_v].reshape(d, d).copy() if variational else None,
        "nsteps": nsteps,
        "nrejected": nrej,
    }
    if samples_y:
        us, zs, vs = zip(*(unpack(yv) for yv in samples_y))
        out["ts"] = np.array(samples_t)
        out["Us"] = np.array(us)
        out["zs"] = np.array(zs)
        out["Vs"] = np.array(vs) if replay else None
    else:
        out["ts"] = np.zeros(0)
        out["Us"] = np.zeros((0, n, n), dtype=complex)
        out["zs"] = np.zeros((0, d))
        out["Vs"] = None
    return out
