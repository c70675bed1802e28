"""Pure-Python (numpy) flow kernel; mirrors ``_flow.pyx`` step for step.

The kernel integrates the coupled system

    dz_c/dt = s_c * sum_ab f_abc (a_a z_a) (b_b z_b)
    dU/dt   = -i (sum_c e_c z_c C_c) U

with an adaptive Dormand-Prince 5(4) pair.  Optional extras are the
tangent flow ``Phi`` of the ``z`` equation together with the accumulated
integral ``J = int Ad(U^dagger) diag(e) Phi dt``, and a replay propagator
``V`` driven by ``sum_c r_c z_c C_c``.
"""
from __future__ import annotations

import numpy as np

from ._tableau import A, B4, B5

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 5.0


class IntegrationError(RuntimeError):
    def __init__(self, message: str, t_last: float):
        super().__init__(f"{message} (last good t={t_last:.6g})")
        self.t_last = t_last


def _newton_schulz(u: np.ndarray) -> np.ndarray:
    eye = np.eye(u.shape[0])
    for _ in range(3):
        u = 0.5 * u @ (3 * eye - u.conj().T @ u)
    return u


def flow(f, a, b, s, e, r, elements, z0, u0, T, rtol, atol, t_out,
         variational=False, replay=False, max_steps=200000, unitarity_tol=1e-10):
    d = z0.shape[0]
    n = elements.shape[1]
    nn = n * n
    cflat = elements.reshape(d, nn)
    fmat = f.reshape(d, d * d)          # f[a, (b, c)]
    f_t = f.transpose(0, 2, 1).copy()   # f[a, c, b]

    off_u = 0
    off_z = 2 * nn
    off_phi = off_z + d
    off_j = off_phi + (d * d if variational else 0)
    off_v = off_j + (d * d if variational else 0)
    size = off_v + (2 * nn if replay else 0)

    y = np.zeros(size)
    y[off_u:off_z] = np.ascontiguousarray(u0, dtype=complex).view(float).ravel()
    y[off_z:off_phi] = z0
    if variational:
        y[off_phi:off_j] = np.eye(d).ravel()
    if replay:
        y[off_v:] = np.eye(n, dtype=complex).view(float).ravel()

    def rhs(yv):
        dy = np.empty_like(yv)
        u = yv[off_u:off_z].view(complex).reshape(n, n)
        z = yv[off_z:off_phi]
        x = a * z
        w = b * z
        m = (x @ fmat).reshape(d, d)   # m[b, c] = sum_a f_abc x_a
        dy[off_z:off_phi] = s * (w @ m)
        h = ((e * z) @ cflat).reshape(n, n)
        dy[off_u:off_z] = (-1j * (h @ u)).view(float).ravel()
        if variational:
            phi = yv[off_phi:off_j].reshape(d, d)
            fy = f_t @ w               # fy[k, c] = sum_b f_kbc w_b
            lin = s[:, None] * (a[None, :] * fy.T + b[None, :] * m.T)
            dy[off_phi:off_j] = (lin @ phi).ravel()
            wmat = u.conj().T @ elements @ u
            ad = (cflat @ wmat.transpose(0, 2, 1).reshape(d, nn).T).real
            dy[off_j:off_v] = (ad @ (e[:, None] * phi)).ravel()
        if replay:
            v = yv[off_v:].view(complex).reshape(n, n)
            g = ((r * z) @ cflat).reshape(n, n)
            dy[off_v:] = (-1j * (g @ v)).view(float).ravel()
        return dy

    t_out = np.asarray(t_out, dtype=float)
    samples_t, samples_y = [], []
    i_out = 0
    while i_out < len(t_out) and t_out[i_out] <= 0.0:
        samples_t.append(0.0)
        samples_y.append(y.copy())
        i_out += 1

    k = np.empty((7, size))
    k[0] = rhs(y)
    # initial step (Hairer-Wanner heuristic)
    sc = atol + rtol * np.abs(y)
    d0 = np.sqrt(np.mean((y / sc) ** 2))
    d1 = np.sqrt(np.mean((k[0] / sc) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, T)
    y1 = y + h0 * k[0]
    d2 = np.sqrt(np.mean(((rhs(y1) - k[0]) / sc) ** 2)) / h0
    h1 = max(1e-6 * h0, 1e-3) if max(d1, d2) <= 1e-15 else (0.01 / max(d1, d2)) ** 0.2
    hstep = min(100 * h0, h1, T)

    t = 0.0
    nsteps = nrej = 0
    while t < T:
        if nsteps + nrej >= max_steps:
            raise IntegrationError("maximum number of steps exceeded", t)
        if hstep < 1e-14 * max(1.0, T):
            raise IntegrationError("step size underflow", t)
        target = T if i_out >= len(t_out) else min(T, t_out[i_out])
        h = hstep
        landing = False
        if t + h >= target - 1e-13 * max(1.0, T):
            h = target - t
            landing = True
        for i in range(1, 6):
            k[i] = rhs(y + h * (A[i, :i] @ k[:i]))
        y5 = y + h * (B5 @ k[:6])
        k[6] = rhs(y5)
        err_vec = h * ((B5 - B4[:6]) @ k[:6] - B4[6] * k[6])
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y5))
        err = np.sqrt(np.mean((err_vec / scale) ** 2))
        if err <= 1.0:
            t = target if landing else t + h
            y = y5
            nsteps += 1
            projected = False
            u = y[off_u:off_z].view(complex).reshape(n, n)
            if np.abs(u.conj().T @ u - np.eye(n)).max() > 0.1 * unitarity_tol:
                y[off_u:off_z] = _newton_schulz(u).view(float).ravel()
                projected = True
            if replay:
                v = y[off_v:].view(complex).reshape(n, n)
                if np.abs(v.conj().T @ v - np.eye(n)).max() > 0.1 * unitarity_tol:
                    y[off_v:] = _newton_schulz(v).view(float).ravel()
                    projected = True
            k[0] = rhs(y) if projected else k[6]
            fac = MAX_FACTOR if err == 0 else min(MAX_FACTOR, SAFETY * err ** -0.2)
            if landing:
                while i_out < len(t_out) and t_out[i_out] <= t + 1e-13 * max(1.0, T):
                    samples_t.append(t_out[i_out])
                    samples_y.append(y.copy())
                    i_out += 1
                hstep = max(hstep, h * fac) if h < hstep else h * fac
            else:
                hstep = h * fac
        else:
            nrej += 1
            hstep = h * max(MIN_FACTOR, SAFETY * err ** -0.2)

    def unpack(yv):
        u = yv[off_u:off_z].view(complex).reshape(n, n).copy()
        z = yv[off_z:off_phi].copy()
        v = yv[off_v:].view(complex).reshape(n, n).copy() if replay else None
        return u, z, v

    u_t, z_t, v_t = unpack(y)
    out = {
        "z": z_t,
        "U": u_t,
        "V": v_t,
        "Phi": y[off_phi:off_j].reshape(d, d).copy() if variational else None,
        "J": y[off_j:off_v].reshape(d, d).copy() if variational else None,
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
