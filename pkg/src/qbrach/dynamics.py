"""Schrödinger, geodesic and brachistochrone flows, fidelity and protocol export.

Time-independent structure (structure constants, masks) is handed to the flow
kernel in :mod:`qbrach._backend`; the callback-driven Schrödinger integrator
below shares its Dormand-Prince tableau and step control.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.interpolate import CubicSpline

from . import _backend
from ._backend import IntegrationError
from ._io import atomic_write_text, read_json, write_json
from ._tableau import A, B4, B5, C
from .liealg import HermitianOperator, SubspaceSplit, apply_Fq, apply_Gq, q_inner, unitarity_error

UNITARITY_TOL = 1e-10
DEFAULT_SAMPLES = 512


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Sampled solution of one of the flows on ``[0, T]``.

    ``generators`` holds coefficient vectors over ``split``: the geodesic
    generator ``H_q`` for ``kind="geodesic"``, the stacked ``(mu, lambda)``
    for ``kind="brachistochrone"`` and the driving Hamiltonian for
    ``kind="replay"``.  ``replay_unitaries`` is the propagator of the allowed
    part ``P_A(H_q)`` along a geodesic.
    """

    times: np.ndarray
    unitaries: np.ndarray
    generators: np.ndarray | None
    kind: str
    split: SubspaceSplit | None
    final_unitary: np.ndarray
    q: float | None = None
    replay_unitaries: np.ndarray | None = None
    replay_final: np.ndarray | None = None
    conserved: dict = field(default_factory=dict)
    nsteps: int = 0

    @property
    def T(self) -> float:
        return float(self.times[-1])

    def generator(self, i: int) -> HermitianOperator:
        return self.split.operator(self.generators[i])


@dataclass(frozen=True)
class BrachistochroneState:
    """Controls ``mu`` (allowed components) and multipliers ``lam`` (forbidden)."""

    mu: np.ndarray
    lam: np.ndarray

    @classmethod
    def from_vector(cls, split: SubspaceSplit, z) -> "BrachistochroneState":
        z = np.asarray(z, dtype=float)
        return cls(z[: split.dim_a].copy(), z[split.dim_a:].copy())

    def vector(self) -> np.ndarray:
        return np.concatenate([self.mu, self.lam])

    def hamiltonian(self, split: SubspaceSplit) -> np.ndarray:
        return np.tensordot(self.mu, split.elements[: split.dim_a], axes=1)


@dataclass(frozen=True, eq=False)
class ControlProtocol:
    """Constant-speed control schedule ready for export.

    ``mu`` and ``lam`` are sampled on ``times`` (uniform on ``[0, T]``);
    ``||mu(t)|| = E`` at every sample.
    """

    times: np.ndarray
    mu: np.ndarray
    lam: np.ndarray
    E: float
    T: float
    infidelity: float | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def dim_a(self) -> int:
        return self.mu.shape[1]

    @property
    def dim_b(self) -> int:
        return self.lam.shape[1]

    def norm_drift(self) -> float:
        """Max relative deviation of ``||mu(t_i)||`` from ``E``."""
        if self.T == 0:
            return 0.0
        return float(np.abs(np.linalg.norm(self.mu, axis=1) / self.E - 1).max())


# ---------------------------------------------------------------- kernels

def _kernel_params(split: SubspaceSplit, kind: str, q: float = 1.0):
    d = split.dim
    ones = np.ones(d)
    if kind == "geodesic":
        w = split.weights(q)
        return ones, w, 1.0 / w, ones, split.mask_a
    if kind == "brachistochrone":
        return split.mask_a, split.mask_b, ones, split.mask_a, split.mask_a
    raise ValueError(f"unknown flow kind {kind!r}")


def run_flow(split: SubspaceSplit, kind: str, z0, T: float = 1.0, q: float = 1.0,
             tol: float = 1e-12, t_out=(), variational: bool = False, replay: bool = False,
             max_steps: int = 200_000, u0=None) -> dict:
    """Thin wrapper over the backend kernel returning its raw output dict."""
    if not T > 0:
        raise ValueError("T must be positive")
    a, b, s, e, r = _kernel_params(split, kind, q)
    z0 = np.ascontiguousarray(np.asarray(z0, dtype=float))
    if z0.shape != (split.dim,):
        raise ValueError(f"initial vector must have length {split.dim}")
    if not np.all(np.isfinite(z0)):
        raise ValueError("initial vector must be finite")
    u0 = np.eye(split.n, dtype=complex) if u0 is None else np.ascontiguousarray(u0, dtype=complex)
    return _backend.flow(split.f, a, b, s, e, r, split.elements, z0, u0, float(T), tol, tol,
                         np.asarray(t_out, dtype=float), variational=variational,
                         replay=replay, max_steps=max_steps, unitarity_tol=UNITARITY_TOL)


def _grid(T: float, num_samples: int | None, t_out) -> np.ndarray:
    if t_out is not None:
        t_out = np.asarray(t_out, dtype=float)
        if np.any(np.diff(t_out) <= 0) or t_out[0] < 0 or t_out[-1] > T:
            raise ValueError("t_out must be strictly increasing inside [0, T]")
        return t_out
    return np.linspace(0.0, T, num_samples or 65)


# ---------------------------------------------------------------- right-hand sides

def geodesic_rhs(split: SubspaceSplit, H, q: float):
    """Time derivative ``-i F_q([H, G_q H])`` of the geodesic generator."""
    h = np.asarray(H.coeffs if isinstance(H, HermitianOperator) else H, dtype=float)
    if q < 1:
        raise ValueError("geodesic flow needs q >= 1")
    gh = split.weights(q) * h
    out = np.einsum("abc,a,b->c", split.f, h, gh) / split.weights(q)
    return split.operator(out) if isinstance(H, HermitianOperator) else out


def brachistochrone_rhs(split: SubspaceSplit, state: BrachistochroneState) -> BrachistochroneState:
    """Component form of the brachistochrone equation.

    With ``H = sum mu_j A_j`` and ``L = sum lam_k B_k`` both derivatives are
    read off the single bracket ``-i [H, L]``: its allowed part drives ``mu``
    and its forbidden part drives ``lam``.
    """
    if state.mu.shape != (split.dim_a,) or state.lam.shape != (split.dim_b,):
        raise ValueError("state dimensions do not match the split")
    z = state.vector()
    dz = np.einsum("abc,a,b->c", split.f, z * split.mask_a, z * split.mask_b)
    return BrachistochroneState.from_vector(split, dz)


# ---------------------------------------------------------------- integrators

def integrate_geodesic(split: SubspaceSplit, H0, q: float, T: float = 1.0, tol: float = 1e-12,
                       num_samples: int | None = None, t_out=None, max_steps: int = 200_000) -> Trajectory:
    """Integrate ``(U, H_q)`` jointly; also propagates the ``P_A(H_q)`` replay."""
    if q < 1:
        raise ValueError("geodesic flow needs q >= 1")
    h0 = np.asarray(H0.coeffs if isinstance(H0, HermitianOperator) else H0, dtype=float)
    grid = _grid(T, num_samples, t_out)
    out = run_flow(split, "geodesic", h0, T=T, q=q, tol=tol, t_out=grid, replay=True, max_steps=max_steps)
    hs = out["zs"]
    qn = np.array([q_inner(split, h, h, q) for h in hs])
    g0 = split.matrix(split.weights(q) * h0)
    mom = max(
        np.linalg.norm(u.conj().T @ split.matrix(split.weights(q) * h) @ u - g0)
        for u, h in zip(out["Us"], hs)
    )
    conserved = {
        "q_norm_sq": float(qn[0]),
        "q_norm_rel_drift": float(np.abs(qn / qn[0] - 1).max()) if qn[0] > 0 else float(np.abs(qn).max()),
        "momentum_drift": float(mom),
    }
    return Trajectory(out["ts"], out["Us"], hs, "geodesic", split, out["U"], q=q,
                      replay_unitaries=out["Vs"], replay_final=out["V"], conserved=conserved,
                      nsteps=out["nsteps"])


def integrate_brachistochrone(split: SubspaceSplit, mu0, lambda0, T: float = 1.0, tol: float = 1e-12,
                              num_samples: int | None = None, t_out=None,
                              max_steps: int = 200_000) -> Trajectory:
    """Integrate ``(U, mu, lam)``; ``H(t)`` stays in the allowed span by construction."""
    z0 = np.concatenate([np.asarray(mu0, dtype=float), np.asarray(lambda0, dtype=float)])
    grid = _grid(T, num_samples, t_out)
    out = run_flow(split, "brachistochrone", z0, T=T, tol=tol, t_out=grid, max_steps=max_steps)
    zs = out["zs"]
    e2 = np.sum(zs[:, : split.dim_a] ** 2, axis=1)
    l2 = np.sum(zs[:, split.dim_a:] ** 2, axis=1)

    def drift(x):
        return float(np.abs(np.sqrt(x / x[0]) - 1).max()) if x[0] > 0 else float(np.sqrt(x.max()))

    conserved = {
        "H_norm": float(np.sqrt(e2[0])),
        "lambda_norm": float(np.sqrt(l2[0])),
        "H_norm_rel_drift": drift(e2),
        "lambda_norm_rel_drift": drift(l2),
    }
    return Trajectory(out["ts"], out["Us"], zs, "brachistochrone", split, out["U"],
                      conserved=conserved, nsteps=out["nsteps"])


def _dopri_unitary(hfun: Callable[[float], np.ndarray], t0: float, t1: float, u0: np.ndarray,
                   tol: float, t_out: np.ndarray, max_steps: int):
    """Adaptive DOPRI5 for ``dU/dt = -i H(t) U`` between two times."""
    n = u0.shape[0]
    eye = np.eye(n)

    def rhs(t, u):
        return -1j * (hfun(t) @ u)

    def err_norm(v, scale):
        return np.sqrt(np.mean(np.abs(v / scale) ** 2))

    u = u0.copy()
    span = t1 - t0
    samples = []
    k = np.empty((7, n, n), dtype=complex)
    k[0] = rhs(t0, u)
    # Hairer-Wanner starting step
    sc = tol + tol * np.abs(u)
    d0, d1 = err_norm(u, sc), err_norm(k[0], sc)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    d2 = err_norm(rhs(t0 + h0, u + h0 * k[0]) - k[0], sc) / h0
    h1 = max(1e-6 * h0, 1e-3) if max(d1, d2) <= 1e-15 else (0.01 / max(d1, d2)) ** 0.2
    hstep = min(100 * h0, h1, span)
    t = t0
    i_out = 0
    while i_out < len(t_out) and t_out[i_out] <= t0:
        samples.append((t_out[i_out], u.copy()))
        i_out += 1
    nsteps = 0
    while t < t1:
        if nsteps >= max_steps:
            raise IntegrationError("maximum number of steps exceeded", t)
        if hstep < 1e-14 * max(1.0, abs(t1)):
            raise IntegrationError("step size underflow", t)
        target = t1 if i_out >= len(t_out) else min(t1, t_out[i_out])
        h = hstep
        landing = t + h >= target - 1e-13 * max(1.0, abs(t1))
        if landing:
            h = target - t
        for i in range(1, 6):
            k[i] = rhs(t + C[i] * h, u + h * np.tensordot(A[i, :i], k[:i], axes=1))
        u5 = u + h * np.tensordot(B5, k[:6], axes=1)
        k[6] = rhs(t + h, u5)
        err_vec = h * (np.tensordot(B5 - B4[:6], k[:6], axes=1) - B4[6] * k[6])
        err = err_norm(err_vec, tol + tol * np.maximum(np.abs(u), np.abs(u5)))
        nsteps += 1
        if err <= 1.0:
            t = target if landing else t + h
            u = u5
            if np.abs(u.conj().T @ u - eye).max() > 0.1 * UNITARITY_TOL:
                for _ in range(3):
                    u = 0.5 * u @ (3 * eye - u.conj().T @ u)
                k[0] = rhs(t, u)
            else:
                k[0] = k[6]
            fac = 5.0 if err == 0 else min(5.0, 0.9 * err ** -0.2)
            if landing:
                while i_out < len(t_out) and t_out[i_out] <= t + 1e-13 * max(1.0, abs(t1)):
                    samples.append((t_out[i_out], u.copy()))
                    i_out += 1
                hstep = max(hstep, h * fac) if h < hstep else h * fac
            else:
                hstep = h * fac
        else:
            hstep = h * max(0.2, 0.9 * err ** -0.2)
    return u, samples, nsteps


def _controls_callback(split: SubspaceSplit, times, coeffs, interpolation: str):
    times = np.asarray(times, dtype=float)
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape[1] == split.dim_a:
        elements = split.elements[: split.dim_a]
    elif coeffs.shape[1] == split.dim:
        elements = split.elements
    else:
        raise ValueError("control samples must have d_A or n^2-1 columns")
    if interpolation == "cubic":
        spline = CubicSpline(times, coeffs, axis=0)
        return lambda t: np.tensordot(spline(t), elements, axes=1), None
    if interpolation == "previous":
        mats = np.tensordot(coeffs, elements, axes=1)

        def hfun(t):
            i = np.searchsorted(times, t, side="right") - 1
            return mats[min(max(i, 0), len(times) - 1)]

        return hfun, times
    raise ValueError(f"unknown interpolation {interpolation!r}")


def integrate_schrodinger(H_of_t, T: float, tol: float = 1e-10, split: SubspaceSplit | None = None,
                          interpolation: str = "cubic", breakpoints=None, num_samples: int | None = None,
                          t_out=None, max_steps: int = 1_000_000) -> Trajectory:
    """Propagate ``dU/dt = -i H(t) U`` from ``U(0) = I``.

    ``H_of_t`` is either a callable returning a dense Hermitian matrix, or a
    pair ``(times, coeffs)`` of control samples over ``split`` (allowed
    components only, or all components).  Sampled controls are interpolated
    by a cubic spline, or held piecewise constant with
    ``interpolation="previous"`` (segment ``i`` covers ``[times[i], times[i+1])``).
    Integration restarts at every breakpoint so that control discontinuities
    never fall inside a step.
    """
    if not T > 0:
        raise ValueError("T must be positive")
    if callable(H_of_t):
        hfun = H_of_t
        cuts = breakpoints
    else:
        if split is None:
            raise ValueError("sampled controls need a split")
        hfun, cuts = _controls_callback(split, *H_of_t, interpolation)
        cuts = cuts if breakpoints is None else breakpoints
    edges = [0.0, T] if cuts is None else sorted({0.0, T, *[float(c) for c in cuts if 0 < c < T]})
    grid = _grid(T, num_samples, t_out)
    n = np.asarray(hfun(0.0)).shape[0]
    u = np.eye(n, dtype=complex)
    samples = []
    total = 0
    for lo, hi in zip(edges[:-1], edges[1:]):
        width = hi - lo
        # evaluate strictly inside the segment so one-sided limits are used
        seg = (lambda f, lo_, w: (lambda t: f(lo_ + min(max(t - lo_, 1e-12 * w), w * (1 - 1e-12)))))(hfun, lo, width)
        sel = grid[(grid >= lo) & ((grid < hi) | (hi == T))]
        u, seg_samples, steps = _dopri_unitary(seg, lo, hi, u, tol, sel, max_steps)
        samples.extend(seg_samples)
        total += steps
    ts = np.array([s[0] for s in samples])
    us = np.array([s[1] for s in samples])
    return Trajectory(ts, us, None, "replay", split, u, nsteps=total)


# ---------------------------------------------------------------- fidelity and protocols

def gate_fidelity(U: np.ndarray, U_tg: np.ndarray, check: bool = True) -> float:
    """Phase-invariant gate fidelity ``(|Tr(U_tg^dagger U)| / n)^2``."""
    U = np.asarray(U)
    U_tg = np.asarray(U_tg)
    if U.shape != U_tg.shape or U.ndim != 2 or U.shape[0] != U.shape[1]:
        raise ValueError(f"dimension mismatch: {U.shape} vs {U_tg.shape}")
    if check and max(unitarity_error(U), unitarity_error(U_tg)) > 1e-8:
        raise ValueError("fidelity arguments must be unitary within 1e-8")
    n = U.shape[0]
    return float(min(1.0, (abs(np.trace(U_tg.conj().T @ U)) / n) ** 2))


def _protocol_components(traj: Trajectory):
    split = traj.split
    g = traj.generators
    if traj.kind == "brachistochrone":
        return g[:, : split.dim_a], g[:, split.dim_a:]
    if traj.kind == "geodesic":
        # allowed part drives the replay, q * beta approximates the multipliers
        return g[:, : split.dim_a], traj.q * g[:, split.dim_a:]
    if g.shape[1] == split.dim:
        return g[:, : split.dim_a], g[:, split.dim_a:]
    return g, np.zeros((len(g), split.dim_b))


def _arc_length(times, mu):
    """Cumulative ``int ||mu|| dt`` from cubic interpolants (5-point Gauss per interval)."""
    spline = CubicSpline(times, mu, axis=0)
    x, w = np.polynomial.legendre.leggauss(5)
    lo, hi = times[:-1], times[1:]
    nodes = 0.5 * (hi - lo)[:, None] * (x + 1) + lo[:, None]
    vals = np.linalg.norm(spline(nodes.ravel()), axis=1).reshape(nodes.shape)
    seg = 0.5 * (hi - lo) * (vals @ w)
    return spline, np.concatenate([[0.0], np.cumsum(seg)])


def normalize_protocol(traj: Trajectory, E: float, num_samples: int = DEFAULT_SAMPLES,
                       infidelity: float | None = None, metadata: dict | None = None) -> ControlProtocol:
    """Reparametrize a trajectory to constant speed ``||mu|| = E``.

    The new time is ``s(t) = (1/E) int_0^t ||mu||``; controls and multipliers
    are rescaled by ``dt/ds``.  Constant-norm input (the brachistochrone and
    all replay-free cases with uniform sampling) is mapped exactly; general
    input goes through cubic interpolants of the samples.
    """
    if not E > 0:
        raise ValueError("E must be positive")
    mu, lam = _protocol_components(traj)
    times = np.asarray(traj.times, dtype=float)
    norms = np.linalg.norm(mu, axis=1)
    meta = dict(metadata or {})
    if norms.max() < 1e-15:
        return ControlProtocol(np.zeros(1), np.zeros((1, mu.shape[1])), np.zeros((1, lam.shape[1])),
                               float(E), 0.0, infidelity, meta)
    if norms.min() <= 1e-9:
        raise ValueError("control norm vanishes on the trajectory; reparametrization is singular")
    if np.ptp(norms) <= 1e-12 * norms.max():
        speed = norms.mean()
        T_new = speed * (times[-1] - times[0]) / E
        if len(times) == num_samples and np.allclose(np.diff(times), np.diff(times).mean(), rtol=1e-12, atol=0):
            scale = E / norms
            return ControlProtocol(np.linspace(0.0, T_new, num_samples), mu * scale[:, None],
                                   lam * scale[:, None], float(E), float(T_new), infidelity, meta)
        src_t = times[0] + np.linspace(0.0, 1.0, num_samples) * (times[-1] - times[0])
    else:
        spline, s = _arc_length(times, mu)
        T_new = s[-1] / E
        targets = np.linspace(0.0, s[-1], num_samples)
        src_t = np.interp(targets, s, times)
        # Newton polish of s(t) = target on the spline
        x, w = np.polynomial.legendre.leggauss(5)
        for _ in range(4):
            idx = np.clip(np.searchsorted(times, src_t, side="right") - 1, 0, len(times) - 2)
            lo = times[idx]
            nodes = 0.5 * (src_t - lo)[:, None] * (x + 1) + lo[:, None]
            part = 0.5 * (src_t - lo) * (np.linalg.norm(spline(nodes.ravel()), axis=1).reshape(nodes.shape) @ w)
            vals = s[idx] + part
            src_t = np.clip(src_t - (vals - targets) / np.linalg.norm(spline(src_t), axis=1), times[0], times[-1])
        T_new = float(T_new)
    mu_s = CubicSpline(times, mu, axis=0)(src_t)
    lam_s = CubicSpline(times, lam, axis=0)(src_t) if lam.shape[1] else np.zeros((num_samples, 0))
    scale = E / np.linalg.norm(mu_s, axis=1)
    return ControlProtocol(np.linspace(0.0, T_new, num_samples), mu_s * scale[:, None],
                           lam_s * scale[:, None], float(E), float(T_new), infidelity, meta)


def protocol_header(dim_a: int, dim_b: int) -> list[str]:
    return ["t"] + [f"mu_{j + 1}" for j in range(dim_a)] + [f"lambda_{k + 1}" for k in range(dim_b)]


def write_protocol(protocol: ControlProtocol, csv_path) -> tuple[Path, Path]:
    """Write the sample table as CSV and ``E, T, infidelity, metadata`` as a JSON sidecar."""
    csv_path = Path(csv_path)
    rows = [",".join(protocol_header(protocol.dim_a, protocol.dim_b))]
    table = np.column_stack([protocol.times, protocol.mu, protocol.lam])
    rows += [",".join(format(v, ".17g") for v in row) for row in table]
    atomic_write_text(csv_path, "\n".join(rows) + "\n")
    side = csv_path.with_suffix(".json")
    write_json(side, {
        "schema_version": 1,
        "E": protocol.E,
        "T": protocol.T,
        "infidelity": protocol.infidelity,
        "num_samples": len(protocol.times),
        "dim_a": protocol.dim_a,
        "dim_b": protocol.dim_b,
        "metadata": protocol.metadata,
    })
    return csv_path, side


def read_protocol(csv_path) -> ControlProtocol:
    csv_path = Path(csv_path)
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        data = np.array([[float(v) for v in row] for row in reader if row])
    dim_a = sum(h.startswith("mu_") for h in header)
    dim_b = sum(h.startswith("lambda_") for h in header)
    if header != protocol_header(dim_a, dim_b):
        raise ValueError(f"unexpected protocol header in {csv_path}")
    side = csv_path.with_suffix(".json")
    meta = read_json(side) if side.exists() else {}
    E = meta.get("E")
    if E is None:
        E = float(np.linalg.norm(data[0, 1: 1 + dim_a])) if len(data) else 1.0
    T = meta.get("T", float(data[-1, 0]))
    return ControlProtocol(data[:, 0], data[:, 1: 1 + dim_a], data[:, 1 + dim_a:], float(E), float(T),
                           meta.get("infidelity"), meta.get("metadata", {}))


def protocol_from_brachistochrone(split: SubspaceSplit, z0, E: float, target=None,
                                  num_samples: int = DEFAULT_SAMPLES, tol: float = 1e-12,
                                  metadata: dict | None = None) -> ControlProtocol:
    """Sample a brachistochrone solution at ``T=1`` and rescale it to energy ``E``."""
    z0 = np.asarray(z0, dtype=float)
    traj = integrate_brachistochrone(split, z0[: split.dim_a], z0[split.dim_a:], 1.0, tol,
                                     num_samples=num_samples)
    infid = None if target is None else 1.0 - gate_fidelity(traj.final_unitary, target)
    return normalize_protocol(traj, E, num_samples, infidelity=infid, metadata=metadata)
