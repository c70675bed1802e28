"""Upper bound ``T*`` on the minimal gate time from fixed-time optimizations.

For each trial duration ``T`` a piecewise-constant control with ``N``
segments, each of norm ``E``, is optimized for gate fidelity.  The smallest
``T`` reaching the fidelity threshold bounds the minimal time from above.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .liealg import SubspaceSplit

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class PiecewiseProtocol:
    controls: np.ndarray  # (N, d_A), each row of norm E
    T: float
    E: float

    @property
    def num_segments(self) -> int:
        return self.controls.shape[0]

    @property
    def segment_duration(self) -> float:
        return self.T / self.num_segments

    def propagator(self, split: SubspaceSplit) -> np.ndarray:
        u = np.eye(split.n, dtype=complex)
        dt = self.segment_duration
        for c in self.controls:
            evals, vecs = np.linalg.eigh(np.tensordot(c, split.elements[: split.dim_a], axes=1))
            u = (vecs * np.exp(-1j * dt * evals)) @ vecs.conj().T @ u
        return u


def _fidelity_and_grad(split: SubspaceSplit, target: np.ndarray, controls: np.ndarray, dt: float):
    """Fidelity ``|Tr(W^dagger U)|^2 / n^2`` and its gradient in the controls."""
    n = split.n
    ops = split.elements[: split.dim_a]
    nseg = controls.shape[0]
    ham = np.tensordot(controls, ops, axes=1)
    evals, vecs = np.linalg.eigh(ham)
    phases = np.exp(-1j * dt * evals)
    props = np.einsum("kab,kb,kcb->kac", vecs, phases, vecs.conj())
    # right products R_k = U_{k-1} ... U_1 and left products L_k = W^dagger U_N ... U_{k+1}
    right = np.empty((nseg, n, n), dtype=complex)
    acc = np.eye(n, dtype=complex)
    for k in range(nseg):
        right[k] = acc
        acc = props[k] @ acc
    g = np.trace(target.conj().T @ acc)
    left = np.empty((nseg, n, n), dtype=complex)
    acc = target.conj().T.copy()
    for k in range(nseg - 1, -1, -1):
        left[k] = acc
        acc = acc @ props[k]
    p = np.einsum("kab,kbc->kac", right, left)
    # Frechet derivative of exp(-i dt H) in the eigenbasis of H
    x = -1j * dt * evals
    diff = x[:, :, None] - x[:, None, :]
    ex = np.exp(x)
    same = np.abs(diff) < 1e-12
    gamma = np.where(same, ex[:, :, None], (ex[:, :, None] - ex[:, None, :]) / np.where(same, 1.0, diff))
    pt = np.einsum("kba,kbc,kcd->kad", vecs.conj(), p, vecs)  # V^dagger P V (transposed below)
    yt = np.einsum("kba,jbc,kcd->kjad", vecs.conj(), -1j * dt * ops, vecs)
    dg = np.einsum("kba,kjab,kab->kj", pt, yt, gamma)
    fid = abs(g) ** 2 / n**2
    grad = 2 * np.real(np.conj(g) * dg) / n**2
    return fid, grad


def _normalize(v: np.ndarray, E: float) -> np.ndarray:
    return E * v / np.linalg.norm(v, axis=1, keepdims=True)


def optimize_fixed_T(split: SubspaceSplit, target: np.ndarray, T: float, E: float = 1.0, N: int = 40,
                     rng_seed: int | None = 0, max_iters: int = 500, init: np.ndarray | None = None,
                     history: list | None = None) -> tuple[PiecewiseProtocol, float]:
    """Maximize gate fidelity over constant-speed piecewise-constant controls.

    Each segment is parametrized as ``E v_k / ||v_k||`` so every iterate
    satisfies the speed constraint; the unconstrained ``v`` are driven by
    L-BFGS, whose line search keeps the fidelity non-decreasing.
    """
    if not T > 0:
        raise ValueError("T must be positive")
    if N < 2:
        raise ValueError("N must be at least 2")
    rng = np.random.default_rng(rng_seed)
    da = split.dim_a
    v0 = rng.normal(size=(N, da)) if init is None else np.asarray(init, dtype=float).reshape(N, da)
    dt = T / N

    def objective(flat):
        v = flat.reshape(N, da)
        nv = np.linalg.norm(v, axis=1, keepdims=True)
        vhat = v / nv
        fid, grad_c = _fidelity_and_grad(split, target, E * vhat, dt)
        # chain rule through the normalization
        radial = np.sum(grad_c * vhat, axis=1, keepdims=True)
        grad_v = E * (grad_c - radial * vhat) / nv
        return -fid, -grad_v.ravel()

    def callback(xk):
        if history is not None:
            history.append(-objective(xk)[0])

    res = minimize(objective, v0.ravel(), jac=True, method="L-BFGS-B", callback=callback,
                   options={"maxiter": max_iters, "gtol": 1e-12, "ftol": 1e-15})
    controls = _normalize(res.x.reshape(N, da), E)
    return PiecewiseProtocol(controls, float(T), float(E)), float(-res.fun)


@dataclass(frozen=True)
class ScanConfig:
    t_min: float
    t_max: float
    step: float = 0.1
    N: int = 40
    restarts: int = 3
    threshold: float = 0.999
    margin: float = 0.05
    bisect_iters: int = 3
    max_iters: int = 500
    rng_seed: int = 0


@dataclass
class TstarResult:
    T_star: float
    confident: bool
    E: float
    margin: float
    table: list = field(default_factory=list)  # (T, best fidelity, stage)

    @property
    def max_norm(self) -> float:
        """Pruning radius ``E T* (1 + margin)`` for the branch list."""
        return self.E * self.T_star * (1 + self.margin)


def best_fidelity(split: SubspaceSplit, target: np.ndarray, T: float, E: float, cfg: ScanConfig,
                  tag: int = 0) -> float:
    best = 0.0
    for r in range(cfg.restarts):
        seed = np.random.SeedSequence([cfg.rng_seed, tag, r])
        _, fid = optimize_fixed_T(split, target, T, E, cfg.N, np.random.default_rng(seed).integers(2**32),
                                  cfg.max_iters)
        best = max(best, fid)
        if best >= cfg.threshold:
            break
    return best


def estimate_Tstar(split: SubspaceSplit, target: np.ndarray, E: float = 1.0,
                   scan_config: ScanConfig | None = None) -> TstarResult:
    """Smallest scanned ``T`` whose best fidelity reaches the threshold.

    The scan walks ``t_min, t_min + step, ...`` upwards; the first success is
    refined by bisection against the preceding failure.  If no grid point
    succeeds, ``t_max`` is returned with ``confident=False``.
    """
    cfg = scan_config
    if cfg is None or not (0 < cfg.t_min <= cfg.t_max):
        raise ValueError("scan range must be positive and ordered")
    count = int(np.floor((cfg.t_max - cfg.t_min) / cfg.step + 1e-9)) + 1
    grid = np.round(cfg.t_min + cfg.step * np.arange(count), 12)
    table = []
    prev = None
    for i, T in enumerate(grid):
        fid = best_fidelity(split, target, float(T), E, cfg, tag=i)
        table.append((float(T), fid, "scan"))
        log.info("T*=scan T=%.4f best fidelity %.6f", T, fid)
        if fid >= cfg.threshold:
            lo, hi = (prev, float(T)) if prev is not None else (None, float(T))
            if lo is not None:
                for j in range(cfg.bisect_iters):
                    mid = 0.5 * (lo + hi)
                    fm = best_fidelity(split, target, mid, E, cfg, tag=10_000 + 100 * i + j)
                    table.append((mid, fm, "bisect"))
                    if fm >= cfg.threshold:
                        hi = mid
                    else:
                        lo = mid
            return TstarResult(hi, True, E, cfg.margin, table)
        prev = float(T)
    return TstarResult(float(cfg.t_max), False, E, cfg.margin, table)
