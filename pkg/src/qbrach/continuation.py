"""Homotopy in the penalty parameter ``q``.

A geodesic ``H_q`` pinned to the target at ``T`` deforms smoothly with ``q``.
Its initial generator obeys ``dH_q(0)/dq = D(U_q, H_q)`` where ``D`` is built
from the linear map

    J_T(K0) = int_0^T U_q(t)^dagger K(t) U_q(t) dt,

``K`` solving the homogeneous linearization of the geodesic equation.  The
path follower uses ``D`` as a predictor and re-shoots the boundary-value
problem as a corrector.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from ._backend import IntegrationError
from ._io import read_json, write_json
from .dynamics import (BrachistochroneState, Trajectory, brachistochrone_rhs, gate_fidelity, geodesic_rhs,
                       integrate_geodesic, run_flow)
from .liealg import HermitianOperator, SubspaceSplit, apply_Fq, apply_Gq, commutator_coeffs
from .shooting import NonConvergence, ShootingProblem, ShootingResult, ShootOptions, SingularJacobian, shoot

log = logging.getLogger(__name__)


class DerivativeUndefined(RuntimeError):
    """``J_T`` is numerically singular; the branch cannot be deformed further."""

    def __init__(self, message: str, cond: float):
        super().__init__(message)
        self.cond = cond


class SpecialCaseZero(RuntimeError):
    """The ``q = 1`` derivative vanishes because the seed's parts commute."""


def _coeffs(x) -> np.ndarray:
    if isinstance(x, HermitianOperator):
        return np.asarray(x.coeffs, dtype=float)
    if isinstance(x, Trajectory):
        return np.asarray(x.generators[0], dtype=float)
    return np.asarray(x, dtype=float)


# ---------------------------------------------------------------- deformation operator

def k_rhs(split: SubspaceSplit, K, H, q: float, include_inhomogeneous: bool = False):
    """Right-hand side of the deformation equation for ``K = dH_q/dq``.

    Homogeneous part ``-i (F_q [K, G_q H] + F_q [H, G_q K])``; the
    inhomogeneous term is ``M = -i F_q^2 [P_A H, P_B H]``.
    """
    k, h = _coeffs(K), _coeffs(H)
    w = split.weights(q)
    out = (commutator_coeffs(split, k, w * h) + commutator_coeffs(split, h, w * k)) / w
    if include_inhomogeneous:
        out = out + commutator_coeffs(split, h * split.mask_a, h * split.mask_b) / w**2
    return split.operator(out) if isinstance(K, HermitianOperator) else out


@dataclass(frozen=True, eq=False)
class DeformationOperator:
    """Dense matrix of ``J_T`` in the split basis."""

    JT_matrix: np.ndarray
    condition_number: float
    grid_size: int
    q: float
    h0: np.ndarray
    final_unitary: np.ndarray | None = None

    def __call__(self, x) -> np.ndarray:
        return self.JT_matrix @ _coeffs(x)

    def solve(self, y) -> np.ndarray:
        return np.linalg.solve(self.JT_matrix, _coeffs(y))


def assemble_JT(split: SubspaceSplit, geodesic, q: float | None = None, T: float = 1.0,
                tol: float = 1e-11) -> DeformationOperator:
    """Assemble ``J_T`` along the geodesic starting at ``H_q(0)``.

    All ``n^2 - 1`` columns are integrated together with the geodesic: the
    tangent flow of the generator equation supplies ``K(t)`` for every basis
    direction and the conjugated time integral is accumulated on the same
    adaptive grid.  ``geodesic`` is a :class:`Trajectory` or the initial
    coefficient vector.
    """
    if isinstance(geodesic, Trajectory):
        q = geodesic.q if q is None else q
        T = geodesic.T
    if q is None:
        raise ValueError("q is required")
    h0 = _coeffs(geodesic)
    out = run_flow(split, "geodesic", h0, T=T, q=q, tol=tol, variational=True)
    jt = out["J"]
    return DeformationOperator(jt, float(np.linalg.cond(jt)), int(out["nsteps"]), float(q), h0.copy(),
                               out["U"])


def _q1_source(split: SubspaceSplit, h: np.ndarray, T: float) -> np.ndarray:
    """``int_0^T t U^dagger (i [P_A H, P_B H]) U dt`` for ``U = exp(-i H t)``, in closed form."""
    y = split.matrix(-commutator_coeffs(split, h * split.mask_a, h * split.mask_b))
    evals, vecs = np.linalg.eigh(split.matrix(h))
    yt = vecs.conj().T @ y @ vecs
    om = evals[:, None] - evals[None, :]
    small = np.abs(om) < 1e-8
    oms = np.where(small, 1.0, om)
    ph = np.exp(1j * oms * T)
    weight = np.where(small, T**2 / 2, ph * (T / (1j * oms) + 1 / oms**2) - 1 / oms**2)
    return split.coefficients(vecs @ (yt * weight) @ vecs.conj().T)


def commutator_norm(split: SubspaceSplit, h) -> float:
    """Frobenius norm of ``[P_A H, P_B H]``."""
    h = _coeffs(h)
    return float(np.linalg.norm(commutator_coeffs(split, h * split.mask_a, h * split.mask_b)))


def detect_special_case(split: SubspaceSplit, H0, tol: float = 1e-10) -> bool:
    """True when the allowed and forbidden parts of ``H0`` commute."""
    return commutator_norm(split, H0) < tol


def derivative_from_JT(split: SubspaceSplit, jt: DeformationOperator, T: float = 1.0,
                       cond_max: float = 1e12) -> np.ndarray:
    if not np.isfinite(jt.condition_number) or jt.condition_number > cond_max:
        raise DerivativeUndefined(
            f"J_T condition number {jt.condition_number:.3e} exceeds {cond_max:.1e} at q={jt.q:.6g}",
            jt.condition_number)
    h, q = jt.h0, jt.q
    if q == 1.0:
        return jt.solve(_q1_source(split, h, T))
    g = split.weights(q) * h
    return (jt.solve(g) * T - g) / (q * (q - 1))


def deformation_derivative(split: SubspaceSplit, geodesic, q: float | None = None, T: float = 1.0,
                           tol: float = 1e-11, cond_max: float = 1e12, return_operator: bool = False):
    """``dH_q(0)/dq`` for a geodesic that solves its boundary-value problem.

    At ``q = 1`` the derivative is ``J_T^{-1}(int t U^dagger i[P_A H, P_B H] U dt)``;
    for ``q > 1`` it is ``(J_T^{-1}(G_q H(0)) T - G_q H(0)) / (q (q - 1))``.
    Raises :class:`SpecialCaseZero` when ``q = 1`` and the parts of the seed
    commute, and :class:`DerivativeUndefined` when ``J_T`` is ill conditioned.
    """
    if isinstance(geodesic, Trajectory):
        q = geodesic.q if q is None else q
        T = geodesic.T
    h = _coeffs(geodesic)
    if q == 1.0 and detect_special_case(split, h):
        raise SpecialCaseZero("allowed and forbidden parts of the seed commute; derivative vanishes at q=1")
    jt = assemble_JT(split, h, q, T, tol)
    d = derivative_from_JT(split, jt, T, cond_max)
    if isinstance(geodesic, HermitianOperator):
        d = split.operator(d)
    return (d, jt) if return_operator else d


def limit_residual(split: SubspaceSplit, geodesic, q: float | None = None, num_samples: int = 129,
                   tol: float = 1e-12) -> float:
    """Brachistochrone-equation residual of ``(mu, lam) = (alpha^q, q beta^q)`` along a geodesic.

    The geodesic equation differs from the brachistochrone equation by
    ``-i [mu, lam] / q``, so the value decays like ``1/q``.  Returned relative
    to the largest brachistochrone field along the curve.
    """
    if isinstance(geodesic, Trajectory):
        q = geodesic.q if q is None else q
    traj = integrate_geodesic(split, _coeffs(geodesic), q, 1.0, tol, num_samples=num_samples)
    lift = split.mask_a + q * split.mask_b
    worst = scale = 0.0
    for h in traj.generators:
        dz_geo = lift * geodesic_rhs(split, h, q)
        dz_qbe = brachistochrone_rhs(split, BrachistochroneState.from_vector(split, lift * h)).vector()
        worst = max(worst, float(np.linalg.norm(dz_geo - dz_qbe)))
        scale = max(scale, float(np.linalg.norm(dz_qbe)))
    return worst / scale if scale > 0 else worst


# ---------------------------------------------------------------- path following

@dataclass
class PathSample:
    q: float
    h0: np.ndarray
    fidelity: float
    cond: float
    residual: float
    dq: float = 0.0
    corrector_shift: float = 0.0
    derivative_norm: float = 0.0

    def to_json(self) -> dict:
        out = asdict(self)
        out["h0"] = np.asarray(self.h0).tolist()
        return out

    @classmethod
    def from_json(cls, d: dict) -> "PathSample":
        d = dict(d)
        d["h0"] = np.asarray(d["h0"], dtype=float)
        return cls(**d)


@dataclass
class QPath:
    """Samples ``(q, H_q(0))`` along one branch.

    ``status`` is ``"extending"``, ``"terminated"`` (with ``q_stop`` and
    ``reason``) or ``"completed"``.
    """

    branch_index: int
    samples: list = field(default_factory=list)
    status: str = "extending"
    q_stop: float | None = None
    reason: str = ""
    q_max: float = 100.0
    sector: int = 0
    wall_time: float = 0.0

    @property
    def last(self) -> PathSample:
        return self.samples[-1]

    @property
    def qs(self) -> np.ndarray:
        return np.array([s.q for s in self.samples])

    def sample_at(self, q: float, atol: float = 1e-9) -> PathSample:
        for s in self.samples:
            if abs(s.q - q) <= atol:
                return s
        raise KeyError(f"no sample at q={q}")

    def to_json(self) -> dict:
        return {
            "schema_version": 1,
            "branch_index": self.branch_index,
            "status": self.status,
            "q_stop": self.q_stop,
            "reason": self.reason,
            "q_max": self.q_max,
            "sector": self.sector,
            "wall_time": self.wall_time,
            "samples": [s.to_json() for s in self.samples],
        }

    @classmethod
    def from_json(cls, d: dict) -> "QPath":
        return cls(
            branch_index=d["branch_index"],
            samples=[PathSample.from_json(s) for s in d["samples"]],
            status=d["status"],
            q_stop=d.get("q_stop"),
            reason=d.get("reason", ""),
            q_max=d.get("q_max", 100.0),
            sector=d.get("sector", 0),
            wall_time=d.get("wall_time", 0.0),
        )

    def save(self, path) -> None:
        write_json(path, self.to_json())

    @classmethod
    def load(cls, path) -> "QPath":
        return cls.from_json(read_json(path))


@dataclass(frozen=True)
class StepControl:
    dq0: float = 0.25
    dq_min: float = 1e-3
    dq_max: float = 2.0
    grow: float = 1.5
    grow_threshold: float = 1e-3     # corrector shift per unit dq that allows growth
    max_predictor_step: float = 0.5  # cap on ||dq * dH/dq||
    corrector_tol: float = 1e-10
    corrector_accept: float = 1e-8   # residual accepted when Newton stalls on integrator noise
    corrector_iters: int = 12
    integrator_tol: float = 1e-10
    cond_max: float = 1e12
    corrector: bool = True
    record_every: float = 0.0        # 0 keeps every accepted step


def _replay_fidelity(split, h, q, target, tol):
    out = run_flow(split, "geodesic", h, q=q, tol=tol, replay=True)
    return gate_fidelity(out["V"], target, check=False)


def _correct(split, target, x, q, ctl: StepControl) -> ShootingResult:
    prob = ShootingProblem("geodesic", split, target, q=q, tol=ctl.integrator_tol, max_steps=50_000)
    opts = ShootOptions(max_iters=ctl.corrector_iters, residual_tol=ctl.corrector_tol,
                        accept_tol=max(ctl.corrector_accept, ctl.corrector_tol), jacobian="variational",
                        cond_max=ctl.cond_max * 100)
    try:
        return shoot(prob, x, opts, raise_on_failure=False)
    except (NonConvergence, SingularJacobian, IntegrationError) as exc:
        log.debug("corrector failed at q=%.6g: %s", q, exc)
        return ShootingResult(np.asarray(x), np.inf, 0, False)


def continue_path(split: SubspaceSplit, target: np.ndarray, seed, q_max: float = 100.0,
                  step_control: StepControl | None = None, q_start: float = 1.0,
                  branch_index: int = 0, sector: int = 0, fidelity_target: np.ndarray | None = None,
                  checkpoint=None, resume: QPath | None = None, progress=None) -> QPath:
    """Follow a geodesic from ``q_start`` to ``q_max``.

    ``seed`` is a :class:`~qbrach.liealg.BranchSeed`, an operator or a
    coefficient vector solving the boundary-value problem at ``q_start``;
    ``target`` must carry the phase sector of the seed.  Each step predicts
    with the deformation derivative and corrects by re-shooting; on corrector
    failure the step is halved, and below ``dq_min`` the path is terminated.
    A terminated path is returned, not raised.
    """
    ctl = step_control or StepControl()
    fid_target = target if fidelity_target is None else fidelity_target
    t0 = time.perf_counter()
    if resume is not None:
        path = resume
        path.status = "extending"
        path.q_max = q_max
        q = path.last.q
        h = path.last.h0.copy()
        dq = path.last.dq or ctl.dq0
    else:
        h = _coeffs(seed.coeffs if hasattr(seed, "phase_sector") else seed).copy()
        q = float(q_start)
        path = QPath(branch_index=branch_index, q_max=q_max, sector=sector)
        if q == 1.0 and detect_special_case(split, h):
            raise SpecialCaseZero("seed is a special case; bootstrap at q'>1 first")
        res = _correct(split, target, h, q, ctl)
        if not res.converged:
            path.status, path.q_stop, path.reason = "terminated", q, "seed does not solve its boundary-value problem"
            return path
        h = res.initial_data
        jt = assemble_JT(split, h, q, tol=ctl.integrator_tol)
        path.samples.append(PathSample(q, h.copy(), _replay_fidelity(split, h, q, fid_target, ctl.integrator_tol),
                                       jt.condition_number, res.residual_norm))
        dq = ctl.dq0
    last_recorded = q

    def stop(reason):
        path.status, path.q_stop, path.reason = "terminated", q, reason
        log.info("branch %d terminated at q=%.6g: %s", path.branch_index, q, reason)

    while q < q_max - 1e-12:
        try:
            jt = assemble_JT(split, h, q, tol=ctl.integrator_tol)
            deriv = derivative_from_JT(split, jt, cond_max=ctl.cond_max)
        except DerivativeUndefined as exc:
            stop(str(exc))
            break
        except IntegrationError as exc:
            stop(f"geodesic integration failed: {exc}")
            break
        dnorm = float(np.linalg.norm(deriv))
        while True:
            step = min(dq, q_max - q)
            if dnorm * step > ctl.max_predictor_step and dq > ctl.dq_min:
                dq /= 2
                continue
            pred = h + step * deriv
            if not ctl.corrector:
                res = ShootingResult(pred, float("nan"), 0, True)
                break
            res = _correct(split, target, pred, q + step, ctl)
            if res.converged:
                break
            dq /= 2
            if dq < ctl.dq_min:
                break
        if not res.converged:
            stop(f"corrector failed with dq < {ctl.dq_min:g}")
            break
        shift = float(np.linalg.norm(res.initial_data - pred))
        q = q + step
        h = res.initial_data
        if step == dq and shift < ctl.grow_threshold * step:
            dq = min(dq * ctl.grow, ctl.dq_max)
        if q >= q_max - 1e-12 or q - last_recorded >= ctl.record_every - 1e-12:
            try:
                fid = _replay_fidelity(split, h, q, fid_target, ctl.integrator_tol)
            except IntegrationError as exc:
                stop(f"replay failed: {exc}")
                break
            path.samples.append(PathSample(q, h.copy(), fid, jt.condition_number, res.residual_norm,
                                           step, shift, dnorm))
            last_recorded = q
            if progress is not None:
                progress(path)
            if checkpoint is not None:
                path.wall_time = time.perf_counter() - t0
                path.save(checkpoint)
    else:
        path.status = "completed"
        path.q_stop = q
    path.wall_time = time.perf_counter() - t0
    if checkpoint is not None:
        path.save(checkpoint)
    return path


def integrate_deformation(split: SubspaceSplit, target: np.ndarray, seed, q_start: float, q_end: float,
                          dq: float = 0.05, tol: float = 1e-11) -> np.ndarray:
    """Integrate ``dH_q(0)/dq`` with classical RK4 and no corrector."""
    h = _coeffs(seed).copy()
    q = float(q_start)

    def f(qq, hh):
        return deformation_derivative(split, hh, qq, tol=tol)

    while q < q_end - 1e-12:
        s = min(dq, q_end - q)
        k1 = f(q, h)
        k2 = f(q + s / 2, h + s / 2 * k1)
        k3 = f(q + s / 2, h + s / 2 * k2)
        k4 = f(q + s, h + s * k3)
        h = h + s / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        q += s
    return h


# ---------------------------------------------------------------- special case

def bootstrap_special(split: SubspaceSplit, target: np.ndarray, q_prime: float = 5.0, num_guesses: int = 40,
                      rng_seed: int = 0, low: float = -3.0, high: float = 3.0,
                      options: ShootOptions | None = None, tol: float = 1e-11,
                      dedup_tol: float = 1e-6, center=None, special_tol: float = 1e-6) -> list[ShootingResult]:
    """Shoot the geodesic problem at ``q'`` from random guesses.

    Guesses are ``center + u`` with ``u`` drawn componentwise from
    ``U[low, high]`` by ``numpy.random.default_rng(rng_seed)``; without a
    center they are plain uniform draws.  Converged solutions whose allowed and
    forbidden parts commute (to ``special_tol``) are discarded, since they are
    the constant geodesics the bootstrap is meant to leave.  The rest are
    deduplicated and sorted by ``||H(0)||``.
    """
    if not q_prime > 1:
        raise ValueError("q_prime must exceed 1")
    rng = np.random.default_rng(rng_seed)
    guesses = rng.uniform(low, high, size=(num_guesses, split.dim))
    if center is not None:
        guesses = guesses + _coeffs(center)
    prob = ShootingProblem("geodesic", split, target, q=q_prime, tol=tol, max_steps=50_000)
    opts = options or ShootOptions(max_iters=60, residual_tol=1e-10, jacobian="variational")
    found: list[ShootingResult] = []
    for i, g in enumerate(guesses):
        try:
            res = shoot(prob, g, opts, raise_on_failure=False)
        except (NonConvergence, SingularJacobian, IntegrationError):
            continue
        if not res.converged:
            continue
        if commutator_norm(split, res.initial_data) < special_tol:
            continue
        if any(np.linalg.norm(res.initial_data - o.initial_data) < dedup_tol for o in found):
            continue
        log.debug("bootstrap guess %d converged: |H0|=%.6f", i, np.linalg.norm(res.initial_data))
        found.append(res)
    found.sort(key=lambda r: float(np.linalg.norm(r.initial_data)))
    return found
