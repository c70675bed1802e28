"""Shooting solver for the geodesic and brachistochrone boundary-value problems.

Both problems are posed on ``[0, T]`` with ``U(0) = I`` and ask for initial
data whose flow ends on a fixed target.  The residual is the Hermitian
logarithm of the endpoint mismatch expressed in the split basis, which gives
a square system of ``n^2 - 1`` equations.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import schur

from ._backend import IntegrationError
from .dynamics import Trajectory, integrate_brachistochrone, integrate_geodesic, run_flow
from .liealg import SubspaceSplit, unitarity_error

log = logging.getLogger(__name__)

BRANCH_CUT_MARGIN = 0.1


class NonConvergence(RuntimeError):
    """Newton iterations exhausted or stalled; ``result`` holds the last iterate."""

    def __init__(self, message: str, result: "ShootingResult"):
        super().__init__(message)
        self.result = result


class SingularJacobian(RuntimeError):
    def __init__(self, message: str, result: "ShootingResult", cond: float):
        super().__init__(message)
        self.result = result
        self.cond = cond


class ProbeError(RuntimeError):
    """A finite-difference probe of the residual failed."""

    def __init__(self, index: int, cause: Exception):
        super().__init__(f"residual evaluation failed while probing coordinate {index}: {cause}")
        self.index = index
        self.cause = cause


@dataclass(frozen=True, eq=False)
class ShootingProblem:
    """Boundary-value problem ``U(T; x0) = target``.

    ``family`` is ``"geodesic"`` (unknowns: coefficients of ``H_q(0)``) or
    ``"brachistochrone"`` (unknowns: stacked ``(mu0, lambda0)``).  The target
    must already carry its phase sector.
    """

    family: str
    split: SubspaceSplit
    target: np.ndarray
    q: float = 1.0
    T: float = 1.0
    tol: float = 1e-12
    residual_mode: str = "log"
    max_steps: int = 200_000

    def __post_init__(self):
        if self.family not in ("geodesic", "brachistochrone"):
            raise ValueError(f"unknown family {self.family!r}")
        if not self.T > 0:
            raise ValueError("T must be positive")
        if self.family == "geodesic" and self.q < 1:
            raise ValueError("geodesic family needs q >= 1")
        if unitarity_error(self.target) > 1e-10:
            raise ValueError("target must be unitary within 1e-10")
        if self.residual_mode not in ("log", "frobenius"):
            raise ValueError(f"unknown residual mode {self.residual_mode!r}")

    @property
    def kind(self) -> str:
        return self.family

    def endpoint(self, x0, variational: bool = False) -> dict:
        return run_flow(self.split, self.family, x0, T=self.T, q=self.q, tol=self.tol,
                        variational=variational, max_steps=self.max_steps)

    def trajectory(self, x0, num_samples: int = 65) -> Trajectory:
        x0 = np.asarray(x0, dtype=float)
        if self.family == "geodesic":
            return integrate_geodesic(self.split, x0, self.q, self.T, self.tol, num_samples=num_samples)
        d = self.split.dim_a
        return integrate_brachistochrone(self.split, x0[:d], x0[d:], self.T, self.tol,
                                         num_samples=num_samples)


@dataclass(frozen=True)
class ShootOptions:
    """Globalization and stopping parameters for :func:`shoot`."""

    max_iters: int = 100
    residual_tol: float = 1e-12
    step_tol: float = 1e-14
    accept_tol: float = 1e-10      # residual accepted when the step stalls
    fd_step: float = 1e-6
    max_halvings: int = 8
    armijo: float = 1e-4
    lm_after: int = 2
    cond_max: float = 1e14
    max_step_ratio: float = 1.0    # steps are clipped to this fraction of max(1, ||x||)
    jacobian: str = "fd"           # or "variational"
    rng_seed: int | None = None


@dataclass(eq=False)
class ShootingResult:
    initial_data: np.ndarray
    residual_norm: float
    iterations: int
    converged: bool
    problem: ShootingProblem | None = None
    trajectory: Trajectory | None = None
    history: list = field(default_factory=list)
    cond: float = float("nan")
    endpoint_jacobian: np.ndarray | None = None

    def replay(self, num_samples: int = 65) -> Trajectory:
        return self.problem.trajectory(self.initial_data, num_samples)


def mismatch_coordinates(split: SubspaceSplit, u_end: np.ndarray, target: np.ndarray,
                         mode: str = "log") -> np.ndarray:
    """Coordinates of the endpoint mismatch ``M = U(T)^dagger target``.

    In ``"log"`` mode these are the coefficients of ``-i log M`` (principal
    branch); close to the branch cut, or in ``"frobenius"`` mode, the
    coefficients of the Hermitian part ``(M - M^dagger) / (2i)`` are used.
    """
    m = u_end.conj().T @ target
    if mode == "log":
        t, z = schur(m, output="complex")
        phases = np.angle(np.diag(t))
        if np.abs(phases).max() < np.pi - BRANCH_CUT_MARGIN:
            return split.coefficients((z * phases) @ z.conj().T)
    return split.coefficients((m - m.conj().T) / 2j)


def residual(problem: ShootingProblem, x0) -> np.ndarray:
    """Mismatch coordinates of the flow started at ``x0``."""
    x0 = np.asarray(x0, dtype=float)
    if not np.all(np.isfinite(x0)):
        raise ValueError("x0 must be finite")
    out = problem.endpoint(x0)
    return mismatch_coordinates(problem.split, out["U"], problem.target, problem.residual_mode)


def jacobian(problem: ShootingProblem, x0, fd_step: float = 1e-6) -> np.ndarray:
    """Central finite-difference Jacobian of :func:`residual`.

    The probe width for coordinate ``i`` is ``max(fd_step, fd_step * |x0_i|)``.
    """
    x0 = np.asarray(x0, dtype=float)
    d = x0.size
    jac = np.empty((d, d))
    for i in range(d):
        h = max(fd_step, fd_step * abs(x0[i]))
        xp = x0.copy()
        xm = x0.copy()
        xp[i] += h
        xm[i] -= h
        try:
            jac[:, i] = (residual(problem, xp) - residual(problem, xm)) / (2 * h)
        except (IntegrationError, ValueError, np.linalg.LinAlgError) as exc:
            raise ProbeError(i, exc) from exc
    return jac


def _variational(problem: ShootingProblem, x):
    """Residual and the integrated tangent map (exact Jacobian at a root)."""
    out = problem.endpoint(x, variational=True)
    r = mismatch_coordinates(problem.split, out["U"], problem.target, problem.residual_mode)
    return r, out["J"]


def _safe_norm(problem, x):
    try:
        return float(np.linalg.norm(residual(problem, x)))
    except IntegrationError:
        return np.inf


def shoot(problem: ShootingProblem, x0_guess, options: ShootOptions | None = None,
          raise_on_failure: bool = True) -> ShootingResult:
    """Damped Newton with backtracking and a Levenberg-Marquardt fallback.

    Each iteration tries the Newton step with damping ``1, 1/2, ..., 1/2^k``
    until the Armijo condition on ``||r||^2`` holds.  Once the undamped step
    has been rejected in ``lm_after`` iterations, later iterations use
    Levenberg-Marquardt steps with an adaptive regularization; they are also
    used whenever backtracking is exhausted.  Every step is clipped to length
    ``max_step_ratio * max(1, ||x||)`` so that a nearly singular Jacobian cannot
    send the flow to huge initial data.  Iteration stops on
    ``||r|| < residual_tol``, on a step shorter than ``step_tol`` or after
    ``max_iters`` iterations.
    """
    opt = options or ShootOptions()
    x = np.asarray(x0_guess, dtype=float).copy()
    if not np.all(np.isfinite(x)):
        raise ValueError("initial guess must be finite")
    history = []
    full_rejects = 0
    lm_mu = 1e-3
    cond = float("nan")
    jac = None
    it = 0

    def result(conv, rn, it_):
        return ShootingResult(x.copy(), rn, it_, conv, problem, history=history, cond=cond,
                              endpoint_jacobian=jac)

    try:
        if opt.jacobian == "variational":
            r, jac = _variational(problem, x)
        else:
            r = residual(problem, x)
    except IntegrationError as exc:
        res = result(False, np.inf, 0)
        if raise_on_failure:
            raise NonConvergence(f"initial guess cannot be integrated: {exc}", res) from exc
        return res
    rn = float(np.linalg.norm(r))
    history.append(rn)
    for it in range(1, opt.max_iters + 1):
        if rn < opt.residual_tol:
            return result(True, rn, it - 1)
        if opt.jacobian != "variational":
            try:
                jac = jacobian(problem, x, opt.fd_step)
            except ProbeError as exc:
                res = result(False, rn, it)
                if raise_on_failure:
                    raise NonConvergence(str(exc), res) from exc
                return res
        cond = float(np.linalg.cond(jac))
        if cond > opt.cond_max:
            res = result(False, rn, it)
            if raise_on_failure:
                raise SingularJacobian(f"Jacobian condition number {cond:.3e} exceeds {opt.cond_max:.1e}",
                                       res, cond)
            return res
        accepted = None
        radius = opt.max_step_ratio * max(1.0, float(np.linalg.norm(x)))

        def clip(v):
            nv = np.linalg.norm(v)
            return v * (radius / nv) if nv > radius else v

        if full_rejects < opt.lm_after:
            dx = clip(np.linalg.solve(jac, -r))
            for k in range(opt.max_halvings + 1):
                lam = 0.5**k
                trial = x + lam * dx
                tn = _safe_norm(problem, trial)
                if tn**2 <= (1 - 2 * opt.armijo * lam) * rn**2:
                    accepted = (trial, lam * dx)
                    break
                if k == 0:
                    full_rejects += 1
        if accepted is None:
            g = jac.T @ r
            jtj = jac.T @ jac
            scale = np.diag(jtj).max()
            for _ in range(12):
                dx = clip(np.linalg.solve(jtj + lm_mu * scale * np.eye(len(x)), -g))
                trial = x + dx
                tn = _safe_norm(problem, trial)
                if tn < rn:
                    lm_mu = max(lm_mu / 10, 1e-12)
                    accepted = (trial, dx)
                    break
                lm_mu *= 10
        if accepted is None:
            res = result(rn < opt.accept_tol, rn, it)
            if res.converged:
                return res
            if raise_on_failure:
                raise NonConvergence(f"no descent step found at iteration {it} (|r|={rn:.3e})", res)
            return res
        x, step = accepted
        if opt.jacobian == "variational":
            r, jac = _variational(problem, x)
        else:
            r = residual(problem, x)
        rn = float(np.linalg.norm(r))
        history.append(rn)
        log.debug("shoot it=%d |r|=%.3e |dx|=%.3e", it, rn, np.linalg.norm(step))
        if np.linalg.norm(step) < opt.step_tol * max(1.0, np.linalg.norm(x)):
            res = result(rn < max(opt.residual_tol, opt.accept_tol), rn, it)
            if res.converged or not raise_on_failure:
                return res
            raise NonConvergence(f"step stalled with |r|={rn:.3e}", res)
    res = result(rn < opt.residual_tol, rn, opt.max_iters)
    if res.converged or not raise_on_failure:
        return res
    raise NonConvergence(f"{opt.max_iters} iterations exhausted (|r|={rn:.3e})", res)


def shoot_homotopy(problem: ShootingProblem, x0_guess, options: ShootOptions | None = None,
                   ds0: float = 1.0, ds_min: float = 1e-3, ds_max: float = 0.5, stage_iters: int = 10,
                   stage_tol: float = 1e-10, raise_on_failure: bool = True) -> ShootingResult:
    """Shoot along a path of targets from the guess's own endpoint to the real target.

    With ``U0`` the endpoint of the guess and ``M = U0^dagger target = Z diag(e^{i phi}) Z^dagger``,
    the stage targets are ``U0 Z diag(e^{i s phi}) Z^dagger`` for ``s`` rising to 1.  The first
    stage tries ``s = ds0`` (the full target by default).  Failed stages are retried with half
    the increment; accepted ones grow it by 1.5 up to ``ds_max``.  Each stage starts from a
    secant extrapolation of the previous two solutions.  Intermediate stages are solved
    to ``stage_tol`` with at most ``stage_iters`` iterations and the variational Jacobian; the
    final stage uses ``options`` (capped at ``2 stage_iters`` iterations when tried directly).
    """
    opt = options or ShootOptions()
    x = np.asarray(x0_guess, dtype=float).copy()
    try:
        u0 = problem.endpoint(x)["U"]
    except IntegrationError as exc:
        res = ShootingResult(x, np.inf, 0, False, problem)
        if raise_on_failure:
            raise NonConvergence(f"initial guess cannot be integrated: {exc}", res) from exc
        return res
    t, z = schur(u0.conj().T @ problem.target, output="complex")
    phases = np.angle(np.diag(t))

    def stage_target(s):
        return u0 @ (z * np.exp(1j * s * phases)) @ z.conj().T

    s, ds, total = 0.0, ds0, 0
    last = None
    velocity = None   # dx/ds from the last two accepted stages (secant predictor)
    while True:
        step = min(ds, 1.0 - s)
        final = s + step >= 1.0 - 1e-14
        prob = problem if final else replace(problem, target=stage_target(s + step))
        if not final:
            stage_opt = replace(opt, max_iters=stage_iters, residual_tol=stage_tol, jacobian="variational",
                                accept_tol=max(opt.accept_tol, stage_tol))
        elif s == 0.0:
            stage_opt = replace(opt, max_iters=min(opt.max_iters, 2 * stage_iters))
        else:
            stage_opt = opt
        start = x if velocity is None else x + step * velocity
        last = shoot(prob, start, stage_opt, raise_on_failure=False)
        total += last.iterations
        if last.converged:
            if s > 0 or not final:
                velocity = (last.initial_data - x) / step
            x = last.initial_data
            log.debug("homotopy stage s=%.4f accepted after %d iterations", s + step, last.iterations)
            if final:
                last.iterations = total
                return last
            s += step
            ds = min(ds * 1.5, ds_max)
            continue
        ds = step / 2
        if ds < ds_min:
            break
    res = ShootingResult(x, last.residual_norm if last is not None else np.inf, total, False, problem,
                         history=last.history if last is not None else [], cond=last.cond if last else np.nan)
    if raise_on_failure:
        raise NonConvergence(f"target homotopy stalled at s={s:.4f} (increment below {ds_min:g})", res)
    return res


def random_restarts(problem: ShootingProblem, num_guesses: int = 100, rng_seed: int = 0,
                    low: float = -3.0, high: float = 3.0, options: ShootOptions | None = None,
                    progress=None) -> list[ShootingResult]:
    """Shoot from ``num_guesses`` componentwise-uniform guesses on ``[low, high]``.

    Guesses come from ``numpy.random.default_rng(rng_seed)`` in one draw of shape
    ``(num_guesses, dim)``, so the i-th guess does not depend on ``num_guesses``.
    """
    opt = options or ShootOptions(jacobian="variational")
    dim = problem.split.dim
    guesses = np.random.default_rng(rng_seed).uniform(low, high, size=(num_guesses, dim))
    results = []
    for i, g in enumerate(guesses):
        try:
            res = shoot(problem, g, opt, raise_on_failure=False)
        except (SingularJacobian, NonConvergence) as exc:
            res = exc.result
        results.append(res)
        if progress is not None:
            progress(i, res)
    return results


def with_trajectory(res: ShootingResult, num_samples: int = 65) -> ShootingResult:
    """Attach the replayed trajectory to a result."""
    return replace(res, trajectory=res.replay(num_samples))
