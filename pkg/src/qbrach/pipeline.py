"""End-to-end solve: branch seeding, q-continuation and the final shooting step.

Problem files are JSON; see ``load_problem`` for the schema and the bundled
fixtures under ``qbrach/data``.
"""
from __future__ import annotations

import hashlib
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from . import __version__
from ._backend import BACKEND, IntegrationError
from ._io import atomic_write_text, dumps, read_json, write_json
from .bounds import ScanConfig, TstarResult, estimate_Tstar
from .continuation import (QPath, SpecialCaseZero, StepControl, bootstrap_special, continue_path,
                           detect_special_case)
from .dynamics import (BrachistochroneState, ControlProtocol, brachistochrone_rhs, gate_fidelity,
                       integrate_geodesic, integrate_schrodinger, protocol_from_brachistochrone,
                       read_protocol, write_protocol)
from .liealg import (PRESETS, BranchSeed, NotUnitaryError, SubspaceSplit, build_pauli_basis, build_split,
                     log_branches, nearest_unitary, to_special_unitary, unitarity_error)
from .shooting import NonConvergence, ShootingProblem, ShootOptions, SingularJacobian, shoot_homotopy

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class ProblemError(ValueError):
    """Schema or validation failure in a problem file."""

    def __init__(self, field_name: str, reason: str):
        super().__init__(f"{field_name}: {reason}")
        self.field = field_name
        self.reason = reason


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """Validated problem description.

    ``target`` is the SU(n)-normalized gate; ``phase`` is the global phase
    applied to the file's matrix (``target = exp(i phase) raw``).
    """

    name: str
    target: np.ndarray
    raw_target: np.ndarray
    phase: float
    E: float = 1.0
    preset: str | None = "two_qubit_heisenberg"
    allowed: np.ndarray | None = None
    num_qubits: int | None = None
    final_tol: float = 1e-12
    residual_tol: float = 1e-12
    continuation_tol: float = 1e-10
    corrector_tol: float = 1e-10
    q_max: float = 100.0
    dq0: float = 0.25
    dq_min: float = 1e-3
    max_shift: int = 2
    T_star: float | None = None
    margin: float = 0.05
    max_branches: int | None = None
    rng_seed: int = 0
    q_prime: float = 5.0
    num_guesses: int = 40
    bootstrap_centered: bool = True
    bootstrap_spread: float = 0.5
    bound_step: float = 0.1
    bound_segments: int = 40
    bound_restarts: int = 3
    bound_threshold: float = 0.999
    bound_t_min: float | None = None
    bound_t_max: float | None = None
    num_samples: int = 512
    unitarize: bool = False
    source: str = ""

    @cached_property
    def split(self) -> SubspaceSplit:
        if self.preset is not None:
            return build_split(None, self.preset)
        return build_split(build_pauli_basis(self.num_qubits), self.allowed)

    @property
    def n(self) -> int:
        return self.target.shape[0]

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "target": {"real": self.raw_target.real.tolist(), "imag": self.raw_target.imag.tolist()},
            "unitarize": self.unitarize,
            "subspace": ({"preset": self.preset} if self.preset is not None
                         else {"num_qubits": self.num_qubits, "allowed": np.asarray(self.allowed).tolist()}),
            "E": self.E,
            "tolerances": {"final": self.final_tol, "residual": self.residual_tol,
                           "continuation": self.continuation_tol, "corrector": self.corrector_tol},
            "q_schedule": {"q_max": self.q_max, "dq0": self.dq0, "dq_min": self.dq_min},
            "branches": {"max_shift": self.max_shift, "T_star": self.T_star, "margin": self.margin,
                         "max_branches": self.max_branches},
            "bootstrap": {"q_prime": self.q_prime, "num_guesses": self.num_guesses,
                          "centered": self.bootstrap_centered, "spread": self.bootstrap_spread},
            "bound": {"step": self.bound_step, "segments": self.bound_segments, "restarts": self.bound_restarts,
                      "threshold": self.bound_threshold, "t_min": self.bound_t_min, "t_max": self.bound_t_max},
            "num_samples": self.num_samples,
            "rng_seed": self.rng_seed,
        }

    def config_hash(self) -> str:
        return hashlib.sha256(dumps(self.to_dict()).encode()).hexdigest()[:16]


# ---------------------------------------------------------------- loading

def _get(d: dict, key: str, kind, default, path: str, check=None):
    if key not in d or d[key] is None:
        return default
    val = d[key]
    try:
        if kind is bool:
            if not isinstance(val, bool):
                raise TypeError
        elif kind is int:
            if isinstance(val, bool) or int(val) != val:
                raise TypeError
            val = int(val)
        else:
            if isinstance(val, bool):
                raise TypeError
            val = kind(val)
    except (TypeError, ValueError):
        raise ProblemError(path, f"expected {kind.__name__}, got {d[key]!r}") from None
    if check is not None and not check(val):
        raise ProblemError(path, f"invalid value {val!r}")
    return val


def _matrix(obj, path: str) -> np.ndarray:
    if not isinstance(obj, dict) or "real" not in obj:
        raise ProblemError(path, "expected an object with 'real' and optional 'imag' arrays")
    try:
        re = np.asarray(obj["real"], dtype=float)
        im = np.asarray(obj.get("imag", np.zeros_like(re)), dtype=float)
    except (TypeError, ValueError):
        raise ProblemError(path, "matrix entries must be numbers") from None
    if re.ndim != 2 or re.shape[0] != re.shape[1] or re.shape != im.shape:
        raise ProblemError(path, f"expected square real/imag arrays of equal shape, got {re.shape} and {im.shape}")
    n = re.shape[0]
    if n < 2 or n & (n - 1):
        raise ProblemError(path, f"dimension {n} is not a power of two")
    return re + 1j * im


def parse_problem(data: dict, name: str = "problem", **overrides) -> ProblemSpec:
    """Validate a problem dictionary; ``overrides`` replace top-level fields."""
    if not isinstance(data, dict):
        raise ProblemError("<root>", "expected a JSON object")
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ProblemError("schema_version", f"unsupported version {version}")
    if "target" not in data:
        raise ProblemError("target", "missing")
    raw = _matrix(data["target"], "target")
    unitarize = _get(data, "unitarize", bool, False, "unitarize")
    err = unitarity_error(raw)
    if unitarize:
        if err > 1e-3:
            raise ProblemError("target", f"too far from unitary to project (error {err:.2e})")
        raw = nearest_unitary(raw)
    elif err > 1e-8:
        raise ProblemError("target", f"not unitary within 1e-8 (error {err:.2e})")
    try:
        target, removed = to_special_unitary(raw, tol=1e-8)
        phase = -removed
    except NotUnitaryError as exc:
        raise ProblemError("target", str(exc)) from None
    n = raw.shape[0]
    sub = data.get("subspace", {"preset": "two_qubit_heisenberg"})
    if not isinstance(sub, dict):
        raise ProblemError("subspace", "expected an object")
    preset, allowed, nq = None, None, None
    if "preset" in sub:
        preset = sub["preset"]
        if preset not in PRESETS:
            raise ProblemError("subspace.preset", f"unknown preset {preset!r} (known: {', '.join(PRESETS)})")
    elif "allowed" in sub:
        nq = _get(sub, "num_qubits", int, int(np.log2(n)), "subspace.num_qubits", lambda v: v >= 1)
        try:
            allowed = np.atleast_2d(np.asarray(sub["allowed"], dtype=float))
        except (TypeError, ValueError):
            raise ProblemError("subspace.allowed", "vectors must be numeric") from None
    else:
        raise ProblemError("subspace", "needs 'preset' or 'allowed'")
    tol = data.get("tolerances", {})
    qs = data.get("q_schedule", {})
    br = data.get("branches", {})
    bs = data.get("bootstrap", {})
    bd = data.get("bound", {})
    pos = lambda v: v > 0  # noqa: E731
    kw = dict(
        name=str(data.get("name", name)),
        target=target,
        raw_target=raw,
        phase=phase,
        E=_get(data, "E", float, 1.0, "E", pos),
        preset=preset,
        allowed=allowed,
        num_qubits=nq,
        final_tol=_get(tol, "final", float, 1e-12, "tolerances.final", pos),
        residual_tol=_get(tol, "residual", float, 1e-12, "tolerances.residual", pos),
        continuation_tol=_get(tol, "continuation", float, 1e-10, "tolerances.continuation", pos),
        corrector_tol=_get(tol, "corrector", float, 1e-10, "tolerances.corrector", pos),
        q_max=_get(qs, "q_max", float, 100.0, "q_schedule.q_max", lambda v: v >= 1),
        dq0=_get(qs, "dq0", float, 0.25, "q_schedule.dq0", pos),
        dq_min=_get(qs, "dq_min", float, 1e-3, "q_schedule.dq_min", pos),
        max_shift=_get(br, "max_shift", int, 2, "branches.max_shift", lambda v: v >= 0),
        T_star=_get(br, "T_star", float, None, "branches.T_star", pos),
        margin=_get(br, "margin", float, 0.05, "branches.margin", lambda v: v >= 0),
        max_branches=_get(br, "max_branches", int, None, "branches.max_branches", pos),
        rng_seed=_get(data, "rng_seed", int, 0, "rng_seed", lambda v: v >= 0),
        q_prime=_get(bs, "q_prime", float, 5.0, "bootstrap.q_prime", lambda v: v > 1),
        num_guesses=_get(bs, "num_guesses", int, 40, "bootstrap.num_guesses", pos),
        bootstrap_centered=_get(bs, "centered", bool, True, "bootstrap.centered"),
        bootstrap_spread=_get(bs, "spread", float, 0.5, "bootstrap.spread", pos),
        bound_step=_get(bd, "step", float, 0.1, "bound.step", pos),
        bound_segments=_get(bd, "segments", int, 40, "bound.segments", lambda v: v >= 2),
        bound_restarts=_get(bd, "restarts", int, 3, "bound.restarts", pos),
        bound_threshold=_get(bd, "threshold", float, 0.999, "bound.threshold", lambda v: 0 < v <= 1),
        bound_t_min=_get(bd, "t_min", float, None, "bound.t_min", pos),
        bound_t_max=_get(bd, "t_max", float, None, "bound.t_max", pos),
        num_samples=_get(data, "num_samples", int, 512, "num_samples", lambda v: v >= 4),
        unitarize=unitarize,
        source=str(data.get("source", "")),
    )
    for key, val in overrides.items():
        if val is None:
            continue
        if key not in kw:
            raise ProblemError(key, "unknown override")
        kw[key] = val
        if key == "E" and not val > 0:
            raise ProblemError("E", "must be positive")
    spec = ProblemSpec(**kw)
    try:
        split = spec.split
    except (ValueError, KeyError) as exc:
        raise ProblemError("subspace", str(exc)) from None
    if split.n != n:
        raise ProblemError("subspace", f"split acts on dimension {split.n}, target has {n}")
    return spec


def bundled_problem_path(name: str) -> Path:
    """Path of a fixture shipped in ``qbrach/data`` (``"example1"``, ``"cnot"``, ...)."""
    fname = name if name.endswith(".json") else name + ".json"
    path = Path(str(resources.files("qbrach") / "data" / fname))
    if not path.exists():
        raise FileNotFoundError(f"no bundled problem {name!r}")
    return path


def load_problem(path, **overrides) -> ProblemSpec:
    """Read and validate a JSON problem file.

    Schema (version 1)::

        {"schema_version": 1, "name": str,
         "target": {"real": [[...]], "imag": [[...]]}, "unitarize": bool,
         "subspace": {"preset": name} | {"num_qubits": k, "allowed": [[...]]},
         "E": float, "rng_seed": int, "num_samples": int,
         "tolerances": {"final", "residual", "continuation", "corrector"},
         "q_schedule": {"q_max", "dq0", "dq_min"},
         "branches": {"max_shift", "T_star", "margin", "max_branches"},
         "bootstrap": {"q_prime", "num_guesses", "centered", "spread"},
         "bound": {"step", "segments", "restarts", "threshold", "t_min", "t_max"}}

    ``unitarize`` polar-projects a target given to a few decimals (error up
    to 1e-3 accepted); otherwise the target must be unitary within 1e-8.  A
    bare fixture name such as ``"cnot"`` resolves to the bundled file.
    """
    p = Path(path)
    if not p.exists() and not p.suffix and str(path) == p.name:
        p = bundled_problem_path(str(path))
    try:
        data = read_json(p)
    except ValueError as exc:
        raise ProblemError("<file>", f"invalid JSON: {exc}") from None
    return parse_problem(data, name=p.stem, **overrides)


# ---------------------------------------------------------------- solving

@dataclass
class BranchOutcome:
    branch_index: int
    hs_norm: float
    sector: int
    alpha: tuple
    special: bool = False
    status: str = "pending"   # completed | terminated | pruned | bootstrap_failed | shoot_failed
    q_start: float = 1.0
    q_stop: float | None = None
    reason: str = ""
    path_summary: dict = field(default_factory=dict)
    geodesic_h0: list | None = None
    brachistochrone_z0: list | None = None
    T: float | None = None
    infidelity: float | None = None
    replay_infidelity: float | None = None
    approx_fidelity: float | None = None
    protocol_file: str | None = None
    wall_time: float = 0.0

    def to_json(self) -> dict:
        return dict(self.__dict__)


@dataclass
class SolveReport:
    name: str
    E: float
    T_star: float
    T_star_source: str
    T_star_confident: bool
    max_norm: float
    branches: list
    best: dict | None
    timings: dict
    version: str
    config_hash: str
    backend: str
    phase: float
    bound_table: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.best is not None

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "E": self.E,
            "phase": self.phase,
            "T_star": self.T_star,
            "T_star_source": self.T_star_source,
            "T_star_confident": self.T_star_confident,
            "max_norm": self.max_norm,
            "best": self.best,
            "branches": [b.to_json() for b in self.branches],
            "bound_table": [list(r) for r in self.bound_table],
            "version": self.version,
            "config_hash": self.config_hash,
            "backend": self.backend,
            "timings": self.timings,
        }


def scan_config(spec: ProblemSpec, seeds: list[BranchSeed] | None = None) -> ScanConfig:
    """Scan range for ``T*``: from the shortest unconstrained time upwards.

    Restricting the Hamiltonian can only lengthen the path, so the smallest
    branch norm over ``E`` is a lower bound on the minimal time.
    """
    if seeds is None:
        seeds = log_branches(spec.target, spec.split, max_shift=spec.max_shift)
    lower = seeds[0].hs_norm / spec.E if seeds else spec.bound_step
    t_min = spec.bound_t_min or max(spec.bound_step, np.floor(lower / spec.bound_step) * spec.bound_step)
    t_max = spec.bound_t_max or max(t_min, 3 * lower)
    return ScanConfig(t_min=float(t_min), t_max=float(t_max), step=spec.bound_step, N=spec.bound_segments,
                      restarts=spec.bound_restarts, threshold=spec.bound_threshold, margin=spec.margin,
                      rng_seed=spec.rng_seed)


def compute_bound(spec: ProblemSpec, seeds=None) -> TstarResult:
    return estimate_Tstar(spec.split, spec.target, spec.E, scan_config(spec, seeds))


def _step_control(spec: ProblemSpec) -> StepControl:
    return StepControl(dq0=spec.dq0, dq_min=spec.dq_min, corrector_tol=spec.corrector_tol,
                       integrator_tol=spec.continuation_tol)


def _path_summary(split: SubspaceSplit, path: QPath) -> dict:
    def pb(h):
        return float(np.linalg.norm(h * split.mask_b) / np.linalg.norm(h))

    first, last = path.samples[0], path.samples[-1]
    return {
        "status": path.status,
        "num_samples": len(path.samples),
        "q": [s.q for s in path.samples],
        "fidelity": [s.fidelity for s in path.samples],
        "norm": [float(np.linalg.norm(s.h0)) for s in path.samples],
        "pb_fraction_start": pb(first.h0),
        "pb_fraction_end": pb(last.h0),
        "fidelity_start": first.fidelity,
        "fidelity_end": last.fidelity,
        "wall_time": path.wall_time,
    }


def brachistochrone_guess(split: SubspaceSplit, h0, q: float) -> np.ndarray:
    """Seed ``(mu, lambda) = (alpha^q, q beta^q)`` from a large-q geodesic."""
    h0 = np.asarray(h0, dtype=float)
    return h0 * split.mask_a + q * h0 * split.mask_b


def solve_branch(spec: ProblemSpec, seed: BranchSeed, out_dir: Path | None = None,
                 bootstrap_cache: dict | None = None) -> BranchOutcome:
    """Run continuation and the final shoot for one branch."""
    t0 = time.perf_counter()
    split = spec.split
    alpha = seed.phase_sector
    target = alpha * spec.target
    oc = BranchOutcome(seed.branch_index, seed.hs_norm, seed.sector, (alpha.real, alpha.imag))
    h_seed = seed.coeffs
    ctl = _step_control(spec)
    ckpt = None if out_dir is None else out_dir / "paths" / f"branch_{seed.branch_index}.json"
    try:
        if np.linalg.norm(h_seed * split.mask_b) < 1e-12:
            # the constant Hamiltonian already lies in the allowed span
            oc.status = "completed"
            oc.q_start = oc.q_stop = 1.0
            oc.reason = "seed lies in the allowed subspace"
            z_guess = h_seed * split.mask_a
            oc.geodesic_h0 = h_seed.tolist()
        else:
            oc.special = detect_special_case(split, h_seed)
            if oc.special:
                cache = bootstrap_cache if bootstrap_cache is not None else {}
                key = (seed.sector, seed.branch_index) if spec.bootstrap_centered else seed.sector
                if key not in cache:
                    if spec.bootstrap_centered:
                        kw = dict(center=h_seed, low=-spec.bootstrap_spread, high=spec.bootstrap_spread)
                    else:
                        kw = {}
                    cache[key] = bootstrap_special(split, target, spec.q_prime, spec.num_guesses, spec.rng_seed,
                                                   tol=spec.continuation_tol, **kw)
                sols = cache[key]
                if not sols:
                    oc.status = "bootstrap_failed"
                    oc.reason = f"no converged geodesic at q'={spec.q_prime} from {spec.num_guesses} guesses"
                    return oc
                start, q_start = sols[0].initial_data, spec.q_prime
            else:
                start, q_start = h_seed, 1.0
            oc.q_start = q_start
            path = continue_path(split, target, start, spec.q_max, ctl, q_start=q_start,
                                 branch_index=seed.branch_index, sector=seed.sector,
                                 fidelity_target=spec.target, checkpoint=ckpt)
            oc.status = path.status
            oc.q_stop = path.q_stop
            oc.reason = path.reason
            oc.path_summary = _path_summary(split, path)
            oc.geodesic_h0 = path.last.h0.tolist()
            if path.status != "completed":
                return oc
            z_guess = brachistochrone_guess(split, path.last.h0, path.last.q)
        prob = ShootingProblem("brachistochrone", split, target, tol=spec.final_tol)
        approx = prob.endpoint(z_guess)["U"]
        oc.approx_fidelity = gate_fidelity(approx, target, check=False)
        try:
            res = shoot_homotopy(prob, z_guess, ShootOptions(residual_tol=spec.residual_tol, rng_seed=spec.rng_seed))
        except (NonConvergence, SingularJacobian) as exc:
            oc.status = "shoot_failed"
            oc.reason = str(exc)
            return oc
        z0 = res.initial_data
        oc.brachistochrone_z0 = z0.tolist()
        oc.T = float(np.linalg.norm(z0[: split.dim_a]) / spec.E)
        protocol = protocol_from_brachistochrone(
            split, z0, spec.E, target, spec.num_samples, spec.final_tol,
            metadata={"problem": spec.name, "branch_index": seed.branch_index, "sector": seed.sector,
                      "q_start": oc.q_start, "q_max": spec.q_max, "special_case": oc.special,
                      "labels": list(split.labels[: split.dim_a])})
        oc.infidelity = protocol.infidelity
        rep = replay_protocol(protocol, spec)
        oc.replay_infidelity = 1.0 - rep
        if out_dir is not None:
            csv_path = out_dir / "protocols" / f"branch_{seed.branch_index}.csv"
            write_protocol(protocol, csv_path)
            oc.protocol_file = str(csv_path.relative_to(out_dir))
    except IntegrationError as exc:
        oc.status = "terminated"
        oc.reason = f"integration failure: {exc}"
    except SpecialCaseZero as exc:
        oc.status = "terminated"
        oc.reason = str(exc)
    finally:
        oc.wall_time = time.perf_counter() - t0
    return oc


def _solve_branch_job(args):
    spec, seed, out_dir = args
    return solve_branch(spec, seed, out_dir)


def run_solve(spec: ProblemSpec, out_dir=None, workers: int | None = None, progress=None) -> SolveReport:
    """Steps 1-3: bound, enumerate and prune branches, continue, shoot and rank.

    With one worker, branches are processed in norm order and a branch is
    skipped once its seed norm reaches the best time found so far (times
    only grow along a path).  With more workers all candidate branches are
    solved concurrently.
    """
    out_dir = None if out_dir is None else Path(out_dir)
    workers = workers or os.cpu_count() or 1
    timings = {}
    t0 = time.perf_counter()
    split = spec.split
    all_seeds = log_branches(spec.target, split, max_shift=spec.max_shift)
    timings["branches"] = time.perf_counter() - t0
    bound_table = []
    t1 = time.perf_counter()
    if spec.T_star is not None:
        tstar = TstarResult(spec.T_star, True, spec.E, spec.margin)
        source = "override"
    else:
        tstar = compute_bound(spec, all_seeds)
        source = "scan"
        bound_table = tstar.table
    timings["bound"] = time.perf_counter() - t1
    max_norm = tstar.max_norm
    seeds = [s for s in all_seeds if s.hs_norm < max_norm]
    if spec.max_branches is not None:
        seeds = seeds[: spec.max_branches]
    log.info("%d branches below norm %.4f", len(seeds), max_norm)
    t2 = time.perf_counter()
    outcomes: list[BranchOutcome] = []
    if workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_solve_branch_job, [(spec, s, out_dir) for s in seeds]))
    else:
        best_T = np.inf
        cache: dict = {}
        for s in seeds:
            if s.hs_norm >= best_T * spec.E:
                oc = BranchOutcome(s.branch_index, s.hs_norm, s.sector,
                                   (s.phase_sector.real, s.phase_sector.imag), status="pruned",
                                   reason=f"seed norm {s.hs_norm:.6f} >= best time x E {best_T * spec.E:.6f}")
            else:
                oc = solve_branch(spec, s, out_dir, cache)
                if oc.T is not None and oc.infidelity is not None and oc.infidelity < 1e-8:
                    best_T = min(best_T, oc.T)
            log.info("branch %d: %s T=%s", oc.branch_index, oc.status, oc.T)
            outcomes.append(oc)
            if progress is not None:
                progress(oc)
    timings["branch_solves"] = time.perf_counter() - t2
    ok = [o for o in outcomes if o.T is not None and o.infidelity is not None and o.infidelity < 1e-8]
    best = None
    if ok:
        b = min(ok, key=lambda o: (o.T, o.branch_index))
        best = {"branch_index": b.branch_index, "T": b.T, "infidelity": b.infidelity,
                "replay_infidelity": b.replay_infidelity, "protocol_file": b.protocol_file}
    timings["total"] = time.perf_counter() - t0
    report = SolveReport(spec.name, spec.E, tstar.T_star, source, tstar.confident, max_norm, outcomes, best,
                         timings, __version__, spec.config_hash(), BACKEND, spec.phase, bound_table)
    if out_dir is not None:
        write_json(out_dir / "report.json", report.to_json())
        if best is not None and best["protocol_file"]:
            prot = read_protocol(out_dir / best["protocol_file"])
            write_protocol(prot, out_dir / "protocol.csv")
    return report


# ---------------------------------------------------------------- verification and plots

def replay_protocol(protocol: ControlProtocol, spec: ProblemSpec, interpolation: str = "cubic",
                    tol: float = 1e-12) -> float:
    """Fidelity reached by re-integrating the sampled controls."""
    if protocol.T == 0:
        return gate_fidelity(np.eye(spec.n), spec.target)
    traj = integrate_schrodinger((protocol.times, protocol.mu), protocol.T, tol, split=spec.split,
                                 interpolation=interpolation, num_samples=2)
    return gate_fidelity(traj.final_unitary, spec.target, check=False)


@dataclass
class VerifyReport:
    fidelity: float
    infidelity: float
    declared_infidelity: float | None
    norm_drift: float
    qbe_residual: float
    T: float
    ok: bool
    flags: list = field(default_factory=list)

    def to_json(self) -> dict:
        return dict(self.__dict__)


def qbe_residual(split: SubspaceSplit, protocol: ControlProtocol) -> float:
    """Relative mismatch between spline derivatives of ``(mu, lam)`` and the brachistochrone field."""
    if protocol.T == 0 or len(protocol.times) < 4:
        return 0.0
    z = np.column_stack([protocol.mu, protocol.lam])
    dz = CubicSpline(protocol.times, z, axis=0)(protocol.times, 1)
    rhs = np.array([brachistochrone_rhs(split, BrachistochroneState.from_vector(split, zi)).vector() for zi in z])
    inner = slice(2, -2)
    scale = max(np.abs(rhs).max(), protocol.E**2)
    return float(np.abs(dz[inner] - rhs[inner]).max() / scale)


def verify_protocol(protocol_path, spec: ProblemSpec, interpolation: str = "cubic",
                    stale_tol: float = 1e-6) -> VerifyReport:
    """Replay an exported protocol against the problem's target."""
    protocol = protocol_path if isinstance(protocol_path, ControlProtocol) else read_protocol(protocol_path)
    split = spec.split
    if protocol.dim_a != split.dim_a or protocol.dim_b not in (0, split.dim_b):
        raise ValueError(f"protocol has {protocol.dim_a}+{protocol.dim_b} columns, "
                         f"problem expects {split.dim_a}+{split.dim_b}")
    fid = replay_protocol(protocol, spec, interpolation)
    flags = []
    declared = protocol.infidelity
    if declared is not None and (1 - declared) - fid > stale_tol:
        flags.append(f"replay fidelity {fid:.12f} below declared {1 - declared:.12f}")
    drift = protocol.norm_drift()
    if drift > 1e-6:
        flags.append(f"control norm deviates from E by {drift:.3e}")
    res = qbe_residual(split, protocol) if protocol.dim_b else float("nan")
    return VerifyReport(fid, 1 - fid, declared, drift, res, protocol.T, not flags, flags)


def coinciding_pairs(mu: np.ndarray, tol: float = 1e-6) -> list[tuple[int, int]]:
    """Index pairs ``(i, j)`` of control curves that agree pointwise within ``tol``."""
    d = mu.shape[1]
    return [(i, j) for i in range(d) for j in range(i + 1, d) if np.abs(mu[:, i] - mu[:, j]).max() < tol]


def emit_plot_data(protocol: ControlProtocol, out_path, split: SubspaceSplit | None = None,
                   overlay_h0=None, overlay_q: float | None = None, tol: float = 1e-6) -> dict:
    """Write ``t, mu_1..mu_dA`` (and the geodesic overlay ``alpha_j``) as CSV plus JSON.

    The overlay is the allowed part of the geodesic started at ``overlay_h0``
    with metric parameter ``overlay_q``, sampled on the protocol's normalized
    time ``t / T`` and expressed in protocol units (divided by ``T``).
    """
    out_path = Path(out_path)
    cols = {"t": protocol.times}
    for j in range(protocol.dim_a):
        cols[f"mu_{j + 1}"] = protocol.mu[:, j]
    if overlay_h0 is not None:
        if split is None or overlay_q is None:
            raise ValueError("overlay needs the split and q")
        s = protocol.times / protocol.T
        traj = integrate_geodesic(split, overlay_h0, overlay_q, 1.0, 1e-12, t_out=s)
        alpha = traj.generators[:, : split.dim_a] / protocol.T
        for j in range(split.dim_a):
            cols[f"alpha_{j + 1}"] = alpha[:, j]
    header = list(cols)
    table = np.column_stack([cols[h] for h in header])
    lines = [",".join(header)] + [",".join(format(v, ".17g") for v in row) for row in table]
    atomic_write_text(out_path, "\n".join(lines) + "\n")
    pairs = coinciding_pairs(protocol.mu, tol)
    summary = {
        "columns": header,
        "T": protocol.T,
        "E": protocol.E,
        "coinciding_pairs": [[i + 1, j + 1] for i, j in pairs],
        "distinct_curves": protocol.dim_a - len(pairs),
    }
    if overlay_h0 is not None:
        amp = np.abs(protocol.mu).max()
        summary["overlay_q"] = overlay_q
        summary["overlay_max_deviation"] = float(np.abs(protocol.mu - alpha).max())
        summary["overlay_relative_deviation"] = float(np.abs(protocol.mu - alpha).max() / amp)
    write_json(out_path.with_suffix(".json"), summary)
    return summary
