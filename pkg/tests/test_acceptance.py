"""Acceptance criteria for the two reference problems.

Every criterion records one PASS/FAIL line per check (printed immediately
and repeated in the terminal summary) and fails the test if any check fails.
Tolerances are the published ones; nothing here is loosened to make a check
pass.  The end-to-end solves take roughly 15 minutes on one core.

    pytest tests/test_acceptance.py -v
"""
import json
import subprocess
import sys
import time

import numpy as np
import pytest
from scipy.stats import ortho_group

from qbrach.continuation import QPath, commutator_norm, deformation_derivative, limit_residual
from qbrach.dynamics import integrate_brachistochrone, integrate_geodesic, normalize_protocol, read_protocol
from qbrach.liealg import build_split, log_branches, seed_residual
from qbrach.pipeline import emit_plot_data, load_problem, run_solve
from qbrach.shooting import ShootingProblem, ShootOptions, random_restarts, shoot

from conftest import ACCEPTANCE, random_coeffs, random_su

pytestmark = pytest.mark.slow


class Checks:
    def __init__(self, criterion: int):
        self.criterion = criterion
        self.failed = []

    def __call__(self, label: str, ok, detail: str = ""):
        ok = bool(ok)
        ACCEPTANCE.append((self.criterion, label, ok, detail))
        print(f"{'PASS' if ok else 'FAIL'}  [{self.criterion}] {label}: {detail}", flush=True)
        if not ok:
            self.failed.append(label)

    def within(self, label: str, value: float, ref: float, tol: float):
        self(label, abs(value - ref) <= tol, f"{value:.6g} vs {ref} +/- {tol:g}")

    def finish(self):
        assert not self.failed, f"criterion {self.criterion} failed: {self.failed}"


def _solve(tmp_path_factory, name):
    out = tmp_path_factory.mktemp(name)
    t0 = time.perf_counter()
    report = run_solve(load_problem(name), out, workers=1)
    return report, out, time.perf_counter() - t0


@pytest.fixture(scope="module")
def ex1_run(tmp_path_factory):
    return _solve(tmp_path_factory, "example1")


@pytest.fixture(scope="module")
def cnot_run(tmp_path_factory):
    return _solve(tmp_path_factory, "cnot")


def _branch(report, index):
    return next(o for o in report.branches if o.branch_index == index)


def test_criterion_1_branch_table():
    c = Checks(1)
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "qbrach", "branches", "example1", "--json"],
                          capture_output=True, text=True, check=True)
    elapsed = time.perf_counter() - t0
    rows = json.loads(proc.stdout)[:4]
    for row, ref in zip(rows, [2.8783, 3.5328, 3.7671, 4.0205]):
        c.within(f"branch {row['branch_index']} norm", row["hs_norm"], ref, 5e-4)
    sectors = [complex(*r["alpha"]) for r in rows]
    c("phase sectors in norm order", np.allclose(sectors, [-1, 1j, -1j, 1], atol=1e-12),
      " ".join(f"{s.real:+.0f}{s.imag:+.0f}i" for s in sectors))
    c("runtime < 10 s", elapsed < 10, f"{elapsed:.2f} s")
    c.finish()


def test_criterion_2_example1_end_to_end(ex1_run):
    report, _, elapsed = ex1_run
    c = Checks(2)
    best = report.best
    c("a branch converged", best is not None, str(best))
    c.within("best T * E", best["T"], 6.69, 0.01)
    c("replay infidelity < 1e-8", best["replay_infidelity"] < 1e-8, f"{best['replay_infidelity']:.3e}")
    for i in (1, 2):
        oc = _branch(report, i)
        c(f"branch {i} terminates before q=100", oc.status == "terminated" and oc.q_stop < 100,
          f"{oc.status} at q={oc.q_stop}")
    oc = next(o for o in report.branches if abs(o.hs_norm - 4.0205) < 5e-4)
    c.within(f"norm-4.0205 branch ({oc.branch_index}) T * E", oc.T if oc.T is not None else np.nan, 7.49, 0.02)
    c("runtime < 30 min", elapsed < 1800, f"{elapsed / 60:.1f} min (continuation tol 1e-10)")
    c.finish()


def test_criterion_3_example1_diagnostics(ex1_run):
    report, _, _ = ex1_run
    c = Checks(3)
    oc = _branch(report, 3)
    ps = oc.path_summary
    c.within("P_B fraction at q=1", ps["pb_fraction_start"], 0.42, 0.02)
    c.within("P_B fraction at q=100", ps["pb_fraction_end"], 0.03, 0.01)
    c.within("replayed fidelity at q=1", ps["fidelity_start"], 0.7612, 5e-3)
    c.within("replayed fidelity at q=100", ps["fidelity_end"], 0.9922, 5e-3)
    c.within("seeded brachistochrone approximation fidelity", oc.approx_fidelity, 0.9916, 5e-3)
    c.finish()


def test_criterion_4_cnot_end_to_end(cnot_run, tmp_path):
    report, out, _ = cnot_run
    c = Checks(4)
    spec = load_problem("cnot")
    seeds = log_branches(spec.target, spec.split, max_norm=report.max_norm)
    norms = [commutator_norm(spec.split, s.coeffs) for s in seeds]
    c("special case at q=1", max(norms) < 1e-10 and all(o.special for o in report.branches),
      f"max commutator norm {max(norms):.2e}")
    best = report.best
    oc = _branch(report, best["branch_index"])
    c("continuation starts at q'=5", oc.q_start == 5.0, f"q_start={oc.q_start}")
    c.within("bootstrap solution replay fidelity", oc.path_summary["fidelity_start"], 0.5110, 5e-3)
    c.within("replay fidelity at q=100", oc.path_summary["fidelity_end"], 0.9978, 5e-3)
    c.within("best T * E", best["T"], 5.75, 0.01)
    c("infidelity < 1e-8", best["infidelity"] < 1e-8, f"{best['infidelity']:.3e}")
    summary = emit_plot_data(read_protocol(out / "protocol.csv"), tmp_path / "fig.csv", tol=1e-6)
    c("exactly two coinciding mu pairs", len(summary["coinciding_pairs"]) == 2,
      f"{summary['coinciding_pairs']}, {summary['distinct_curves']} distinct curves")
    c.finish()


def test_criterion_5_upper_bounds(ex1_run, cnot_run):
    c = Checks(5)
    for (report, _, _), lo, hi in ((ex1_run, 6.6, 6.9), (cnot_run, 5.7, 5.9)):
        name = report.name
        c(f"{name} T* in [{lo}, {hi}]", lo <= report.T_star <= hi and report.T_star_source == "scan",
          f"T*={report.T_star:.6g}")
        c(f"{name} T* exceeds best time", report.T_star > report.best["T"],
          f"T*={report.T_star:.6g}, best T={report.best['T']:.6g}")
    c.finish()


def test_criterion_6_direct_shooting_fails():
    c = Checks(6)
    spec = load_problem("example1")
    prob = ShootingProblem("brachistochrone", spec.split, spec.target, tol=1e-10)
    t0 = time.perf_counter()
    results = random_restarts(prob, 100, rng_seed=0, low=-3.0, high=3.0,
                              options=ShootOptions(jacobian="variational", max_iters=50))
    elapsed = time.perf_counter() - t0
    conv = [i for i, r in enumerate(results) if r.converged]
    times = [float(np.linalg.norm(results[i].initial_data[: spec.split.dim_a])) for i in conv]
    c("at most 2 of 100 guesses converge", len(conv) <= 2,
      f"{len(conv)} converged (guesses {conv}, T*E {', '.join(f'{t:.4f}' for t in times)})")
    c("runtime < 10 min", elapsed < 600, f"{elapsed:.0f} s")
    c.finish()


def test_criterion_7_property_suite(ex1_run):
    c = Checks(7)
    t0 = time.perf_counter()
    split = build_split(None, "two_qubit_heisenberg")
    gram = np.einsum("aij,bji->ab", split.elements, split.elements).real
    c("basis orthonormality", np.abs(gram - np.eye(split.dim)).max() < 1e-13,
      f"max |Gram - I| {np.abs(gram - np.eye(split.dim)).max():.1e}")

    worst = max(seed_residual(s, u) for k in range(20) for u in [random_su(4, 700 + k)]
                for s in log_branches(u, split, max_norm=8.0, max_shift=1))
    c("exp(log) round trips < 1e-10", worst < 1e-10, f"{worst:.2e}")

    geo = [integrate_geodesic(split, random_coeffs(split.dim, 710 + k), q, 1.0, 1e-12).conserved
           for k, q in enumerate([1.0, 3.0, 20.0, 100.0])]
    qn = max(g["q_norm_rel_drift"] for g in geo)
    mom = max(g["momentum_drift"] for g in geo)
    c("geodesic q-norm and momentum conservation < 1e-7", qn < 1e-7 and mom < 1e-7,
      f"q-norm {qn:.1e}, momentum {mom:.1e}")

    br = [integrate_brachistochrone(split, random_coeffs(7, 720 + k), random_coeffs(8, 730 + k), 1.0,
                                    1e-12).conserved for k in range(4)]
    hn = max(b["H_norm_rel_drift"] for b in br)
    ln = max(b["lambda_norm_rel_drift"] for b in br)
    c("brachistochrone Tr(H^2) and |lambda| conservation < 1e-8", hn < 1e-8 and ln < 1e-8,
      f"H {hn:.1e}, lambda {ln:.1e}")

    h0, q, delta = random_coeffs(split.dim, 740, 0.8), 3.0, 1e-3
    target = integrate_geodesic(split, h0, q, 1.0, 1e-13).final_unitary

    def reshoot(qq):
        res = shoot(ShootingProblem("geodesic", split, target, q=qq, tol=1e-13), h0,
                    ShootOptions(jacobian="variational", residual_tol=1e-13, accept_tol=1e-11))
        return res.initial_data

    fd = (reshoot(q + delta) - reshoot(q - delta)) / (2 * delta)
    dev = np.abs(deformation_derivative(split, h0, q, tol=1e-12) - fd).max()
    c("deformation derivative vs re-shooting < 1e-4", dev < 1e-4, f"{dev:.2e} at q=3, delta=1e-3")

    _, out, _ = ex1_run
    spec = load_problem("example1")
    path = QPath.load(out / "paths" / "branch_3.json")
    alpha = next(s for s in log_branches(spec.target, split, max_norm=4.0) if s.branch_index == 3).phase_sector
    near = min(path.samples, key=lambda s: abs(s.q - 50.0))
    h50 = shoot(ShootingProblem("geodesic", split, alpha * spec.target, q=50.0, tol=1e-11), near.h0,
                ShootOptions(jacobian="variational", residual_tol=1e-10, accept_tol=1e-8)).initial_data
    r50, r100 = limit_residual(split, h50, 50.0), limit_residual(split, path.last.h0, path.last.q)
    c("QBE residual ratio q=100 / q=50 in [0.3, 0.7]", 0.3 <= r100 / r50 <= 0.7,
      f"{r100:.3e} / {r50:.3e} = {r100 / r50:.3f}")

    traj = integrate_geodesic(split, random_coeffs(split.dim, 750), 4.0, 1.0, 1e-12, num_samples=257)
    prot = normalize_protocol(traj, 1.7)
    c("normalize_protocol constant norm < 1e-6 relative", prot.norm_drift() < 1e-6, f"{prot.norm_drift():.1e}")
    elapsed = time.perf_counter() - t0
    c("property suite runtime < 5 min", elapsed < 300, f"{elapsed:.1f} s")
    c.finish()


def test_criterion_8_basis_invariants():
    c = Checks(8)
    spec = load_problem("example1")
    base = spec.split
    # mix the allowed span within itself; the forbidden basis is rebuilt from it
    mix = ortho_group.rvs(base.dim_a, random_state=5)
    allowed = mix @ base.change[: base.dim_a]
    rotated = build_split(base.basis, allowed)
    a = log_branches(spec.target, base, max_norm=4.1)
    b = log_branches(spec.target, rotated, max_norm=4.1)
    na, nb = [s.hs_norm for s in a], [s.hs_norm for s in b]
    c("branch norms basis invariant", np.allclose(na, nb, atol=1e-12), f"{len(na)} branches")
    pb_a = [np.linalg.norm(s.coeffs * base.mask_b) for s in a]
    pb_b = [np.linalg.norm(s.coeffs * rotated.mask_b) for s in b]
    c("P_B norms basis invariant", np.allclose(pb_a, pb_b, atol=1e-12), "")
    moved = max(np.abs(x.coeffs - y.coeffs).max() for x, y in zip(a, b))
    c("raw component vectors are basis dependent", moved > 1e-3,
      f"max component change {moved:.3f}; component-wise table matching is not attempted")
    c.finish()
