import numpy as np
import pytest

from qbrach.continuation import (DerivativeUndefined, QPath, SpecialCaseZero, StepControl, assemble_JT,
                                 bootstrap_special, commutator_norm, continue_path, deformation_derivative,
                                 detect_special_case, integrate_deformation, k_rhs, limit_residual)
from qbrach.dynamics import geodesic_rhs, integrate_geodesic
from qbrach.liealg import log_branches
from qbrach.shooting import ShootingProblem, ShootOptions, shoot

from conftest import random_coeffs


def geodesic_target(split, h0, q, tol=1e-13):
    return integrate_geodesic(split, h0, q, 1.0, tol, num_samples=2).final_unitary


def reshoot(split, target, h0, q):
    prob = ShootingProblem("geodesic", split, target, q=q, tol=1e-13)
    res = shoot(prob, h0, ShootOptions(jacobian="variational", residual_tol=1e-13, accept_tol=1e-11))
    return res.initial_data


def test_k_rhs_is_linearization_of_geodesic_flow(split):
    h, k = random_coeffs(split.dim, 30), random_coeffs(split.dim, 31)
    q, eps = 4.0, 1e-6
    hom = (geodesic_rhs(split, h + eps * k, q) - geodesic_rhs(split, h - eps * k, q)) / (2 * eps)
    np.testing.assert_allclose(k_rhs(split, k, h, q), hom, atol=1e-8)
    dq = (geodesic_rhs(split, h, q + eps) - geodesic_rhs(split, h, q - eps)) / (2 * eps)
    full = k_rhs(split, k, h, q, include_inhomogeneous=True)
    np.testing.assert_allclose(full - hom, dq, atol=1e-8)


def test_jt_maps_initial_generator_to_conjugated_final_one(split):
    h0, q, T = random_coeffs(split.dim, 32), 3.0, 1.0
    jt = assemble_JT(split, h0, q, T, tol=1e-12)
    traj = integrate_geodesic(split, h0, q, T, 1e-12, num_samples=2)
    u, hT = traj.final_unitary, split.matrix(traj.generators[-1])
    np.testing.assert_allclose(jt(h0), T * split.coefficients(u.conj().T @ hT @ u), atol=1e-9)


@pytest.mark.parametrize("q", [3.0, 20.0])
def test_derivative_matches_reshooting(split, q):
    h0 = random_coeffs(split.dim, 33, 0.8)
    target = geodesic_target(split, h0, q)
    d = deformation_derivative(split, h0, q, tol=1e-12)
    delta = 1e-3
    fd = (reshoot(split, target, h0, q + delta) - reshoot(split, target, h0, q - delta)) / (2 * delta)
    assert np.abs(d - fd).max() < 1e-4


def test_derivative_at_q1_matches_one_sided_reshooting(split):
    h0 = random_coeffs(split.dim, 34, 0.8)
    target = geodesic_target(split, h0, 1.0)
    d = deformation_derivative(split, h0, 1.0, tol=1e-12)
    delta = 1e-3
    h1, h2 = reshoot(split, target, h0, 1 + delta), reshoot(split, target, h0, 1 + 2 * delta)
    fd = (-3 * h0 + 4 * h1 - h2) / (2 * delta)
    assert np.abs(d - fd).max() < 1e-4


def test_special_case_detection(split, cnot, example1):
    for s in log_branches(cnot.target, split, max_norm=3.0):
        assert commutator_norm(split, s.coeffs) < 1e-10
        assert detect_special_case(split, s.coeffs)
        with pytest.raises(SpecialCaseZero):
            deformation_derivative(split, s.coeffs, 1.0)
    for s in log_branches(example1.target, split, max_norm=4.1):
        assert not detect_special_case(split, s.coeffs)


def test_derivative_undefined_on_ill_conditioned_jt(split):
    h0 = random_coeffs(split.dim, 35)
    with pytest.raises(DerivativeUndefined) as info:
        deformation_derivative(split, h0, 2.0, cond_max=1.0)
    assert info.value.cond > 1.0


def test_continuation_su2_smoke(tmp_path, split_su2):
    from qbrach.pipeline import load_problem

    spec = load_problem("su2_xz")
    seed = log_branches(spec.target, split_su2, max_norm=5.0)[0]
    target = seed.phase_sector * spec.target
    ckpt = tmp_path / "path.json"
    path = continue_path(split_su2, target, seed, q_max=10.0, checkpoint=ckpt)
    assert path.status == "completed" and path.last.q == pytest.approx(10.0)
    # every recorded sample solves its boundary-value problem
    for s in path.samples[:: max(1, len(path.samples) // 5)]:
        prob = ShootingProblem("geodesic", split_su2, target, q=s.q, tol=1e-12)
        assert np.linalg.norm(prob.endpoint(s.h0)["U"] - target) < 1e-8
    fids = [s.fidelity for s in path.samples]
    assert fids[-1] > fids[0]
    loaded = QPath.load(ckpt)
    assert loaded.status == "completed" and len(loaded.samples) == len(path.samples)
    np.testing.assert_array_equal(loaded.last.h0, path.last.h0)


def test_resume_from_checkpoint(tmp_path, split_su2):
    from qbrach.pipeline import load_problem

    spec = load_problem("su2_xz")
    seed = log_branches(spec.target, split_su2, max_norm=5.0)[0]
    target = seed.phase_sector * spec.target
    full = continue_path(split_su2, target, seed, q_max=6.0)
    part = continue_path(split_su2, target, seed, q_max=3.0, checkpoint=tmp_path / "p.json")
    resumed = continue_path(split_su2, target, None, q_max=6.0, resume=QPath.load(tmp_path / "p.json"))
    assert resumed.status == "completed"
    assert part.last.q == pytest.approx(3.0)
    np.testing.assert_allclose(resumed.last.h0, full.last.h0, atol=1e-8)


def test_rk4_deformation_agrees_with_corrected_path(split_su2):
    from qbrach.pipeline import load_problem

    spec = load_problem("su2_xz")
    seed = log_branches(spec.target, split_su2, max_norm=5.0)[0]
    target = seed.phase_sector * spec.target
    path = continue_path(split_su2, target, seed, q_max=2.0, step_control=StepControl(dq0=0.1, dq_max=0.1))
    h = integrate_deformation(split_su2, target, seed.coeffs, 1.0, 2.0, dq=0.05, tol=1e-12)
    np.testing.assert_allclose(h, path.last.h0, atol=1e-6)


def test_special_seed_rejected_by_continue_path(split, cnot):
    seed = log_branches(cnot.target, split, max_norm=3.0)[0]
    with pytest.raises(SpecialCaseZero):
        continue_path(split, seed.phase_sector * cnot.target, seed, q_max=2.0)


def test_bootstrap_excludes_commuting_solutions(split, cnot):
    seed = log_branches(cnot.target, split, max_norm=3.0)[0]
    target = seed.phase_sector * cnot.target
    sols = bootstrap_special(split, target, 5.0, num_guesses=6, rng_seed=0, low=-0.5, high=0.5,
                             center=seed.coeffs)
    assert sols, "no non-commuting solution found"
    norms = [np.linalg.norm(s.initial_data) for s in sols]
    assert norms == sorted(norms)
    for s in sols:
        assert commutator_norm(split, s.initial_data) > 1e-6


def test_jt_is_linear(split):
    h0 = random_coeffs(split.dim, 36)
    jt = assemble_JT(split, h0, 6.0, tol=1e-12)
    x, y = random_coeffs(split.dim, 37), random_coeffs(split.dim, 38)
    a, b = 0.7, -1.9
    assert np.abs(jt(a * x + b * y) - a * jt(x) - b * jt(y)).max() < 1e-8
    assert jt.grid_size > 0 and np.isfinite(jt.condition_number)


def test_limit_residual_decays_like_inverse_q(split):
    h0 = random_coeffs(split.dim, 39)
    r10, r20 = limit_residual(split, h0, 10.0), limit_residual(split, h0, 20.0)
    assert r20 / r10 == pytest.approx(0.5, rel=1e-6)
