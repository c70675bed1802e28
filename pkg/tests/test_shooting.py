import numpy as np
import pytest
from scipy.linalg import expm, expm_frechet

from qbrach.dynamics import gate_fidelity
from qbrach.liealg import log_branches
from qbrach.shooting import (NonConvergence, ShootingProblem, ShootOptions, jacobian, mismatch_coordinates, random_restarts,
                             residual, shoot, shoot_homotopy, with_trajectory)

from conftest import random_coeffs


@pytest.fixture(scope="module")
def geo_problem(split, example1):
    seed = log_branches(example1.target, split, max_norm=3.0)[0]
    prob = ShootingProblem("geodesic", split, seed.phase_sector * example1.target, q=1.0, tol=1e-12)
    return prob, seed.coeffs


def test_residual_vanishes_at_branch_seed(geo_problem):
    prob, h = geo_problem
    assert np.linalg.norm(residual(prob, h)) < 1e-10


def test_residual_zero_guess_is_target_log(split):
    h = random_coeffs(split.dim, 20, 0.5)
    prob = ShootingProblem("geodesic", split, expm(-1j * split.matrix(h)), q=3.0)
    np.testing.assert_allclose(residual(prob, np.zeros(split.dim)), -h, atol=1e-12)


def test_residual_scales_linearly_with_perturbation(geo_problem):
    prob, h = geo_problem
    d = np.random.default_rng(21).normal(size=h.size)
    d /= np.linalg.norm(d)
    norms = [np.linalg.norm(residual(prob, h + eps * d)) for eps in (1e-3, 1e-4, 1e-5)]
    assert norms[0] / norms[1] == pytest.approx(10, rel=0.05)
    assert norms[1] / norms[2] == pytest.approx(10, rel=0.05)


def test_residual_rejects_non_finite(geo_problem):
    prob, h = geo_problem
    with pytest.raises(ValueError):
        residual(prob, np.full_like(h, np.nan))


def test_mismatch_branch_cut_fallback(split):
    # mismatch with an eigenphase close to pi: Hermitian-part coordinates are used
    h = np.zeros(split.dim)
    h[0] = 2 * (np.pi - 0.05)           # eigenvalues +-(pi - 0.05)
    m = expm(-1j * split.matrix(h))
    out = mismatch_coordinates(split, np.eye(4), m)
    np.testing.assert_allclose(out, split.coefficients((m - m.conj().T) / 2j), atol=1e-14)
    np.testing.assert_allclose(mismatch_coordinates(split, np.eye(4), m, "frobenius"), out)


def test_jacobian_is_deterministic(geo_problem):
    prob, h = geo_problem
    j1, j2 = jacobian(prob, h), jacobian(prob, h)
    np.testing.assert_array_equal(j1, j2)


def test_jacobian_richardson(geo_problem):
    prob, h = geo_problem
    jac = jacobian(prob, h)
    x0 = h + 0.01
    for i in (0, 7, 14):
        e = np.eye(h.size)[i]
        for hstep in (1e-2, 5e-3):
            diff = residual(prob, h + hstep * e) - residual(prob, h - hstep * e)
            err = np.abs(diff - 2 * hstep * jac[:, i]).max()
            # central differences: error O(h^3)
            assert err < 50 * hstep**3 + 1e-9
    assert jacobian(prob, x0).shape == (15, 15)


def test_jacobian_matches_exponential_derivative_su2(split_su2):
    mu = np.array([0.7, -0.4])
    H = np.tensordot(mu, split_su2.elements[:2], axes=1)
    target = expm(-1j * H)
    prob = ShootingProblem("brachistochrone", split_su2, target, tol=1e-13)
    x0 = np.concatenate([mu, [0.0]])
    jac = jacobian(prob, x0)
    for i in range(2):
        dU = expm_frechet(-1j * H, -1j * split_su2.elements[i], compute_expm=False)
        col = split_su2.coefficients(1j * target.conj().T @ dU)
        np.testing.assert_allclose(jac[:, i], col, atol=1e-8)


def test_shoot_from_exact_solution(geo_problem):
    prob, h = geo_problem
    res = shoot(prob, h)
    assert res.converged and res.iterations <= 2


def test_shoot_local_quadratic_convergence(split):
    z = random_coeffs(split.dim, 22, 1.0)
    prob0 = ShootingProblem("brachistochrone", split, np.eye(4), tol=1e-12)
    target = prob0.endpoint(z)["U"]
    prob = ShootingProblem("brachistochrone", split, target, tol=1e-12)
    guess = z + 1e-3 * np.random.default_rng(23).uniform(-1, 1, z.size)
    res = shoot(prob, guess)
    assert res.converged and res.iterations <= 6
    assert res.residual_norm < 1e-12
    rep = with_trajectory(res).trajectory
    assert gate_fidelity(rep.final_unitary, target) >= 1 - 1e-8
    again = shoot(prob, guess)
    np.testing.assert_array_equal(again.initial_data, res.initial_data)


def test_shoot_variational_jacobian_agrees(split):
    z = random_coeffs(split.dim, 24, 1.0)
    target = ShootingProblem("brachistochrone", split, np.eye(4)).endpoint(z)["U"]
    prob = ShootingProblem("brachistochrone", split, target, tol=1e-12)
    res = shoot(prob, z + 1e-3, ShootOptions(jacobian="variational"))
    assert res.converged
    np.testing.assert_allclose(res.endpoint_jacobian, jacobian(prob, res.initial_data), atol=1e-6)


def test_shoot_reports_non_convergence(split, example1):
    prob = ShootingProblem("brachistochrone", split, example1.target, tol=1e-9)
    guess = np.random.default_rng(25).uniform(-3, 3, split.dim)
    with pytest.raises(NonConvergence) as info:
        shoot(prob, guess, ShootOptions(max_iters=2))
    assert not info.value.result.converged
    res = shoot(prob, guess, ShootOptions(max_iters=2), raise_on_failure=False)
    assert not res.converged and len(res.history) >= 1


def test_problem_validation(split):
    with pytest.raises(ValueError):
        ShootingProblem("geodesic", split, 2 * np.eye(4))
    with pytest.raises(ValueError):
        ShootingProblem("geodesic", split, np.eye(4), T=0.0)
    with pytest.raises(ValueError):
        ShootingProblem("geodesic", split, np.eye(4), q=0.5)
    with pytest.raises(ValueError):
        ShootingProblem("other", split, np.eye(4))
    with pytest.raises(ValueError):
        shoot(ShootingProblem("geodesic", split, np.eye(4)), np.full(15, np.inf))


def test_homotopy_reaches_the_direct_solution(split):
    z_true = np.concatenate([random_coeffs(7, 80, 1.5), random_coeffs(8, 81, 1.0)])
    prob = ShootingProblem("brachistochrone", split, np.eye(4), tol=1e-12)
    target = prob.endpoint(z_true)["U"]
    prob = ShootingProblem("brachistochrone", split, target, tol=1e-12)
    guess = z_true + 0.05 * random_coeffs(15, 82)
    res = shoot_homotopy(prob, guess, ShootOptions(residual_tol=1e-11), ds0=0.5)
    assert res.converged and res.residual_norm < 1e-10
    np.testing.assert_allclose(res.initial_data, z_true, atol=1e-8)


def test_homotopy_failure_is_reported(split, example1):
    prob = ShootingProblem("brachistochrone", split, example1.target, tol=1e-9)
    guess = np.full(15, 2.0)
    res = shoot_homotopy(prob, guess, ShootOptions(max_iters=2, jacobian="variational"), stage_iters=1,
                         ds_min=0.3, raise_on_failure=False)
    assert not res.converged
    with pytest.raises(NonConvergence):
        shoot_homotopy(prob, guess, ShootOptions(max_iters=2, jacobian="variational"), stage_iters=1, ds_min=0.3)


def test_random_restarts_prefix_is_stable(split_su2):
    target = expm(-1j * 0.9 * split_su2.matrix(np.array([0.6, -0.3, 0.5])))
    prob = ShootingProblem("brachistochrone", split_su2, target, tol=1e-12)
    seen = []
    few = random_restarts(prob, 3, rng_seed=4, progress=lambda i, r: seen.append(i))
    more = random_restarts(prob, 5, rng_seed=4)
    assert seen == [0, 1, 2]
    for a, b in zip(few, more):
        np.testing.assert_array_equal(a.initial_data, b.initial_data)
        assert a.converged == b.converged
