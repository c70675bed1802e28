import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm

from qbrach.bounds import PiecewiseProtocol, ScanConfig, _fidelity_and_grad, estimate_Tstar, optimize_fixed_T
from qbrach.dynamics import gate_fidelity

from conftest import random_su


def allowed_target(split, T0, E, seed):
    a = np.random.default_rng(seed).normal(size=split.dim_a)
    h = E * a / np.linalg.norm(a)
    return expm(-1j * T0 * np.tensordot(h, split.elements[: split.dim_a], axes=1))


def test_fidelity_gradient_matches_finite_differences(split):
    rng = np.random.default_rng(40)
    target = random_su(4, 41)
    controls = rng.normal(size=(5, split.dim_a))
    fid, grad = _fidelity_and_grad(split, target, controls, 0.3)
    eps = 1e-6
    fd = np.zeros_like(controls)
    for idx in np.ndindex(*controls.shape):
        c = controls.copy()
        c[idx] += eps
        fp = _fidelity_and_grad(split, target, c, 0.3)[0]
        c[idx] -= 2 * eps
        fm = _fidelity_and_grad(split, target, c, 0.3)[0]
        fd[idx] = (fp - fm) / (2 * eps)
    np.testing.assert_allclose(grad, fd, atol=1e-8)
    prot = PiecewiseProtocol(controls, 1.5, 1.0)
    assert fid == pytest.approx(gate_fidelity(prot.propagator(split), target, check=False), abs=1e-12)


def test_realizable_target_reaches_unit_fidelity(split):
    target = allowed_target(split, 1.2, 1.0, 42)
    prot, fid = optimize_fixed_T(split, target, 1.2, 1.0, N=8, rng_seed=0)
    assert fid > 1 - 1e-6
    np.testing.assert_allclose(np.linalg.norm(prot.controls, axis=1), 1.0, rtol=1e-12)
    assert prot.segment_duration == pytest.approx(0.15)


@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_fidelity_history_non_decreasing(split, seed):
    hist = []
    optimize_fixed_T(split, random_su(4, seed), 2.0, 1.0, N=6, rng_seed=seed, max_iters=40, history=hist)
    assert len(hist) > 0
    assert np.all(np.diff(hist) >= -1e-12)


def test_optimizer_is_deterministic(split):
    target = random_su(4, 43)
    a = optimize_fixed_T(split, target, 2.0, N=6, rng_seed=5, max_iters=30)
    b = optimize_fixed_T(split, target, 2.0, N=6, rng_seed=5, max_iters=30)
    np.testing.assert_array_equal(a[0].controls, b[0].controls)
    assert a[1] == b[1]


def test_tstar_bounds_realizable_target(split):
    T0, step = 1.3, 0.2
    target = allowed_target(split, T0, 2.0, 44)
    cfg = ScanConfig(t_min=0.2, t_max=2.0, step=step, N=10, restarts=2)
    res = estimate_Tstar(split, target, 2.0, cfg)
    assert res.confident
    assert res.T_star <= T0 + step
    assert res.max_norm == pytest.approx(2.0 * res.T_star * 1.05)
    stages = [s for _, _, s in res.table]
    assert stages[0] == "scan" and "bisect" in stages


def test_tstar_low_confidence_when_scan_exhausted(split):
    target = random_su(4, 45)
    cfg = ScanConfig(t_min=0.5, t_max=0.7, step=0.1, N=6, restarts=1, max_iters=50)
    res = estimate_Tstar(split, target, 1.0, cfg)
    assert not res.confident and res.T_star == 0.7
    assert [t for t, _, _ in res.table] == [0.5, 0.6, 0.7]


def test_validation(split):
    target = np.eye(4)
    with pytest.raises(ValueError):
        optimize_fixed_T(split, target, 0.0)
    with pytest.raises(ValueError):
        optimize_fixed_T(split, target, 1.0, N=1)
    with pytest.raises(ValueError):
        estimate_Tstar(split, target, 1.0, ScanConfig(t_min=2.0, t_max=1.0))
