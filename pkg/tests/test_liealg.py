import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from qbrach.liealg import (PRESETS, NotUnitaryError, apply_Fq, apply_Gq, build_pauli_basis, build_split,
                           commutator_coeffs, format_branch_table, log_branches, project, q_inner, q_norm,
                           seed_residual, structure_constants, to_special_unitary, unitarity_error)

from conftest import random_coeffs, random_su

finite = st.floats(-5, 5, allow_nan=False)


@pytest.mark.parametrize("k", [1, 2])
def test_pauli_basis_orthonormal_traceless(k):
    b = build_pauli_basis(k)
    assert b.dim == 4**k - 1
    gram = np.einsum("aij,bji->ab", b.elements, b.elements)
    np.testing.assert_allclose(gram, np.eye(b.dim), atol=1e-14)
    np.testing.assert_allclose(np.einsum("aii->a", b.elements), 0, atol=1e-14)
    np.testing.assert_allclose(b.elements, b.elements.conj().transpose(0, 2, 1))


def test_pauli_basis_order_and_cap():
    b = build_pauli_basis(2)
    assert b.labels[:4] == ("IX", "IY", "IZ", "XI")
    assert b.labels[-1] == "ZZ"
    with pytest.raises(ValueError):
        build_pauli_basis(3, max_dim=4)
    with pytest.raises(ValueError):
        build_pauli_basis(0)


def test_structure_constants_against_dense_commutator(split):
    rng = np.random.default_rng(1)
    for _ in range(5):
        x, y = rng.normal(size=(2, split.dim))
        X, Y = split.matrix(x), split.matrix(y)
        dense = split.coefficients(-1j * (X @ Y - Y @ X))
        np.testing.assert_allclose(commutator_coeffs(split, x, y), dense, atol=1e-12)


def test_structure_constants_totally_antisymmetric(split):
    f = split.f
    np.testing.assert_allclose(f, -f.transpose(1, 0, 2), atol=1e-14)
    np.testing.assert_allclose(f, -f.transpose(0, 2, 1), atol=1e-14)


def test_su2_structure_constants_are_levi_civita():
    f = structure_constants(build_pauli_basis(1).elements)
    # [sigma_a/sqrt2, sigma_b/sqrt2] = i sqrt2 eps_abc sigma_c/sqrt2
    assert f[0, 1, 2] == pytest.approx(np.sqrt(2))
    assert f[1, 0, 2] == pytest.approx(-np.sqrt(2))


@pytest.mark.parametrize("name", PRESETS)
def test_presets_build_orthogonal_splits(name):
    s = build_split(None, name)
    gram = np.einsum("aij,bji->ab", s.elements, s.elements).real
    np.testing.assert_allclose(gram, np.eye(s.dim), atol=1e-12)
    assert s.dim_a + s.dim_b == s.dim


def test_heisenberg_split_layout(split):
    assert split.dim_a == 7 and split.dim_b == 8 and split.n == 4
    xx = split.basis.matrix(np.eye(15)[split.basis.labels.index("XX")])
    yy = split.basis.matrix(np.eye(15)[split.basis.labels.index("YY")])
    zz = split.basis.matrix(np.eye(15)[split.basis.labels.index("ZZ")])
    heis = (xx + yy + zz) / np.sqrt(3)
    np.testing.assert_allclose(split.elements[6], heis, atol=1e-14)


def test_build_split_rejects_bad_input():
    with pytest.raises((ValueError, KeyError)):
        build_split(None, "no_such_preset")
    b = build_pauli_basis(1)
    with pytest.raises(ValueError):
        build_split(b, np.zeros((1, 3)))


def test_projectors_and_weights(split):
    h = random_coeffs(split.dim, 2)
    a, b = project(split, h, "A"), project(split, h, "B")
    np.testing.assert_allclose(a + b, h)
    assert abs(a @ b) < 1e-14
    np.testing.assert_allclose(apply_Fq(split, apply_Gq(split, h, 7.0), 7.0), h)
    assert q_inner(split, h, h, 1.0) == pytest.approx(h @ h)
    assert q_norm(split, h, 4.0) ** 2 == pytest.approx(a @ a + 4 * b @ b)
    with pytest.raises(ValueError):
        apply_Gq(split, h, 0.0)
    with pytest.raises(ValueError):
        project(split, h, "C")


@settings(max_examples=40, deadline=None)
@given(st.lists(finite, min_size=15, max_size=15), st.lists(finite, min_size=15, max_size=15))
def test_commutator_antisymmetry_property(split, x, y):
    x, y = np.array(x), np.array(y)
    np.testing.assert_allclose(commutator_coeffs(split, x, y), -commutator_coeffs(split, y, x), atol=1e-10)
    # ad-invariance of the HS product: <[x, y], y> = 0
    assert abs(commutator_coeffs(split, x, y) @ y) < 1e-9 * (1 + np.linalg.norm(x) * np.linalg.norm(y) ** 2)


def test_to_special_unitary_conventions():
    cnot = np.eye(4)[[0, 1, 3, 2]].astype(complex)
    v, phase = to_special_unitary(cnot)
    assert phase == pytest.approx(-np.pi / 4)
    assert np.linalg.det(v) == pytest.approx(1.0)
    np.testing.assert_allclose(np.exp(1j * phase) * v, cnot, atol=1e-15)
    with pytest.raises(NotUnitaryError):
        to_special_unitary(2 * np.eye(2))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_exp_log_round_trip_property(split, seed):
    u = random_su(4, seed)
    seeds = log_branches(u, split, max_norm=9.0, max_shift=1)
    assert seeds
    for s in seeds[:6]:
        np.testing.assert_allclose(np.trace(s.operator.matrix), 0, atol=1e-12)
        assert seed_residual(s, u) < 1e-10
        assert s.hs_norm == pytest.approx(np.linalg.norm(s.coeffs))
    norms = [s.hs_norm for s in seeds]
    assert norms == sorted(norms)


def test_log_branches_degenerate_spectrum(split):
    cnot = to_special_unitary(np.eye(4)[[0, 1, 3, 2]].astype(complex))[0]
    seeds = log_branches(cnot, split, max_norm=3.0)
    assert [round(s.hs_norm, 4) for s in seeds] == [2.7207, 2.7207]
    for s in seeds:
        assert seed_residual(s, cnot) < 1e-10


def test_log_branches_identity_and_errors(split):
    seeds = log_branches(np.eye(4, dtype=complex), split, max_norm=1e-9)
    assert len(seeds) == 1 and seeds[0].hs_norm == 0.0
    with pytest.raises(NotUnitaryError):
        log_branches(np.diag([1j, 1, 1, 1]), split)   # unitary with det i
    with pytest.raises(NotUnitaryError):
        log_branches(np.ones((4, 4)), split)


def test_branch_table_formatting(split, example1):
    seeds = log_branches(example1.target, split, max_norm=4.1)
    text = format_branch_table(seeds)
    assert text.splitlines()[0].startswith("m")
    assert len(text.splitlines()) == len(seeds) + 1


def test_unitarity_error_of_exponential(split):
    h = split.matrix(random_coeffs(split.dim, 3, 2.0))
    assert unitarity_error(expm(-1j * h)) < 1e-13
