"""Operator bases, subspace splits, q-metric maps and matrix-log branches.

All operators live in the space of traceless Hermitian ``n x n`` matrices and
are represented by real coefficient vectors over an orthonormal basis
(``Tr(C_a C_b) = delta_ab``).  A :class:`SubspaceSplit` reorders that basis so
that the allowed directions come first, followed by the forbidden ones.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import reduce
from typing import Sequence

import numpy as np
from scipy.linalg import expm, schur

MAX_DIM = 16

_PAULI = {
    "I": np.eye(2, dtype=complex),
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "Z": np.array([[1, 0], [0, -1]], dtype=complex),
}


class NotUnitaryError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class OperatorBasis:
    """Orthonormal basis of the traceless Hermitian ``n x n`` matrices."""

    n: int
    elements: np.ndarray  # (n^2 - 1, n, n)
    labels: tuple[str, ...]

    @property
    def dim(self) -> int:
        return self.elements.shape[0]

    def coefficients(self, mat: np.ndarray) -> np.ndarray:
        """Coefficients ``Tr(C_a M)`` of a Hermitian matrix."""
        mat = np.asarray(mat)
        return np.einsum("aij,ji->a", self.elements, mat).real

    def matrix(self, coeffs) -> np.ndarray:
        return np.tensordot(np.asarray(coeffs, dtype=float), self.elements, axes=1)


def build_pauli_basis(num_qubits: int, max_dim: int = MAX_DIM) -> OperatorBasis:
    """Normalized non-identity Pauli strings on ``num_qubits`` qubits.

    Strings are ordered lexicographically over the alphabet ``IXYZ`` (qubit 1
    is the leftmost tensor factor), skipping the all-identity string.  Each
    element is divided by ``sqrt(2**num_qubits)`` so that ``Tr(C^2) = 1``.
    """
    if num_qubits < 1:
        raise ValueError("num_qubits must be >= 1")
    n = 2**num_qubits
    if n > max_dim:
        raise ValueError(f"Hilbert-space dimension {n} exceeds cap {max_dim}")
    labels = []
    elements = []
    for word in itertools.product("IXYZ", repeat=num_qubits):
        label = "".join(word)
        if set(label) == {"I"}:
            continue
        labels.append(label)
        elements.append(reduce(np.kron, [_PAULI[c] for c in label]) / np.sqrt(n))
    return OperatorBasis(n, np.array(elements), tuple(labels))


def structure_constants(elements: np.ndarray) -> np.ndarray:
    """Real ``f[a, b, c]`` with ``[C_a, C_b] = i sum_c f[a, b, c] C_c``."""
    comm = np.einsum("aij,bjk->abik", elements, elements)
    comm = comm - comm.transpose(1, 0, 2, 3)
    # f_abc = -i Tr([C_a, C_b] C_c)
    f = -1j * np.einsum("abij,cji->abc", comm, elements)
    return np.ascontiguousarray(f.real)


@dataclass(frozen=True, eq=False)
class SubspaceSplit:
    """Orthogonal split of the operator space into allowed and forbidden parts.

    ``elements`` holds the working basis: ``elements[:dim_a]`` spans the
    allowed subspace and ``elements[dim_a:]`` the forbidden one.  Coefficient
    vectors of every operator handled by the solver refer to this basis.
    """

    basis: OperatorBasis
    elements: np.ndarray
    labels: tuple[str, ...]
    dim_a: int
    change: np.ndarray  # rows: working elements in coordinates of ``basis``
    f: np.ndarray = field(repr=False)
    name: str = "custom"

    @property
    def n(self) -> int:
        return self.basis.n

    @property
    def dim(self) -> int:
        return self.elements.shape[0]

    @property
    def dim_b(self) -> int:
        return self.dim - self.dim_a

    @property
    def allowed_indices(self) -> np.ndarray:
        return np.arange(self.dim_a)

    @property
    def forbidden_indices(self) -> np.ndarray:
        return np.arange(self.dim_a, self.dim)

    @property
    def mask_a(self) -> np.ndarray:
        m = np.zeros(self.dim)
        m[: self.dim_a] = 1.0
        return m

    @property
    def mask_b(self) -> np.ndarray:
        return 1.0 - self.mask_a

    def weights(self, q: float) -> np.ndarray:
        """Diagonal of ``G_q`` in the working basis."""
        return self.mask_a + q * self.mask_b

    def coefficients(self, mat: np.ndarray) -> np.ndarray:
        return np.einsum("aij,ji->a", self.elements, np.asarray(mat)).real

    def matrix(self, coeffs) -> np.ndarray:
        return np.tensordot(np.asarray(coeffs, dtype=float), self.elements, axes=1)

    def operator(self, coeffs) -> "HermitianOperator":
        return HermitianOperator(np.asarray(coeffs, dtype=float).copy(), self)


@dataclass(frozen=True, eq=False)
class HermitianOperator:
    """Traceless Hermitian operator given by coefficients over a split basis."""

    coeffs: np.ndarray
    split: SubspaceSplit

    @property
    def matrix(self) -> np.ndarray:
        return self.split.matrix(self.coeffs)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.coeffs))

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.coeffs, dtype=dtype)


def _orthonormalize(vectors: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    out = []
    for i, v in enumerate(np.asarray(vectors, dtype=float)):
        w = v.copy()
        for _ in range(2):
            for u in out:
                w -= (u @ w) * u
        nrm = np.linalg.norm(w)
        if nrm < tol * max(1.0, np.linalg.norm(v)):
            raise ValueError(f"allowed_spec vector {i} is linearly dependent on the preceding ones")
        out.append(w / nrm)
    return np.array(out).reshape(-1, vectors.shape[1] if len(vectors) else 0)


def _pauli_vector(basis: OperatorBasis, terms: dict[str, float]) -> np.ndarray:
    v = np.zeros(basis.dim)
    for label, c in terms.items():
        v[basis.labels.index(label)] = c
    return v


def _preset(name: str) -> tuple[OperatorBasis, np.ndarray]:
    if name == "two_qubit_heisenberg":
        basis = build_pauli_basis(2)
        locals_ = ["XI", "YI", "ZI", "IX", "IY", "IZ"]
        vecs = [_pauli_vector(basis, {lab: 1.0}) for lab in locals_]
        vecs.append(_pauli_vector(basis, {"XX": 1.0, "YY": 1.0, "ZZ": 1.0}))
        return basis, np.array(vecs)
    if name == "single_qubit_xy":
        basis = build_pauli_basis(1)
        return basis, np.array([_pauli_vector(basis, {"X": 1.0}), _pauli_vector(basis, {"Y": 1.0})])
    if name.startswith("full_"):
        basis = build_pauli_basis(int(name.split("_")[1]))
        return basis, np.eye(basis.dim)
    raise KeyError(f"unknown subspace preset {name!r}")


PRESETS = ("two_qubit_heisenberg", "single_qubit_xy", "full_1", "full_2")


def build_split(basis: OperatorBasis | None, allowed_spec) -> SubspaceSplit:
    """Build the allowed/forbidden split.

    ``allowed_spec`` is either a preset name (``basis`` may then be ``None``)
    or a sequence of coefficient vectors in the order of ``basis.labels``.
    The allowed span is Gram-Schmidt orthonormalized in the given order; the
    forbidden basis is obtained by orthonormalizing the projections of the
    original basis elements onto the complement, in basis order.
    """
    name = "custom"
    if isinstance(allowed_spec, str):
        name = allowed_spec
        preset_basis, allowed_spec = _preset(allowed_spec)
        if basis is None:
            basis = preset_basis
        elif basis.n != preset_basis.n:
            raise ValueError(f"preset {name!r} needs n={preset_basis.n}, basis has n={basis.n}")
    allowed_spec = np.atleast_2d(np.asarray(allowed_spec, dtype=float))
    if allowed_spec.size and allowed_spec.shape[1] != basis.dim:
        raise ValueError(f"allowed vectors must have length {basis.dim}")
    a_vecs = _orthonormalize(allowed_spec) if allowed_spec.size else np.zeros((0, basis.dim))
    b_vecs = []
    for e in np.eye(basis.dim):
        w = e - a_vecs.T @ (a_vecs @ e)
        for u in b_vecs:
            w -= (u @ w) * u
        for u in b_vecs:
            w -= (u @ w) * u
        nrm = np.linalg.norm(w)
        if nrm > 1e-8:
            b_vecs.append(w / nrm)
    change = np.vstack([a_vecs] + ([np.array(b_vecs)] if b_vecs else []))
    if change.shape[0] != basis.dim:
        raise RuntimeError("failed to complete the operator basis")
    elements = np.tensordot(change, basis.elements, axes=1)
    labels = []
    for row in change:
        terms = [(abs(c), basis.labels[i], c) for i, c in enumerate(row) if abs(c) > 1e-12]
        if len(terms) == 1:
            labels.append(terms[0][1])
        else:
            labels.append("+".join(f"{c:.3g}*{lab}" for _, lab, c in terms))
    return SubspaceSplit(
        basis=basis,
        elements=elements,
        labels=tuple(labels),
        dim_a=a_vecs.shape[0],
        change=change,
        f=structure_constants(elements),
        name=name,
    )


def _coeffs(op) -> np.ndarray:
    return np.asarray(op.coeffs if isinstance(op, HermitianOperator) else op, dtype=float)


def _wrap(like, coeffs: np.ndarray, split: SubspaceSplit):
    return HermitianOperator(coeffs, split) if isinstance(like, HermitianOperator) else coeffs


def project(split: SubspaceSplit, op, which: str):
    """Orthogonal projection onto the allowed (``"A"``) or forbidden (``"B"``) part."""
    c = _coeffs(op)
    if which == "A":
        out = c * split.mask_a
    elif which == "B":
        out = c * split.mask_b
    else:
        raise ValueError("which must be 'A' or 'B'")
    return _wrap(op, out, split)


def _check_q(q: float) -> None:
    if not q > 0:
        raise ValueError(f"q must be positive, got {q}")


def apply_Gq(split: SubspaceSplit, op, q: float):
    """``G_q = P_A + q P_B``."""
    _check_q(q)
    return _wrap(op, _coeffs(op) * split.weights(q), split)


def apply_Fq(split: SubspaceSplit, op, q: float):
    """``F_q = P_A + P_B / q``, the inverse of :func:`apply_Gq`."""
    _check_q(q)
    return _wrap(op, _coeffs(op) / split.weights(q), split)


def q_inner(split: SubspaceSplit, x, y, q: float) -> float:
    """Penalty inner product: HS product with forbidden components weighted by ``q``."""
    _check_q(q)
    return float(_coeffs(x) @ (split.weights(q) * _coeffs(y)))


def q_norm(split: SubspaceSplit, x, q: float) -> float:
    return float(np.sqrt(q_inner(split, x, x, q)))


def commutator_coeffs(split: SubspaceSplit, x, y) -> np.ndarray:
    """Coefficients of ``-i [X, Y]``, i.e. ``sum_ab f_abc x_a y_b``."""
    return np.einsum("abc,a,b->c", split.f, _coeffs(x), _coeffs(y))


def unitarity_error(u: np.ndarray) -> float:
    u = np.asarray(u)
    return float(np.abs(u.conj().T @ u - np.eye(u.shape[0])).max())


def to_special_unitary(u: np.ndarray, tol: float = 1e-10) -> tuple[np.ndarray, float]:
    """Split ``U = exp(i phase) V`` with ``det V = 1``.

    The phase is ``arg(det U) / n`` with the argument taken in ``[-pi, pi)``, so
    a determinant of ``-1`` yields ``phase = -pi / n``.
    """
    u = np.asarray(u, dtype=complex)
    if u.ndim != 2 or u.shape[0] != u.shape[1]:
        raise NotUnitaryError("expected a square matrix")
    if unitarity_error(u) > tol:
        raise NotUnitaryError(f"matrix is not unitary (error {unitarity_error(u):.2e})")
    n = u.shape[0]
    arg = float(np.angle(np.linalg.det(u)))
    if arg >= np.pi - 1e-12:
        arg -= 2 * np.pi
    phase = arg / n
    if abs(phase) < 1e-15:
        return u.copy(), 0.0
    return u * np.exp(-1j * phase), phase


def nearest_unitary(m: np.ndarray) -> np.ndarray:
    """Polar factor of ``m`` (closest unitary in Frobenius norm)."""
    w, _, vh = np.linalg.svd(np.asarray(m, dtype=complex))
    return w @ vh


@dataclass(frozen=True, eq=False)
class BranchSeed:
    """One traceless logarithm ``H`` with ``exp(-i H) = alpha * U_tg``."""

    operator: HermitianOperator
    hs_norm: float
    phase_sector: complex
    branch_index: int
    sector: int
    shifts: tuple[int, ...]

    @property
    def coeffs(self) -> np.ndarray:
        return self.operator.coeffs


def _eigen_clusters(u: np.ndarray, tol: float = 1e-9):
    t, z = schur(u, output="complex")
    theta = np.angle(np.diag(t))
    order = np.lexsort((np.arange(len(theta)), theta))
    theta, z = theta[order], z[:, order]
    clusters: list[list[int]] = []
    for i, th in enumerate(theta):
        for cl in clusters:
            d = abs(np.angle(np.exp(1j * (th - theta[cl[0]]))))
            if d < tol:
                cl.append(i)
                break
        else:
            clusters.append([i])
    vecs = np.empty_like(z)
    phases = np.empty(len(theta))
    for cl in clusters:
        qmat, r = np.linalg.qr(z[:, cl])
        sgn = np.diag(r) / np.where(np.abs(np.diag(r)) > 0, np.abs(np.diag(r)), 1.0)
        vecs[:, cl] = qmat * sgn
        # circular mean keeps clusters straddling the branch cut on one side
        mean = np.angle(np.exp(1j * (theta[cl] - theta[cl[0]])).mean()) + theta[cl[0]]
        phases[cl] = np.angle(np.exp(1j * mean))
    return phases, vecs, clusters


def log_branches(
    u_tg: np.ndarray,
    split: SubspaceSplit,
    max_norm: float = np.inf,
    max_shift: int = 2,
    det_tol: float = 1e-10,
) -> list[BranchSeed]:
    """Enumerate traceless logarithms of ``U_tg`` over all global-phase sectors.

    For every sector ``alpha = exp(2 pi i k / n)`` and every integer shift
    vector (constant on clusters of degenerate eigenphases, entries bounded by
    ``max_shift``) a Hermitian ``H`` with ``exp(-i H) = alpha U_tg`` is formed
    from the principal eigenphases in ``(-pi, pi]``; only traceless ones are
    kept.  Results are sorted by HS norm, then sector, then shift vector.
    """
    u = np.asarray(u_tg, dtype=complex)
    if unitarity_error(u) > det_tol:
        raise NotUnitaryError(f"target is not unitary (error {unitarity_error(u):.2e})")
    if abs(np.linalg.det(u) - 1) > det_tol:
        raise NotUnitaryError("target must be in SU(n); normalize with to_special_unitary first")
    n = u.shape[0]
    theta, vecs, clusters = _eigen_clusters(u)
    found = []
    for k in range(n):
        phi = 2 * np.pi * k / n
        for cshift in itertools.product(range(-max_shift, max_shift + 1), repeat=len(clusters)):
            m = np.empty(n)
            for cl, s in zip(clusters, cshift):
                m[cl] = s
            h = -(theta + phi + 2 * np.pi * m)
            if abs(h.sum()) > 1e-6:
                continue
            norm = float(np.linalg.norm(h))
            if norm > max_norm:
                continue
            mat = (vecs * h) @ vecs.conj().T
            mat = 0.5 * (mat + mat.conj().T)
            found.append((round(norm, 9), k, tuple(int(x) for x in m), norm, mat))
    found.sort(key=lambda r: (r[0], r[1], r[2]))
    seeds: list[BranchSeed] = []
    kept: list[np.ndarray] = []
    for _, k, m, norm, mat in found:
        if any(np.linalg.norm(mat - other) < 1e-8 for other in kept):
            continue
        kept.append(mat)
        coeffs = split.coefficients(mat)
        seeds.append(
            BranchSeed(
                operator=split.operator(coeffs),
                hs_norm=norm,
                phase_sector=complex(np.round(np.exp(2j * np.pi * k / n), 15)),
                branch_index=len(seeds) + 1,
                sector=k,
                shifts=m,
            )
        )
    return seeds


def seed_residual(seed: BranchSeed, u_tg: np.ndarray) -> float:
    """Frobenius distance between ``exp(-i H)`` and ``alpha U_tg``."""
    return float(np.linalg.norm(expm(-1j * seed.operator.matrix) - seed.phase_sector * np.asarray(u_tg)))


def format_branch_table(seeds: Sequence[BranchSeed], limit: int | None = None) -> str:
    rows = ["m    norm      alpha   shifts"]
    for s in list(seeds)[:limit]:
        a = s.phase_sector
        if abs(a.imag) < 1e-12:
            alpha = f"{a.real:+.0f}"
        elif abs(a.real) < 1e-12:
            alpha = f"{a.imag:+.0f}i".replace("1i", "i")
        else:
            alpha = f"{a:.3f}"
        rows.append(f"{s.branch_index:<4d} {s.hs_norm:8.4f}  {alpha:>6s}   {s.shifts}")
    return "\n".join(rows)
