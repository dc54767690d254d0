import numpy as np
import pytest
import scipy.sparse as sp

from src.internal.errors import NotConvergedError, SingularSystemError
from src.internal.sparse_la import (
    Preconditioner,
    SparseSym,
    backward_error,
    cg_solve,
    is_symmetric,
    kkt_matrix,
    ldl_solve,
    schur_solve,
)


def _chain_laplacian(n: int) -> sp.csr_matrix:
    sym = SparseSym(dim=n)
    idx = np.arange(n)
    sym.add_diagonal(idx, np.full(n, 2.0))
    sym.add(idx[:-1], idx[1:], -1.0)
    sym.add(idx[1:], idx[:-1], -1.0)
    return sym.to_csr()


def test_assembly_sums_duplicates():
    sym = SparseSym(dim=3)
    sym.add([0, 0, 1], [0, 0, 2], [1.0, 2.0, 5.0])
    sym.add(2, 1, 5.0)
    mat = sym.to_csr().toarray()
    assert mat[0, 0] == 3.0
    assert mat[1, 2] == 5.0
    assert is_symmetric(sym.to_csr())


def test_assembly_ignores_negative_indices():
    sym = SparseSym(dim=2)
    sym.add([-1, 0], [0, 1], [7.0, 3.0])
    mat = sym.to_csr().toarray()
    np.testing.assert_array_equal(mat, [[0.0, 3.0], [0.0, 0.0]])


def test_assembly_rejects_bad_entries():
    sym = SparseSym(dim=2)
    with pytest.raises(IndexError):
        sym.add(2, 0, 1.0)
    with pytest.raises(ValueError):
        sym.add(0, 0, np.inf)


def test_assembly_is_order_independent():
    rng = np.random.default_rng(3)
    n = 20
    rows = rng.integers(0, n, size=200)
    cols = rng.integers(0, n, size=200)
    vals = rng.standard_normal(200)
    a = SparseSym(dim=n)
    a.add(rows, cols, vals)
    perm = rng.permutation(200)
    b = SparseSym(dim=n)
    for k in np.array_split(perm, 7):
        b.add(rows[k], cols[k], vals[k])
    ma, mb = a.to_csr(), b.to_csr()
    np.testing.assert_array_equal(ma.indptr, mb.indptr)
    np.testing.assert_array_equal(ma.indices, mb.indices)
    assert ma.data.tobytes() == mb.data.tobytes()


def test_add_blocks_matches_add_block():
    blocks = np.array([[[1.0, 2.0], [2.0, 4.0]], [[3.0, -1.0], [-1.0, 5.0]]])
    idx = np.array([[0, 2], [2, 1]])
    a = SparseSym(dim=3)
    a.add_blocks(idx, blocks)
    b = SparseSym(dim=3)
    b.add_block(idx[0], blocks[0])
    b.add_block(idx[1], blocks[1])
    np.testing.assert_array_equal(a.to_csr().toarray(), b.to_csr().toarray())


def test_cg_identity_converges_in_one_iteration():
    b = np.array([1.0, -2.0, 3.0])
    result = cg_solve(sp.identity(3, format="csr"), b)
    np.testing.assert_allclose(result.x, b)
    assert result.iterations == 1


def test_cg_zero_rhs_returns_zero():
    result = cg_solve(_chain_laplacian(5), np.zeros(5))
    np.testing.assert_array_equal(result.x, 0.0)
    assert result.iterations == 0


@pytest.mark.parametrize("kind", list(Preconditioner))
def test_cg_chain_matches_dense_solve(kind):
    n = 64
    mat = _chain_laplacian(n)
    b = np.zeros(n)
    b[0] = 1.0
    result = cg_solve(mat, b, tol=1e-12, max_iters=500, preconditioner=kind)
    expected = np.linalg.solve(mat.toarray(), b)
    np.testing.assert_allclose(result.x, expected, atol=1e-8)


def test_cg_indefinite_reports_residual():
    mat = sp.diags([1.0, -1.0]).tocsr()
    with pytest.raises(NotConvergedError) as info:
        cg_solve(mat, np.array([1.0, 1.0]))
    assert info.value.residual > 0.0


def test_cg_iteration_cap():
    with pytest.raises(NotConvergedError):
        cg_solve(_chain_laplacian(64), np.ones(64), tol=1e-14, max_iters=2)


def test_ldl_hand_solved_kkt():
    hess = sp.identity(2, format="csr")
    jac = sp.csr_matrix(np.array([[1.0, 1.0]]))
    sol = ldl_solve(hess, jac, np.array([0.0, 0.0, -1.0]))
    np.testing.assert_allclose(sol, [-0.5, -0.5, 0.5], atol=1e-12)


def test_ldl_zero_constraint_row_is_singular():
    hess = sp.identity(2, format="csr")
    jac = sp.csr_matrix((1, 2))
    with pytest.raises(SingularSystemError):
        ldl_solve(hess, jac, np.array([0.0, 0.0, -1.0]))


def test_ldl_random_system_residual():
    rng = np.random.default_rng(5)
    n, m = 30, 4
    a = rng.standard_normal((n, n))
    hess = sp.csr_matrix(a @ a.T + n * np.eye(n))
    jac = sp.csr_matrix(rng.standard_normal((m, n)))
    rhs = rng.standard_normal(n + m)
    sol = ldl_solve(hess, jac, rhs)
    assert backward_error(kkt_matrix(hess, jac), sol, rhs) <= 1e-10


def test_ldl_without_constraints():
    hess = sp.diags([2.0, 4.0]).tocsr()
    sol = ldl_solve(hess, sp.csr_matrix((0, 2)), np.array([2.0, 4.0]))
    np.testing.assert_allclose(sol, [1.0, 1.0])


def test_schur_matches_ldl():
    rng = np.random.default_rng(7)
    n = 12
    diag = rng.uniform(1.0, 3.0, n)
    jac = sp.csr_matrix(rng.standard_normal((2, n)))
    grad = rng.standard_normal(n)
    cons = rng.standard_normal(2)
    delta, lam = schur_solve(diag, jac, grad, cons)
    sol = ldl_solve(sp.diags(diag).tocsr(), jac, np.concatenate([-grad, -cons]))
    np.testing.assert_allclose(delta, sol[:n], atol=1e-10)
    np.testing.assert_allclose(lam, sol[n:], atol=1e-10)


def test_schur_requires_positive_diagonal():
    with pytest.raises(SingularSystemError):
        schur_solve(
            np.array([1.0, 0.0]), sp.csr_matrix((0, 2)), np.zeros(2), np.zeros(0)
        )
