"""疎行列の組み立てと線形ソルバを提供するモジュール.

対称疎行列の三つ組 (row, col, value) による組み立て、
前処理付き共役勾配法、ボーダー付き KKT 系の直接解法を扱う。
"""

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from numpy.typing import NDArray

from src.internal.errors import NotConvergedError, SingularSystemError

_logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]
IntArray = NDArray[np.int64]

KKT_RESIDUAL_TOL = 1e-10


class Preconditioner(Enum):
    """共役勾配法の前処理の種類."""

    NONE = "none"
    JACOBI = "jacobi"
    ILU = "ilu"


@dataclass
class SparseSym:
    """三つ組バッファから対称疎行列を組み立てる.

    同じ位置の重複要素は (row, col, value) の辞書順に整列してから加算するため、
    挿入順に依存せずビット単位で同一の行列が得られる。
    """

    dim: int
    _rows: list[IntArray] = field(default_factory=list)
    _cols: list[IntArray] = field(default_factory=list)
    _vals: list[FloatArray] = field(default_factory=list)

    def add(
        self: "SparseSym",
        rows: IntArray | int,
        cols: IntArray | int,
        vals: FloatArray | float,
    ) -> None:
        """要素を追加する. 負のインデックスを持つ要素は無視する."""
        r = np.atleast_1d(np.asarray(rows, dtype=np.int64))
        c = np.atleast_1d(np.asarray(cols, dtype=np.int64))
        v = np.broadcast_to(np.asarray(vals, dtype=np.float64), r.shape).copy()
        if not np.all(np.isfinite(v)):
            message = "Non-finite matrix entry."
            raise ValueError(message)
        keep = (r >= 0) & (c >= 0)
        if np.any((r >= self.dim) | (c >= self.dim)):
            message = f"Matrix index out of range for dimension {self.dim}."
            raise IndexError(message)
        self._rows.append(r[keep])
        self._cols.append(c[keep])
        self._vals.append(v[keep])

    def add_diagonal(self: "SparseSym", indices: IntArray, values: FloatArray) -> None:
        """対角要素を追加する."""
        self.add(indices, indices, values)

    def add_block(self: "SparseSym", indices: IntArray, block: FloatArray) -> None:
        """密なブロックを指定インデックスの行・列に加算する."""
        idx = np.asarray(indices, dtype=np.int64)
        rr, cc = np.meshgrid(idx, idx, indexing="ij")
        self.add(rr.ravel(), cc.ravel(), np.asarray(block).ravel())

    def add_blocks(self: "SparseSym", indices: IntArray, blocks: FloatArray) -> None:
        """(m, k) のインデックスと (m, k, k) のブロック列をまとめて加算する."""
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size == 0:
            return
        blk = np.asarray(blocks, dtype=np.float64)
        rows = np.broadcast_to(idx[:, :, None], blk.shape)
        cols = np.broadcast_to(idx[:, None, :], blk.shape)
        self.add(rows.ravel(), cols.ravel(), blk.ravel())

    def to_csr(self: "SparseSym") -> sp.csr_matrix:
        """重複を正規化して加算した CSR 行列を返す."""
        if not self._rows:
            return sp.csr_matrix((self.dim, self.dim))
        rows = np.concatenate(self._rows)
        cols = np.concatenate(self._cols)
        vals = np.concatenate(self._vals)
        if rows.size == 0:
            return sp.csr_matrix((self.dim, self.dim))
        order = np.lexsort((vals, cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        new_key = np.ones(rows.size, dtype=bool)
        new_key[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
        starts = np.flatnonzero(new_key)
        summed = np.add.reduceat(vals, starts)
        return sp.csr_matrix(
            (summed, (rows[starts], cols[starts])), shape=(self.dim, self.dim)
        )


def is_symmetric(mat: sp.spmatrix, tol: float = 1e-12) -> bool:
    """行列が許容誤差内で対称かどうかを返す."""
    diff = abs(mat - mat.T)
    return bool(diff.max() <= tol * max(1.0, abs(mat).max())) if diff.nnz else True


@dataclass(frozen=True)
class CGResult:
    """共役勾配法の結果."""

    x: FloatArray
    iterations: int
    residual: float


def _build_preconditioner(
    mat: sp.csr_matrix, kind: Preconditioner
) -> "spla.LinearOperator | None":
    """前処理作用素を作成する."""
    if kind is Preconditioner.NONE:
        return None
    if kind is Preconditioner.JACOBI:
        diag = mat.diagonal()
        inv = np.where(np.abs(diag) > 0.0, 1.0 / np.where(diag == 0.0, 1.0, diag), 1.0)
        return spla.LinearOperator(mat.shape, matvec=lambda r: inv * r)
    try:
        ilu = spla.spilu(mat.tocsc(), drop_tol=1e-4, fill_factor=10)
    except RuntimeError:
        _logger.warning("Incomplete LU failed, falling back to Jacobi preconditioner.")
        return _build_preconditioner(mat, Preconditioner.JACOBI)
    return spla.LinearOperator(mat.shape, matvec=ilu.solve)


def cg_solve(  # noqa: PLR0913
    mat: sp.spmatrix,
    rhs: FloatArray,
    tol: float = 1e-8,
    max_iters: int = 1000,
    preconditioner: Preconditioner = Preconditioner.JACOBI,
    x0: FloatArray | None = None,
) -> CGResult:
    """前処理付き共役勾配法で対称正定値系 A x = b を解く.

    Parameters
    ----------
    mat : sp.spmatrix
        対称正定値行列.

    rhs : FloatArray
        右辺ベクトル.

    tol : float
        相対残差 ||Ax - b|| / ||b|| の許容値.

    max_iters : int
        最大反復回数.

    preconditioner : Preconditioner
        前処理の種類.

    x0 : FloatArray | None
        初期解. 省略時は0ベクトル.

    Returns
    -------
    CGResult
        解と反復回数、最終相対残差.

    Notes
    -----
    p^T A p <= 0 となった場合は不定値行列と判断し、
    その時点の残差を付けて NotConvergedError を送出する。

    """
    a = sp.csr_matrix(mat)
    b = np.asarray(rhs, dtype=np.float64)
    bnorm = float(np.linalg.norm(b))
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    if bnorm == 0.0:
        return CGResult(x=np.zeros_like(b), iterations=0, residual=0.0)

    precond = _build_preconditioner(a, preconditioner)
    apply_m = (lambda r: r) if precond is None else precond.matvec

    r = b - a @ x
    res = float(np.linalg.norm(r)) / bnorm
    if res <= tol:
        return CGResult(x=x, iterations=0, residual=res)
    z = apply_m(r)
    p = z.copy()
    rz = float(r @ z)
    for it in range(1, max_iters + 1):
        ap = a @ p
        pap = float(p @ ap)
        if pap <= 0.0:
            message = f"CG breakdown (p^T A p = {pap:.3e}) at iteration {it}."
            raise NotConvergedError(message, residual=res)
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        res = float(np.linalg.norm(r)) / bnorm
        if res <= tol:
            _logger.debug("CG converged in %d iterations (res=%.3e).", it, res)
            return CGResult(x=x, iterations=it, residual=res)
        z = apply_m(r)
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new

    message = f"CG did not converge in {max_iters} iterations (res={res:.3e})."
    raise NotConvergedError(message, residual=res)


def kkt_matrix(hess: sp.spmatrix, jac: sp.spmatrix) -> sp.csc_matrix:
    """ボーダー付き行列 [H J^T; J 0] を作成する."""
    m = jac.shape[0]
    if m == 0:
        return sp.csc_matrix(hess)
    return sp.bmat(
        [[sp.csr_matrix(hess), sp.csr_matrix(jac).T], [sp.csr_matrix(jac), None]],
        format="csc",
    )


def backward_error(mat: sp.spmatrix, sol: FloatArray, rhs: FloatArray) -> float:
    """正規化された後退誤差 ||K s - r|| / (||K|| ||s|| + ||r||) を返す."""
    resid = float(np.linalg.norm(mat @ sol - rhs))
    scale = float(spla.norm(mat, np.inf)) * float(np.linalg.norm(sol)) + float(
        np.linalg.norm(rhs)
    )
    return resid / scale if scale > 0.0 else resid


def ldl_solve(hess: sp.spmatrix, jac: sp.spmatrix, rhs: FloatArray) -> FloatArray:
    """ボーダー付き対称不定値系 [H J^T; J 0] s = rhs を解く.

    Parameters
    ----------
    hess : sp.spmatrix
        (n, n) の対称行列 H.

    jac : sp.spmatrix
        (m, n) の制約ヤコビアン J.

    rhs : FloatArray
        長さ n + m の右辺.

    Returns
    -------
    FloatArray
        解 (Δ, λ) を連結したベクトル.

    Notes
    -----
    ピボット付き疎 LU 分解で (2,2) ブロックの0を扱う。
    後退誤差が 1e-10 を超える場合は反復改良を1回行い、
    それでも満たさなければ SingularSystemError を送出する。

    """
    kkt = kkt_matrix(hess, jac)
    b = np.asarray(rhs, dtype=np.float64)
    if kkt.shape[0] != b.size:
        message = f"KKT dimension {kkt.shape[0]} does not match rhs size {b.size}."
        raise ValueError(message)
    try:
        lu = spla.splu(kkt)
    except RuntimeError as e:
        message = f"KKT factorization failed: {e}"
        raise SingularSystemError(message) from e

    sol = lu.solve(b)
    if not np.all(np.isfinite(sol)):
        message = "KKT solve produced non-finite values."
        raise SingularSystemError(message)
    err = backward_error(kkt, sol, b)
    if err > KKT_RESIDUAL_TOL:
        sol = sol + lu.solve(b - kkt @ sol)
        err = backward_error(kkt, sol, b)
    if err > KKT_RESIDUAL_TOL or not np.all(np.isfinite(sol)):
        message = f"KKT residual {err:.3e} exceeds tolerance."
        raise SingularSystemError(message)
    return sol


def schur_solve(
    diag: FloatArray, jac: sp.spmatrix, grad: FloatArray, cons: FloatArray
) -> tuple[FloatArray, FloatArray]:
    """H が対角のときの KKT 系をシューア補元で解く.

    [D J^T; J 0][Δ; λ] = [-g; -h] に対し
    S = J D^-1 J^T、S λ = h - J D^-1 g、Δ = -D^-1 (g + J^T λ) を計算する。
    """
    d = np.asarray(diag, dtype=np.float64)
    if np.any(d <= 0.0):
        message = "Schur solve requires a positive diagonal."
        raise SingularSystemError(message)
    j = sp.csr_matrix(jac)
    dinv = 1.0 / d
    if j.shape[0] == 0:
        return -dinv * grad, np.zeros(0)
    jd = j.multiply(dinv[None, :]).tocsr()
    schur = (jd @ j.T).toarray()
    if np.linalg.cond(schur) > 1e14:  # noqa: PLR2004
        message = "Schur complement is singular (rank-deficient constraints)."
        raise SingularSystemError(message)
    lam = np.linalg.solve(schur, cons - jd @ grad)
    delta = -dinv * (grad + j.T @ lam)
    return delta, lam
