"""固体頂点とレベルセットの間の接触を扱うモジュール.

レベルセットの補間値を頂点の符号付き距離とみなし、
対数バリアで非貫通を課す。プリミティブペアの収集と、
ニュートン方向に対する連続衝突判定 (CCD) による歩幅の上限を提供する。
"""

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.sparse as sp
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field

from src.internal.errors import NonPositiveDistanceError
from src.internal.grid import (
    CellField,
    FieldKind,
    bilinear_stencil,
    bilinear_weights,
    quadratic_stencil,
)
from src.internal.sparse_la import SparseSym

_logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]
IntArray = NDArray[np.int64]

CCD_MIN_STEP = 1e-4
DISTANCE_GRADIENT_FLOOR = 1e-8
DEGENERATE_SEGMENT_LENGTH = 1e-12


class InterpScheme(Enum):
    """距離の補間方式."""

    LINEAR = "linear"
    QUADRATIC = "quadratic"


class ContactParams(BaseModel):
    """接触バリアのパラメータ."""

    dhat: float = Field(gt=0.0, description="距離の閾値 d̂ [m].")
    kappa: float = Field(gt=0.0, description="バリア剛性 ϰ [J].")
    scheme: InterpScheme = Field(
        default=InterpScheme.LINEAR, description="距離の補間方式."
    )

    model_config = ConfigDict(frozen=True)

    @staticmethod
    def create_default(
        dx: float, rho_l: float, scheme: InterpScheme = InterpScheme.LINEAR
    ) -> "ContactParams":
        """グリッド幅から既定値 d̂ = 0.5 dx, ϰ = 1e3 ρ_l dx⁴ を作成する."""
        return ContactParams(dhat=0.5 * dx, kappa=1e3 * rho_l * dx**4, scheme=scheme)


@dataclass(frozen=True)
class PrimitivePair:
    """固体頂点と双対セルの組.

    anchor は収集時の双対セルの左下のセル (i0, j0)。
    線形補間では最適化中このステンシルを固定し、2次補間では参照しない。
    """

    vertex: int
    anchor: tuple[int, int]
    d: float


@dataclass(frozen=True)
class DistanceTerms:
    """1頂点の符号付き距離と、ステンシル上の φ と位置 x に関する微分."""

    d: float
    cells: IntArray
    d_phi: FloatArray
    d_x: FloatArray


def _linear_terms(
    phi: CellField, x: FloatArray, anchor: tuple[int, int]
) -> DistanceTerms:
    """固定した双対セル上の双線形補間. x が双対セルの外にあれば外挿する."""
    desc = phi.desc
    i0, j0 = anchor
    c1 = desc.cell_center(i0, j0)
    fx, fy = (np.asarray(x, dtype=np.float64) - c1) / desc.dx
    ny = desc.ny
    cells = np.array(
        [i0 * ny + j0, (i0 + 1) * ny + j0, i0 * ny + j0 + 1, (i0 + 1) * ny + j0 + 1],
        dtype=np.int64,
    )
    p1, p2, p3, p4 = phi.data.ravel()[cells]
    w = bilinear_weights(np.array([fx]), np.array([fy]))[0]
    d = float(w @ np.array([p1, p2, p3, p4]))
    d_x = np.array(
        [
            ((1.0 - fy) * (p2 - p1) + fy * (p4 - p3)) / desc.dx,
            ((1.0 - fx) * (p3 - p1) + fx * (p4 - p2)) / desc.dx,
        ]
    )
    return DistanceTerms(d=d, cells=cells, d_phi=w, d_x=d_x)


def _quadratic_terms(phi: CellField, x: FloatArray) -> DistanceTerms:
    """現在位置で組み直す3x3の2次Bスプライン補間."""
    desc = phi.desc
    coords = desc.to_lattice(np.atleast_2d(x), FieldKind.CELL)
    ix, iy, wx, wy, dwx, dwy = quadratic_stencil(phi.data.shape, coords)
    cells = (ix[0][:, None] * desc.ny + iy[0][None, :]).ravel()
    w = np.outer(wx[0], wy[0]).ravel()
    samples = phi.data.ravel()[cells]
    d_x = np.array(
        [
            float(np.outer(dwx[0], wy[0]).ravel() @ samples) / desc.dx,
            float(np.outer(wx[0], dwy[0]).ravel() @ samples) / desc.dx,
        ]
    )
    return DistanceTerms(d=float(w @ samples), cells=cells, d_phi=w, d_x=d_x)


def anchor_of(phi: CellField, x: FloatArray) -> tuple[int, int]:
    """位置 x を含む双対セルの左下セル."""
    coords = phi.desc.to_lattice(np.atleast_2d(x), FieldKind.CELL)
    i0, j0, _, _ = bilinear_stencil(phi.data.shape, coords)
    return int(i0[0]), int(j0[0])


def distance_terms(
    phi: CellField, x: FloatArray, pair: PrimitivePair, scheme: InterpScheme
) -> DistanceTerms:
    """ペアの符号付き距離とその微分を評価する."""
    if scheme is InterpScheme.LINEAR:
        return _linear_terms(phi, x, pair.anchor)
    return _quadratic_terms(phi, x)


def signed_distance(
    phi: CellField, x: FloatArray, pair: PrimitivePair, scheme: InterpScheme
) -> float:
    """頂点位置 x でのレベルセットの補間値 (符号付き距離)."""
    return distance_terms(phi, x, pair, scheme).d


def distance_gradient(
    phi: CellField, x: FloatArray, pair: PrimitivePair, scheme: InterpScheme
) -> tuple[FloatArray, FloatArray]:
    """(∂d/∂φ_stencil, ∂d/∂x) を返す."""
    terms = distance_terms(phi, x, pair, scheme)
    return terms.d_phi, terms.d_x


def vertex_distances(phi: CellField, x: FloatArray, scheme: InterpScheme) -> FloatArray:
    """全頂点について、現在位置の双対セルで補間した符号付き距離."""
    pts = np.asarray(x, dtype=np.float64).reshape(-1, 2)
    out = np.empty(pts.shape[0])
    for v, xv in enumerate(pts):
        pair = PrimitivePair(vertex=v, anchor=anchor_of(phi, xv), d=0.0)
        out[v] = signed_distance(phi, xv, pair, scheme)
    return out


def _check_positive(d: FloatArray) -> None:
    if np.any(d <= 0.0):
        message = f"Barrier evaluated at non-positive distance {float(np.min(d)):.3e}."
        raise NonPositiveDistanceError(message)


def barrier(d: FloatArray | float, dhat: float) -> FloatArray | float:
    """バリア関数 b = -(d/d̂ - 1)² ln(d/d̂) (d < d̂), それ以外は0."""
    dd = np.asarray(d, dtype=np.float64)
    _check_positive(dd)
    s = np.minimum(dd / dhat, 1.0)
    b = -((s - 1.0) ** 2) * np.log(s)
    return float(b) if b.ndim == 0 else b


def barrier_d1(d: FloatArray | float, dhat: float) -> FloatArray | float:
    """バリア関数の1階微分."""
    dd = np.asarray(d, dtype=np.float64)
    _check_positive(dd)
    s = np.minimum(dd / dhat, 1.0)
    b1 = -(2.0 * (s - 1.0) * np.log(s) / dhat + (s - 1.0) ** 2 / dd)
    return float(b1) if b1.ndim == 0 else b1


def barrier_d2(d: FloatArray | float, dhat: float) -> FloatArray | float:
    """バリア関数の2階微分."""
    dd = np.asarray(d, dtype=np.float64)
    _check_positive(dd)
    s = np.minimum(dd / dhat, 1.0)
    b2 = -(
        2.0 * np.log(s) / dhat**2
        + 4.0 * (s - 1.0) / (dhat * dd)
        - (s - 1.0) ** 2 / dd**2
    )
    return float(b2) if b2.ndim == 0 else b2


@dataclass(frozen=True)
class BarrierTerms:
    """バリアエネルギーと未知数に関する勾配、ガウス・ニュートン近似のヘッセ行列."""

    energy: float
    gradient: FloatArray
    hessian: sp.csr_matrix
    min_distance: float


def barrier_energy_grad_hess(  # noqa: PLR0913
    pairs: list[PrimitivePair],
    phi: CellField,
    x: FloatArray,
    params: ContactParams,
    phi_index: IntArray,
    x_index: IntArray,
    n_unknowns: int,
) -> BarrierTerms:
    """全ペアのバリアエネルギー ϰ Σ b(d) と微分を組み立てる.

    Parameters
    ----------
    pairs : list[PrimitivePair]
        アクティブなペア.

    phi : CellField
        現在のレベルセット.

    x : FloatArray
        現在の頂点位置 (n, 2).

    params : ContactParams
        接触パラメータ.

    phi_index : IntArray
        平坦化セルインデックスから未知数番号への写像. 固定セルは -1.

    x_index : IntArray
        固体自由度 (2v, 2v + 1) から未知数番号への写像. 固定頂点は -1.

    n_unknowns : int
        未知数の総数.

    Returns
    -------
    BarrierTerms
        エネルギー、勾配、ヘッセ行列、ペアの最小距離.

    Notes
    -----
    ヘッセ行列は ϰ max(b'', 0) q qᵀ (q = ∂d/∂(φ, x)) とし、
    d の2階微分の項は省く。

    """
    grad = np.zeros(n_unknowns)
    sym = SparseSym(dim=n_unknowns)
    energy = 0.0
    min_d = np.inf
    pts = np.asarray(x).reshape(-1, 2)
    for pair in pairs:
        terms = distance_terms(phi, pts[pair.vertex], pair, params.scheme)
        min_d = min(min_d, terms.d)
        if terms.d >= params.dhat:
            _check_positive(np.asarray(terms.d))
            continue
        b = barrier(terms.d, params.dhat)
        b1 = barrier_d1(terms.d, params.dhat)
        b2 = max(float(barrier_d2(terms.d, params.dhat)), 0.0)
        energy += params.kappa * float(b)
        idx = np.concatenate(
            [
                phi_index[terms.cells],
                x_index[[2 * pair.vertex, 2 * pair.vertex + 1]],
            ]
        )
        q = np.concatenate([terms.d_phi, terms.d_x])
        keep = idx >= 0
        np.add.at(grad, idx[keep], params.kappa * float(b1) * q[keep])
        sym.add_block(idx, params.kappa * b2 * np.outer(q, q))
    return BarrierTerms(
        energy=energy, gradient=grad, hessian=sym.to_csr(), min_distance=float(min_d)
    )


def pair_distances(
    pairs: list[PrimitivePair], phi: CellField, x: FloatArray, scheme: InterpScheme
) -> FloatArray:
    """各ペアの現在の符号付き距離."""
    pts = np.asarray(x).reshape(-1, 2)
    return np.array(
        [signed_distance(phi, pts[p.vertex], p, scheme) for p in pairs],
        dtype=np.float64,
    )


def collect_pairs(
    phi_ref: CellField,
    x_ref: FloatArray,
    params: ContactParams,
    phi_init: CellField | None = None,
    x_init: FloatArray | None = None,
) -> list[PrimitivePair]:
    """参照状態で d < d̂ となる頂点をペアとして収集する.

    初期状態 (phi_init, x_init) が与えられた場合は、
    そこで d < d̂ となる頂点も加える。双対セルは参照状態で決める。
    """
    ref = np.asarray(x_ref, dtype=np.float64).reshape(-1, 2)
    d_ref = vertex_distances(phi_ref, ref, params.scheme)
    active = d_ref < params.dhat
    if phi_init is not None and x_init is not None:
        d_init = vertex_distances(phi_init, x_init, params.scheme)
        active |= d_init < params.dhat
    pairs = [
        PrimitivePair(
            vertex=int(v), anchor=anchor_of(phi_ref, ref[v]), d=float(d_ref[v])
        )
        for v in np.flatnonzero(active)
    ]
    _logger.debug("Collected %d primitive pairs.", len(pairs))
    return pairs


def closest_segment_params(
    p0: FloatArray, p1: FloatArray, q0: FloatArray, q1: FloatArray
) -> tuple[float | None, float | None]:
    """2線分 P(γ) = p0 + γ(p1 - p0), Q(β) = q0 + β(q1 - q0) の最接近パラメータ.

    縮退した側は点として扱い、そのパラメータは None を返す。
    """
    d1 = p1 - p0
    d2 = q1 - q0
    r = p0 - q0
    a = float(d1 @ d1)
    e = float(d2 @ d2)
    tiny = DEGENERATE_SEGMENT_LENGTH**2
    if a <= tiny and e <= tiny:
        return None, None
    if a <= tiny:
        return None, float(np.clip((d2 @ r) / e, 0.0, 1.0))
    c = float(d1 @ r)
    if e <= tiny:
        return float(np.clip(-c / a, 0.0, 1.0)), None
    b = float(d1 @ d2)
    f = float(d2 @ r)
    denom = a * e - b * b
    s = float(np.clip((b * f - c * e) / denom, 0.0, 1.0)) if denom > tiny else 0.0
    t = (b * s + f) / e
    if t < 0.0:
        t = 0.0
        s = float(np.clip(-c / a, 0.0, 1.0))
    elif t > 1.0:
        t = 1.0
        s = float(np.clip((b - c) / a, 0.0, 1.0))
    return s, t


def _surface_point(terms: DistanceTerms, x: FloatArray) -> FloatArray:
    """x から距離の勾配方向に d だけ戻った界面上の点."""
    g = terms.d_x
    norm = float(np.linalg.norm(g))
    if norm < DISTANCE_GRADIENT_FLOOR:
        return np.asarray(x, dtype=np.float64).copy()
    return x - terms.d * g / norm


def ccd_filter(  # noqa: PLR0913
    pairs: list[PrimitivePair],
    phi: CellField,
    x: FloatArray,
    dir_phi: FloatArray,
    dir_x: FloatArray,
    params: ContactParams,
) -> float:
    """ニュートン方向に対する歩幅の上限 t_b ∈ (0, 1] を求める.

    Parameters
    ----------
    pairs : list[PrimitivePair]
        アクティブなペア.

    phi : CellField
        現在のレベルセット.

    x : FloatArray
        現在の頂点位置 (n, 2).

    dir_phi : FloatArray
        全セルに展開した φ の方向 (nx, ny).

    dir_x : FloatArray
        全頂点に展開した位置の方向 (n, 2).

    params : ContactParams
        接触パラメータ.

    Returns
    -------
    float
        歩幅の上限. 下限 1e-4.

    Notes
    -----
    ステップ後の距離が負になるペアについてのみ、頂点の軌跡 S_p と
    界面上の最近点の軌跡 S_φ の最接近パラメータ (γ, β) から上限を決める。

    """
    pts = np.asarray(x, dtype=np.float64).reshape(-1, 2)
    step_x = np.asarray(dir_x, dtype=np.float64).reshape(-1, 2)
    phi_post = CellField(desc=phi.desc, data=phi.data + dir_phi)
    t_b = 1.0
    for pair in pairs:
        x0 = pts[pair.vertex]
        x1 = x0 + step_x[pair.vertex]
        post = distance_terms(phi_post, x1, pair, params.scheme)
        if post.d >= 0.0:
            continue
        cur = distance_terms(phi, x0, pair, params.scheme)
        gamma, beta = closest_segment_params(
            x0, x1, _surface_point(cur, x0), _surface_point(post, x1)
        )
        candidates = [v for v in (gamma, beta) if v is not None]
        if candidates:
            t_pair = min(candidates)
        else:
            t_pair = cur.d / (cur.d - post.d) if cur.d > 0.0 else 0.0
        t_b = min(t_b, t_pair)
    if t_b < CCD_MIN_STEP:
        _logger.debug("CCD bound %.3e floored to %.1e.", t_b, CCD_MIN_STEP)
    return max(t_b, CCD_MIN_STEP)
