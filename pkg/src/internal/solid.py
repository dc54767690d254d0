"""2次元の余次元固体 (点群と弾性折れ線) を扱うモジュール.

伸びのばねエネルギーと折れ角の曲げエネルギー、集中質量、
位置の予測、位置からの速度補正を提供する。
自由度は頂点 v の座標を 2v, 2v + 1 に並べた平坦なベクトルで扱う。
"""

import logging
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field

from src.internal.sparse_la import SparseSym

_logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]
IntArray = NDArray[np.int64]
BoolArray = NDArray[np.bool_]

DEGENERATE_EDGE_LENGTH = 1e-12

# 90度回転 R w = (-w_y, w_x)
_ROT = np.array([[0.0, -1.0], [1.0, 0.0]])


class ElasticParams(BaseModel):
    """弾性エネルギーのパラメータ."""

    k_stretch: float = Field(default=0.0, ge=0.0, description="伸び剛性 [N].")
    k_bend: float = Field(default=0.0, ge=0.0, description="曲げ剛性 [N m].")
    project_psd: bool = Field(
        default=True, description="ヘッセ行列ブロックを半正定値に射影するか."
    )

    model_config = ConfigDict(frozen=True)


@dataclass
class SolidState:
    """固体の頂点と接続、静止状態の量.

    Parameters
    ----------
    x : FloatArray
        頂点位置 (n, 2) [m].

    v : FloatArray
        頂点速度 (n, 2) [m/s].

    edges : IntArray
        辺の頂点ペア (m, 2).

    rest_len : FloatArray
        辺の静止長 (m,) [m].

    bend_triples : IntArray
        連続する3頂点 (t, 3).

    rest_angle : FloatArray
        3頂点の静止折れ角 (t,) [rad].

    mass : FloatArray
        頂点の集中質量 (n,) [kg].

    fixed : BoolArray
        固定頂点のフラグ (n,).

    damping : float
        単位時間あたりの速度減衰係数 [1/s].

    """

    x: FloatArray
    v: FloatArray
    edges: IntArray
    rest_len: FloatArray
    bend_triples: IntArray
    rest_angle: FloatArray
    mass: FloatArray
    fixed: BoolArray
    damping: float = 0.0

    def __post_init__(self: "SolidState") -> None:
        """配列形状と静止量を検証する."""
        self.x = np.asarray(self.x, dtype=np.float64).reshape(-1, 2)
        self.v = np.asarray(self.v, dtype=np.float64).reshape(-1, 2)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.rest_len = np.asarray(self.rest_len, dtype=np.float64)
        self.bend_triples = np.asarray(self.bend_triples, dtype=np.int64).reshape(-1, 3)
        self.rest_angle = np.asarray(self.rest_angle, dtype=np.float64)
        self.mass = np.asarray(self.mass, dtype=np.float64)
        self.fixed = np.asarray(self.fixed, dtype=bool)
        n = self.x.shape[0]
        if (
            self.v.shape != (n, 2)
            or self.mass.shape != (n,)
            or self.fixed.shape != (n,)
        ):
            message = "Solid vertex arrays have inconsistent lengths."
            raise ValueError(message)
        if self.rest_len.shape != (self.edges.shape[0],):
            message = "rest_len must have one entry per edge."
            raise ValueError(message)
        if self.rest_angle.shape != (self.bend_triples.shape[0],):
            message = "rest_angle must have one entry per bending triple."
            raise ValueError(message)
        if np.any(self.rest_len <= 0.0):
            message = "Edge rest lengths must be positive."
            raise ValueError(message)
        if np.any(self.mass <= 0.0):
            message = "Vertex masses must be positive."
            raise ValueError(message)
        if self.damping < 0.0:
            message = "Damping must be nonnegative."
            raise ValueError(message)

    @property
    def num_vertices(self: "SolidState") -> int:
        """頂点数."""
        return int(self.x.shape[0])

    @property
    def free_vertices(self: "SolidState") -> IntArray:
        """固定されていない頂点のインデックス."""
        return np.flatnonzero(~self.fixed).astype(np.int64)

    @staticmethod
    def empty() -> "SolidState":
        """頂点を持たない固体を作成する."""
        return SolidState(
            x=np.zeros((0, 2)),
            v=np.zeros((0, 2)),
            edges=np.zeros((0, 2), dtype=np.int64),
            rest_len=np.zeros(0),
            bend_triples=np.zeros((0, 3), dtype=np.int64),
            rest_angle=np.zeros(0),
            mass=np.zeros(0),
            fixed=np.zeros(0, dtype=bool),
        )

    @staticmethod
    def from_points(
        points: FloatArray,
        mass: float | FloatArray,
        fixed: BoolArray | None = None,
        velocity: tuple[float, float] = (0.0, 0.0),
        damping: float = 0.0,
    ) -> "SolidState":
        """接続を持たない点群を作成する."""
        x = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        n = x.shape[0]
        return SolidState(
            x=x,
            v=np.tile(np.asarray(velocity, dtype=np.float64), (n, 1)),
            edges=np.zeros((0, 2), dtype=np.int64),
            rest_len=np.zeros(0),
            bend_triples=np.zeros((0, 3), dtype=np.int64),
            rest_angle=np.zeros(0),
            mass=np.broadcast_to(np.asarray(mass, dtype=np.float64), (n,)).copy(),
            fixed=np.zeros(n, dtype=bool) if fixed is None else np.asarray(fixed),
            damping=damping,
        )

    @staticmethod
    def from_polyline(
        points: FloatArray,
        line_density: float,
        fixed: BoolArray | None = None,
        velocity: tuple[float, float] = (0.0, 0.0),
        damping: float = 0.0,
    ) -> "SolidState":
        """開いた折れ線を作成する.

        各辺の質量 ρℓ ℓ₀ を両端の頂点に半分ずつ割り当て、
        初期形状を静止状態とする。
        """
        x = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        n = x.shape[0]
        min_vertices = 2
        if n < min_vertices:
            message = "A polyline needs at least two vertices."
            raise ValueError(message)
        edges = np.stack([np.arange(n - 1), np.arange(1, n)], axis=-1)
        rest_len = np.linalg.norm(x[edges[:, 1]] - x[edges[:, 0]], axis=1)
        mass = np.zeros(n)
        np.add.at(mass, edges[:, 0], 0.5 * line_density * rest_len)
        np.add.at(mass, edges[:, 1], 0.5 * line_density * rest_len)
        triples = np.stack(
            [np.arange(n - 2), np.arange(1, n - 1), np.arange(2, n)], axis=-1
        )
        return SolidState(
            x=x,
            v=np.tile(np.asarray(velocity, dtype=np.float64), (n, 1)),
            edges=edges,
            rest_len=rest_len,
            bend_triples=triples,
            rest_angle=turning_angles(x, triples),
            mass=mass,
            fixed=np.zeros(n, dtype=bool) if fixed is None else np.asarray(fixed),
            damping=damping,
        )

    def with_motion(self: "SolidState", x: FloatArray, v: FloatArray) -> "SolidState":
        """位置と速度を差し替えた状態を返す."""
        return replace(self, x=np.asarray(x), v=np.asarray(v))

    @staticmethod
    def concatenate(parts: list["SolidState"], damping: float = 0.0) -> "SolidState":
        """複数の固体を1つにまとめる. 辺と3頂点の番号はずらして引き継ぐ."""
        if not parts:
            return SolidState.empty()
        offsets = np.cumsum([0] + [p.num_vertices for p in parts[:-1]])
        return SolidState(
            x=np.concatenate([p.x for p in parts]),
            v=np.concatenate([p.v for p in parts]),
            edges=np.concatenate(
                [p.edges + o for p, o in zip(parts, offsets, strict=True)]
            ),
            rest_len=np.concatenate([p.rest_len for p in parts]),
            bend_triples=np.concatenate(
                [p.bend_triples + o for p, o in zip(parts, offsets, strict=True)]
            ),
            rest_angle=np.concatenate([p.rest_angle for p in parts]),
            mass=np.concatenate([p.mass for p in parts]),
            fixed=np.concatenate([p.fixed for p in parts]),
            damping=damping,
        )


def turning_angles(x: FloatArray, triples: IntArray) -> FloatArray:
    """3頂点 (a, b, c) の符号付き折れ角 atan2(e1 x e2, e1 . e2)."""
    if triples.size == 0:
        return np.zeros(0)
    e1 = x[triples[:, 1]] - x[triples[:, 0]]
    e2 = x[triples[:, 2]] - x[triples[:, 1]]
    cross = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    dot = np.einsum("ij,ij->i", e1, e2)
    return np.arctan2(cross, dot)


def predict_positions(s: SolidState, g: FloatArray, dt: float) -> FloatArray:
    """予測位置 x⋆ = xⁿ + dt vⁿ + dt² g. 固定頂点は xⁿ のまま."""
    x_star = s.x + dt * s.v + dt * dt * np.asarray(g, dtype=np.float64)[None, :]
    x_star[s.fixed] = s.x[s.fixed]
    return x_star


def edge_lengths(s: SolidState, x: FloatArray) -> FloatArray:
    """各辺の現在長."""
    if s.edges.size == 0:
        return np.zeros(0)
    return np.linalg.norm(x[s.edges[:, 1]] - x[s.edges[:, 0]], axis=1)


def _stretch_terms(
    s: SolidState, x: FloatArray, p: ElasticParams
) -> tuple[FloatArray, FloatArray, FloatArray, FloatArray]:
    """辺ごとのエネルギー、端点 j 側の勾配、2x2 剛性、縮退フラグ."""
    d = x[s.edges[:, 1]] - x[s.edges[:, 0]]
    length = np.linalg.norm(d, axis=1)
    degenerate = length < DEGENERATE_EDGE_LENGTH
    if np.any(degenerate):
        _logger.warning(
            "Degenerate edges %s; their gradient is set to zero.",
            np.flatnonzero(degenerate).tolist(),
        )
    safe = np.where(degenerate, 1.0, length)
    u = d / safe[:, None]
    stiff = p.k_stretch / s.rest_len
    strain = length - s.rest_len
    energy = 0.5 * stiff * strain**2
    grad_j = np.where(degenerate[:, None], 0.0, (stiff * strain)[:, None] * u)
    uu = u[:, :, None] * u[:, None, :]
    perp_coef = strain / safe
    if p.project_psd:
        perp_coef = np.maximum(perp_coef, 0.0)
    k2 = stiff[:, None, None] * (
        uu + perp_coef[:, None, None] * (np.eye(2)[None] - uu)
    )
    k2[degenerate] = 0.0
    return energy, grad_j, k2, degenerate


def _angle_hessian(w: FloatArray) -> FloatArray:
    """ベクトル w の偏角 α(w) のヘッセ行列 (R - 2 (R w) wᵀ / |w|²) / |w|²."""
    w2 = np.einsum("ij,ij->i", w, w)
    rw = w @ _ROT.T
    outer = rw[:, :, None] * w[:, None, :]
    return (_ROT[None] - 2.0 * outer / w2[:, None, None]) / w2[:, None, None]


def _bend_terms(
    s: SolidState, x: FloatArray, p: ElasticParams
) -> tuple[FloatArray, FloatArray, FloatArray]:
    """3頂点ごとのエネルギー、(t, 6) 勾配、(t, 6, 6) ヘッセ行列."""
    tri = s.bend_triples
    e1 = x[tri[:, 1]] - x[tri[:, 0]]
    e2 = x[tri[:, 2]] - x[tri[:, 1]]
    l1 = np.einsum("ij,ij->i", e1, e1)
    l2 = np.einsum("ij,ij->i", e2, e2)
    ok = (l1 > DEGENERATE_EDGE_LENGTH**2) & (l2 > DEGENERATE_EDGE_LENGTH**2)
    e1s = np.where(ok[:, None], e1, 1.0)
    e2s = np.where(ok[:, None], e2, 1.0)
    theta = turning_angles(x, tri)
    diff = theta - s.rest_angle
    energy = np.where(ok, p.k_bend * diff**2, 0.0)

    g1 = (e1s @ _ROT.T) / np.einsum("ij,ij->i", e1s, e1s)[:, None]
    g2 = (e2s @ _ROT.T) / np.einsum("ij,ij->i", e2s, e2s)[:, None]
    dtheta = np.concatenate([g1, -(g1 + g2), g2], axis=1)

    s1 = np.zeros((2, 6))
    s1[:, 0:2] = -np.eye(2)
    s1[:, 2:4] = np.eye(2)
    s2 = np.zeros((2, 6))
    s2[:, 2:4] = -np.eye(2)
    s2[:, 4:6] = np.eye(2)
    h1 = _angle_hessian(e1s)
    h2 = _angle_hessian(e2s)
    d2theta = np.einsum("ai,nab,bj->nij", s2, h2, s2) - np.einsum(
        "ai,nab,bj->nij", s1, h1, s1
    )
    d2theta = 0.5 * (d2theta + np.transpose(d2theta, (0, 2, 1)))

    grad = (2.0 * p.k_bend * diff)[:, None] * dtheta
    hess = 2.0 * p.k_bend * (
        dtheta[:, :, None] * dtheta[:, None, :] + diff[:, None, None] * d2theta
    )
    if p.project_psd and hess.shape[0] > 0:
        w, vec = np.linalg.eigh(hess)
        hess = np.einsum("nij,nj,nkj->nik", vec, np.maximum(w, 0.0), vec)
    grad[~ok] = 0.0
    hess[~ok] = 0.0
    return energy, grad, hess


def elastic_energy(s: SolidState, x: FloatArray, p: ElasticParams) -> float:
    """伸びと曲げの弾性エネルギー Ψ(x)."""
    total = 0.0
    if s.edges.size and p.k_stretch > 0.0:
        energy, _, _, _ = _stretch_terms(s, x, p)
        total += float(np.sum(energy))
    if s.bend_triples.size and p.k_bend > 0.0:
        energy, _, _ = _bend_terms(s, x, p)
        total += float(np.sum(energy))
    return total


def _triple_dofs(tri: IntArray) -> IntArray:
    """(t, 3) の頂点インデックスを (t, 6) の自由度インデックスに展開する."""
    return np.stack(
        [2 * tri[:, 0], 2 * tri[:, 0] + 1, 2 * tri[:, 1], 2 * tri[:, 1] + 1,
         2 * tri[:, 2], 2 * tri[:, 2] + 1],
        axis=-1,
    )


def elastic_gradient(s: SolidState, x: FloatArray, p: ElasticParams) -> FloatArray:
    """弾性エネルギーの勾配 (長さ 2n の平坦なベクトル)."""
    grad = np.zeros((s.num_vertices, 2))
    if s.edges.size and p.k_stretch > 0.0:
        _, grad_j, _, _ = _stretch_terms(s, x, p)
        np.add.at(grad, s.edges[:, 1], grad_j)
        np.add.at(grad, s.edges[:, 0], -grad_j)
    flat = grad.ravel()
    if s.bend_triples.size and p.k_bend > 0.0:
        _, gb, _ = _bend_terms(s, x, p)
        np.add.at(flat, _triple_dofs(s.bend_triples).ravel(), gb.ravel())
    return flat


def elastic_hessian(s: SolidState, x: FloatArray, p: ElasticParams) -> sp.csr_matrix:
    """弾性エネルギーのヘッセ行列 (2n x 2n)."""
    sym = SparseSym(dim=2 * s.num_vertices)
    if s.edges.size and p.k_stretch > 0.0:
        _, _, k2, _ = _stretch_terms(s, x, p)
        blocks = np.zeros((k2.shape[0], 4, 4))
        blocks[:, :2, :2] = k2
        blocks[:, 2:, 2:] = k2
        blocks[:, :2, 2:] = -k2
        blocks[:, 2:, :2] = -k2
        i, j = s.edges[:, 0], s.edges[:, 1]
        dofs = np.stack([2 * i, 2 * i + 1, 2 * j, 2 * j + 1], axis=-1)
        sym.add_blocks(dofs, blocks)
    if s.bend_triples.size and p.k_bend > 0.0:
        _, _, hb = _bend_terms(s, x, p)
        sym.add_blocks(_triple_dofs(s.bend_triples), hb)
    return sym.to_csr()


def lumped_mass_matrix(s: SolidState) -> tuple[IntArray, FloatArray]:
    """自由頂点の自由度インデックスと対応する質量の対角成分を返す.

    固定頂点は未知数から除外する。
    """
    free = s.free_vertices
    dofs = np.stack([2 * free, 2 * free + 1], axis=-1).ravel()
    return dofs, np.repeat(s.mass[free], 2)


def correct_velocities(
    x_new: FloatArray, x_old: FloatArray, dt: float, damping: float
) -> FloatArray:
    """位置の変化から速度を求め、減衰係数 max(0, 1 - damping dt) を掛ける."""
    scale = max(0.0, 1.0 - damping * dt)
    return (np.asarray(x_new) - np.asarray(x_old)) / dt * scale


def check_edge_lengths(s: SolidState, x: FloatArray, dx: float) -> float:
    """最大辺長を返し、セルサイズを超える場合は警告を出す."""
    lengths = edge_lengths(s, x)
    longest = float(lengths.max()) if lengths.size else 0.0
    if longest >= dx:
        _logger.warning(
            "Solid edge length %.3e exceeds the cell size %.3e.", longest, dx
        )
    return longest
