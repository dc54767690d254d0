"""最適化後の流体速度を固体速度に合わせて補正するモジュール.

固体の近くで流体セルと非流体セルに挟まれたフェイスを検出し、
そのフェイスの法線速度を固体頂点速度の重み付き和 W v として
ノイマン条件を課した上で圧力投影を行う。
"""

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from numpy.typing import NDArray

from src.internal.contact import ContactParams, anchor_of, vertex_distances
from src.internal.fluid_stage import (
    FaceConstraint,
    FluidParams,
    SolverTols,
    project,
)
from src.internal.grid import CellField, FaceField, GridDesc
from src.internal.levelset import LevelSet
from src.internal.solid import SolidState

_logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]
IntArray = NDArray[np.int64]

POINT_NOMINAL_LENGTH = 1e-2


@dataclass(frozen=True)
class BCFaces:
    """フェイスの集合. axis は 0 が x 方向フェイス、1 が y 方向フェイス."""

    axis: IntArray
    i: IntArray
    j: IntArray

    @property
    def size(self: "BCFaces") -> int:
        """フェイス数."""
        return int(self.axis.size)

    @staticmethod
    def empty() -> "BCFaces":
        """空の集合を作成する."""
        z = np.zeros(0, dtype=np.int64)
        return BCFaces(axis=z, i=z, j=z)

    def centers(self: "BCFaces", desc: GridDesc) -> FloatArray:
        """フェイス中心の座標 (k, 2)."""
        ox, oy = desc.origin
        fx = np.where(self.axis == 0, self.i, self.i + 0.5)
        fy = np.where(self.axis == 0, self.j + 0.5, self.j)
        return np.stack([ox + fx * desc.dx, oy + fy * desc.dx], axis=-1)


@dataclass(frozen=True)
class SolidBCSet:
    """固体速度を課すフェイスと、頂点速度に対する正規化された重み W."""

    faces: BCFaces
    weights: sp.csr_matrix

    @property
    def size(self: "SolidBCSet") -> int:
        """フェイス数."""
        return self.faces.size

    @staticmethod
    def empty(num_vertices: int) -> "SolidBCSet":
        """フェイスを持たない集合を作成する."""
        return SolidBCSet(
            faces=BCFaces.empty(), weights=sp.csr_matrix((0, num_vertices))
        )

    def to_constraint(
        self: "SolidBCSet", desc: GridDesc, v: FloatArray
    ) -> FaceConstraint:
        """頂点速度 v (n, 2) から各フェイスの法線速度を作る."""
        bc = FaceConstraint.empty(desc)
        if self.size == 0:
            return bc
        wv = self.weights @ np.asarray(v, dtype=np.float64).reshape(-1, 2)
        for k in range(self.size):
            a = int(self.faces.axis[k])
            i, j = int(self.faces.i[k]), int(self.faces.j[k])
            if a == 0:
                bc.u_mask[i, j] = True
                bc.u_value[i, j] = wv[k, 0]
            else:
                bc.v_mask[i, j] = True
                bc.v_value[i, j] = wv[k, 1]
        return bc


def detect_bc_faces(
    phi: CellField,
    x: FloatArray,
    params: ContactParams,
    vertices: IntArray | None = None,
) -> BCFaces:
    """固体頂点の近くで流体と非流体のセルに挟まれたフェイスを検出する.

    Parameters
    ----------
    phi : CellField
        最適化後のレベルセット.

    x : FloatArray
        最適化後の頂点位置 (n, 2).

    params : ContactParams
        接触パラメータ. 距離の閾値 d̂ を使う.

    vertices : IntArray | None
        対象とする頂点. 省略時は全頂点.

    Returns
    -------
    BCFaces
        重複の無いフェイスの集合 (壁フェイスは除く).

    """
    pts = np.asarray(x, dtype=np.float64).reshape(-1, 2)
    idx = np.arange(pts.shape[0]) if vertices is None else np.asarray(vertices)
    if idx.size == 0:
        return BCFaces.empty()
    desc = phi.desc
    d = vertex_distances(phi, pts[idx], params.scheme)
    close = idx[d < params.dhat]
    fluid = phi.data < 0.0
    reach = int(np.ceil(params.dhat / desc.dx)) + 1
    tol = params.dhat * (1.0 + 1e-9)
    (ox, oy), dx = desc.origin, desc.dx
    found: set[tuple[int, int, int]] = set()
    for v in close:
        i0, j0 = anchor_of(phi, pts[v])
        node = np.array([ox + (i0 + 1) * dx, oy + (j0 + 1) * dx])
        for i in range(i0 + 1 - reach, i0 + 2 + reach):
            for j in range(j0 + 1 - reach, j0 + 2 + reach):
                # x 方向フェイス (i, j) はセル (i-1, j) と (i, j) の間
                if 1 <= i <= desc.nx - 1 and 0 <= j < desc.ny:
                    c = np.array([ox + i * dx, oy + (j + 0.5) * dx])
                    crosses = fluid[i - 1, j] != fluid[i, j]
                    if crosses and np.linalg.norm(c - node) <= tol:
                        found.add((0, i, j))
                # y 方向フェイス (i, j) はセル (i, j-1) と (i, j) の間
                if 0 <= i < desc.nx and 1 <= j <= desc.ny - 1:
                    c = np.array([ox + (i + 0.5) * dx, oy + j * dx])
                    crosses = fluid[i, j - 1] != fluid[i, j]
                    if crosses and np.linalg.norm(c - node) <= tol:
                        found.add((1, i, j))
    if not found:
        return BCFaces.empty()
    arr = np.array(sorted(found), dtype=np.int64)
    return BCFaces(axis=arr[:, 0], i=arr[:, 1], j=arr[:, 2])


def clipped_length(
    p0: FloatArray, p1: FloatArray, lower: FloatArray, upper: FloatArray
) -> float:
    """線分を軸平行な箱で切り取った長さ (Liang-Barsky)."""
    d = p1 - p0
    t0, t1 = 0.0, 1.0
    for axis in (0, 1):
        bounds = (
            (-d[axis], p0[axis] - lower[axis]),
            (d[axis], upper[axis] - p0[axis]),
        )
        for p, q in bounds:
            if p == 0.0:
                if q < 0.0:
                    return 0.0
                continue
            t = q / p
            if p < 0.0:
                t0 = max(t0, t)
            else:
                t1 = min(t1, t)
    if t1 <= t0:
        return 0.0
    return float((t1 - t0) * np.linalg.norm(d))


def build_weights(
    faces: BCFaces,
    solid: SolidState,
    x: FloatArray,
    desc: GridDesc,
    params: ContactParams,
) -> SolidBCSet:
    """各フェイスについて頂点速度の重みを作る.

    フェイス中心を中心とする半幅 d̂ の箱で各辺を切り取り、
    切り取った長さの半分ずつを両端の頂点に与える。
    辺を持たない頂点は箱の内部にあれば長さ dx 1e-2 を与える。
    行は和が1になるよう正規化し、重みが0の行は除く。
    """
    pts = np.asarray(x, dtype=np.float64).reshape(-1, 2)
    n = pts.shape[0]
    if faces.size == 0 or n == 0:
        return SolidBCSet.empty(n)
    has_edge = np.zeros(n, dtype=bool)
    has_edge[solid.edges.ravel()] = True
    isolated = np.flatnonzero(~has_edge)
    centers = faces.centers(desc)
    rows: list[FloatArray] = []
    keep: list[int] = []
    for k, c in enumerate(centers):
        lower, upper = c - params.dhat, c + params.dhat
        w = np.zeros(n)
        for a, b in solid.edges:
            length = clipped_length(pts[a], pts[b], lower, upper)
            if length > 0.0:
                w[a] += 0.5 * length
                w[b] += 0.5 * length
        inside = np.all((pts[isolated] >= lower) & (pts[isolated] <= upper), axis=1)
        w[isolated[inside]] += POINT_NOMINAL_LENGTH * desc.dx
        total = float(w.sum())
        if total > 0.0:
            rows.append(w / total)
            keep.append(k)
    dropped = faces.size - len(keep)
    if dropped:
        _logger.debug("Dropped %d flagged faces without solid overlap.", dropped)
    if not keep:
        return SolidBCSet.empty(n)
    sel = np.asarray(keep, dtype=np.int64)
    kept = BCFaces(axis=faces.axis[sel], i=faces.i[sel], j=faces.j[sel])
    return SolidBCSet(faces=kept, weights=sp.csr_matrix(np.vstack(rows)))


def correct_velocities(  # noqa: PLR0913
    u_star: FaceField,
    ls_new: LevelSet,
    bc: SolidBCSet,
    v_new: FloatArray,
    dt: float,
    params: FluidParams,
    tols: SolverTols | None = None,
) -> FaceField:
    """フェイスの法線速度を W v に固定して圧力投影を行う."""
    constraint = bc.to_constraint(u_star.desc, v_new)
    return project(u_star, ls_new, dt, params, tols, solid_bc=constraint)
