"""一様2次元MACグリッドと補間カーネル、離散微分演算子を提供するモジュール.

セル中心の値は ``(nx, ny)`` 配列、x方向フェイスの値は ``(nx + 1, ny)`` 配列、
y方向フェイスの値は ``(nx, ny + 1)`` 配列で保持する。
セル ``(i, j)`` の平坦化インデックスは ``i * ny + j`` とする。
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field

FloatArray = NDArray[np.float64]
IntArray = NDArray[np.int64]


class FieldKind(Enum):
    """場のサンプル位置の種類."""

    CELL = "cell"
    FACE_X = "facex"
    FACE_Y = "facey"


# 格子点 (i, j) の物理座標は origin + (i + offset_x, j + offset_y) * dx となる
_LATTICE_OFFSET = {
    FieldKind.CELL: (0.5, 0.5),
    FieldKind.FACE_X: (0.0, 0.5),
    FieldKind.FACE_Y: (0.5, 0.0),
}


class GridDesc(BaseModel):
    """一様グリッドの形状."""

    nx: int = Field(ge=4, description="x方向のセル数.")
    ny: int = Field(ge=4, description="y方向のセル数.")
    dx: float = Field(gt=0.0, description="セルサイズ [m].")
    origin: tuple[float, float] = Field(
        default=(0.0, 0.0), description="左下隅の座標 [m]."
    )

    model_config = ConfigDict(frozen=True)

    @property
    def cell_volume(self: "GridDesc") -> float:
        """セル1つの面積 V_c."""
        return self.dx * self.dx

    @property
    def domain_length(self: "GridDesc") -> float:
        """領域の辺の長さ L (長い方)."""
        return max(self.nx, self.ny) * self.dx

    @property
    def upper(self: "GridDesc") -> tuple[float, float]:
        """右上隅の座標."""
        return (
            self.origin[0] + self.nx * self.dx,
            self.origin[1] + self.ny * self.dx,
        )

    @property
    def num_cells(self: "GridDesc") -> int:
        """セル総数."""
        return self.nx * self.ny

    def shape(self: "GridDesc", kind: FieldKind) -> tuple[int, int]:
        """指定した種類の場の配列形状を返す."""
        if kind is FieldKind.FACE_X:
            return (self.nx + 1, self.ny)
        if kind is FieldKind.FACE_Y:
            return (self.nx, self.ny + 1)
        return (self.nx, self.ny)

    def positions(self: "GridDesc", kind: FieldKind) -> tuple[FloatArray, FloatArray]:
        """サンプル位置の座標配列 (X, Y) を ``indexing="ij"`` で返す."""
        sx, sy = self.shape(kind)
        ox, oy = _LATTICE_OFFSET[kind]
        xs = self.origin[0] + (np.arange(sx) + ox) * self.dx
        ys = self.origin[1] + (np.arange(sy) + oy) * self.dx
        return np.meshgrid(xs, ys, indexing="ij")

    def to_lattice(self: "GridDesc", x: FloatArray, kind: FieldKind) -> FloatArray:
        """物理座標を格子インデックス空間の連続座標に変換する."""
        ox, oy = _LATTICE_OFFSET[kind]
        pts = np.asarray(x, dtype=np.float64)
        gx = (pts[..., 0] - self.origin[0]) / self.dx - ox
        gy = (pts[..., 1] - self.origin[1]) / self.dx - oy
        return np.stack([gx, gy], axis=-1)

    def cell_center(self: "GridDesc", i: int, j: int) -> FloatArray:
        """セル (i, j) の中心座標."""
        return np.array(
            [
                self.origin[0] + (i + 0.5) * self.dx,
                self.origin[1] + (j + 0.5) * self.dx,
            ]
        )

    def clamp_to_domain(self: "GridDesc", x: FloatArray) -> FloatArray:
        """座標を計算領域内に切り詰める."""
        lo = np.asarray(self.origin)
        hi = np.asarray(self.upper)
        return np.clip(x, lo, hi)


@dataclass
class CellField:
    """セル中心に値を持つスカラー場."""

    desc: GridDesc
    data: FloatArray

    def __post_init__(self: "CellField") -> None:
        """配列形状と値の有限性を検証する."""
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.shape != self.desc.shape(FieldKind.CELL):
            message = f"Cell field shape mismatch: {self.data.shape}"
            raise ValueError(message)
        if not np.all(np.isfinite(self.data)):
            message = "Cell field contains non-finite samples."
            raise ValueError(message)

    @staticmethod
    def zeros(desc: GridDesc) -> "CellField":
        """0で初期化した場を作成する."""
        return CellField(desc=desc, data=np.zeros(desc.shape(FieldKind.CELL)))

    def copy(self: "CellField") -> "CellField":
        """深いコピーを返す."""
        return CellField(desc=self.desc, data=self.data.copy())


@dataclass
class FaceField:
    """フェイス中心に法線成分を持つベクトル場."""

    desc: GridDesc
    u: FloatArray
    v: FloatArray

    def __post_init__(self: "FaceField") -> None:
        """配列形状と値の有限性を検証する."""
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.u.shape != self.desc.shape(FieldKind.FACE_X):
            message = f"x-face field shape mismatch: {self.u.shape}"
            raise ValueError(message)
        if self.v.shape != self.desc.shape(FieldKind.FACE_Y):
            message = f"y-face field shape mismatch: {self.v.shape}"
            raise ValueError(message)
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.v))):
            message = "Face field contains non-finite samples."
            raise ValueError(message)

    @staticmethod
    def zeros(desc: GridDesc) -> "FaceField":
        """0で初期化した場を作成する."""
        return FaceField(
            desc=desc,
            u=np.zeros(desc.shape(FieldKind.FACE_X)),
            v=np.zeros(desc.shape(FieldKind.FACE_Y)),
        )

    @staticmethod
    def uniform(desc: GridDesc, velocity: tuple[float, float]) -> "FaceField":
        """一様速度の場を作成する."""
        return FaceField(
            desc=desc,
            u=np.full(desc.shape(FieldKind.FACE_X), velocity[0]),
            v=np.full(desc.shape(FieldKind.FACE_Y), velocity[1]),
        )

    def copy(self: "FaceField") -> "FaceField":
        """深いコピーを返す."""
        return FaceField(desc=self.desc, u=self.u.copy(), v=self.v.copy())

    def max_abs(self: "FaceField") -> float:
        """全フェイスでの速度成分の絶対値の最大."""
        return float(max(np.max(np.abs(self.u)), np.max(np.abs(self.v))))


def _as_points(x: FloatArray) -> tuple[FloatArray, bool]:
    """入力座標を (N, 2) 配列に揃え、単一点かどうかを返す."""
    pts = np.asarray(x, dtype=np.float64)
    single = pts.ndim == 1
    return np.atleast_2d(pts), single


def bilinear_stencil(
    shape: tuple[int, int], coords: FloatArray
) -> tuple[IntArray, IntArray, FloatArray, FloatArray]:
    """格子座標に対する双線形補間のステンシルを求める.

    Parameters
    ----------
    shape : tuple[int, int]
        格子の点数.

    coords : FloatArray
        格子インデックス空間の連続座標. 形状は (N, 2).

    Returns
    -------
    tuple[IntArray, IntArray, FloatArray, FloatArray]
        左下の格子点 (i0, j0) と相対位置 (fr_x, fr_y).

    Notes
    -----
    範囲外の問い合わせは境界の双対セルにクランプする。
    したがって重みは常に非負で、和は1になる。

    """
    g = np.empty_like(coords)
    g[:, 0] = np.clip(coords[:, 0], 0.0, shape[0] - 1)
    g[:, 1] = np.clip(coords[:, 1], 0.0, shape[1] - 1)
    i0 = np.clip(np.floor(g[:, 0]).astype(np.int64), 0, shape[0] - 2)
    j0 = np.clip(np.floor(g[:, 1]).astype(np.int64), 0, shape[1] - 2)
    return i0, j0, g[:, 0] - i0, g[:, 1] - j0


def bilinear_weights(fx: FloatArray, fy: FloatArray) -> FloatArray:
    """C1, C2, C3, C4 の順の双線形重みを (N, 4) で返す."""
    return np.stack(
        [(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=-1
    )


def lattice_bilinear(data: FloatArray, coords: FloatArray) -> FloatArray:
    """格子データを連続格子座標で双線形補間する."""
    i0, j0, fx, fy = bilinear_stencil(data.shape, coords)
    w = bilinear_weights(fx, fy)
    return (
        w[:, 0] * data[i0, j0]
        + w[:, 1] * data[i0 + 1, j0]
        + w[:, 2] * data[i0, j0 + 1]
        + w[:, 3] * data[i0 + 1, j0 + 1]
    )


def bilinear_cell_interp(field: CellField, x: FloatArray) -> FloatArray | float:
    """セル中心の場を任意位置で双線形補間する."""
    pts, single = _as_points(x)
    coords = field.desc.to_lattice(pts, FieldKind.CELL)
    values = lattice_bilinear(field.data, coords)
    return float(values[0]) if single else values


def quadratic_stencil(
    shape: tuple[int, int], coords: FloatArray
) -> tuple[IntArray, IntArray, FloatArray, FloatArray, FloatArray, FloatArray]:
    """2次Bスプラインの3x3ステンシルを求める.

    Returns
    -------
    tuple
        x方向インデックス (N, 3)、y方向インデックス (N, 3)、
        x方向重み (N, 3)、y方向重み (N, 3)、
        格子座標に関するx方向重み微分 (N, 3)、y方向重み微分 (N, 3).

    Notes
    -----
    格子座標は [0, n - 1] にクランプし、境界をはみ出すインデックスは
    境界のサンプルを複製する。重みは非負で和は1になる。

    """
    ix, wx, dwx = _quadratic_axis(coords[:, 0], shape[0])
    iy, wy, dwy = _quadratic_axis(coords[:, 1], shape[1])
    return ix, iy, wx, wy, dwx, dwy


def _quadratic_axis(
    g: FloatArray, n: int
) -> tuple[IntArray, FloatArray, FloatArray]:
    """1軸分の2次Bスプラインのインデックスと重みを求める."""
    inside = (g >= 0.0) & (g <= n - 1)
    gc = np.clip(g, 0.0, n - 1)
    base = np.floor(gc + 0.5).astype(np.int64)
    t = gc - base
    idx = np.clip(base[:, None] + np.array([-1, 0, 1]), 0, n - 1)
    w = np.stack([0.5 * (0.5 - t) ** 2, 0.75 - t * t, 0.5 * (0.5 + t) ** 2], axis=-1)
    dw = np.stack([-(0.5 - t), -2.0 * t, 0.5 + t], axis=-1)
    dw *= inside[:, None]
    return idx, w, dw


def quadratic_cell_interp(field: CellField, x: FloatArray) -> FloatArray | float:
    """セル中心の場を2次Bスプラインで補間する."""
    pts, single = _as_points(x)
    coords = field.desc.to_lattice(pts, FieldKind.CELL)
    ix, iy, wx, wy, _, _ = quadratic_stencil(field.data.shape, coords)
    samples = field.data[ix[:, :, None], iy[:, None, :]]
    values = np.einsum("na,nb,nab->n", wx, wy, samples)
    return float(values[0]) if single else values


def quadratic_cell_gradient(field: CellField, x: FloatArray) -> FloatArray:
    """2次Bスプライン補間値の空間勾配を返す."""
    pts, single = _as_points(x)
    coords = field.desc.to_lattice(pts, FieldKind.CELL)
    ix, iy, wx, wy, dwx, dwy = quadratic_stencil(field.data.shape, coords)
    samples = field.data[ix[:, :, None], iy[:, None, :]]
    gx = np.einsum("na,nb,nab->n", dwx, wy, samples) / field.desc.dx
    gy = np.einsum("na,nb,nab->n", wx, dwy, samples) / field.desc.dx
    grad = np.stack([gx, gy], axis=-1)
    return grad[0] if single else grad


def face_interp(vel: FaceField, x: FloatArray) -> FloatArray:
    """フェイス速度を各成分ごとに双線形補間する."""
    pts, single = _as_points(x)
    desc = vel.desc
    u = lattice_bilinear(vel.u, desc.to_lattice(pts, FieldKind.FACE_X))
    v = lattice_bilinear(vel.v, desc.to_lattice(pts, FieldKind.FACE_Y))
    out = np.stack([u, v], axis=-1)
    return out[0] if single else out


def divergence(vel: FaceField) -> CellField:
    """各セルの発散 (u_R - u_L)/dx + (v_T - v_B)/dx を返す."""
    dx = vel.desc.dx
    div = (vel.u[1:, :] - vel.u[:-1, :]) / dx + (vel.v[:, 1:] - vel.v[:, :-1]) / dx
    return CellField(desc=vel.desc, data=div)


def cell_gradient_to_faces(p: CellField) -> FaceField:
    """セル中心の場の勾配を内部フェイスに求める. 境界フェイスは0とする."""
    out = FaceField.zeros(p.desc)
    dx = p.desc.dx
    out.u[1:-1, :] = (p.data[1:, :] - p.data[:-1, :]) / dx
    out.v[:, 1:-1] = (p.data[:, 1:] - p.data[:, :-1]) / dx
    return out


def face_average_of_cells(data: FloatArray) -> tuple[FloatArray, FloatArray]:
    """セル中心の値を隣接セル平均でフェイスへ移す. 境界フェイスは片側の値を使う."""
    nx, ny = data.shape
    fu = np.empty((nx + 1, ny))
    fu[1:-1, :] = 0.5 * (data[1:, :] + data[:-1, :])
    fu[0, :] = data[0, :]
    fu[-1, :] = data[-1, :]
    fv = np.empty((nx, ny + 1))
    fv[:, 1:-1] = 0.5 * (data[:, 1:] + data[:, :-1])
    fv[:, 0] = data[:, 0]
    fv[:, -1] = data[:, -1]
    return fu, fv
