"""最適化以外の流体ステージを提供するモジュール.

外力 (重力と半陰的表面張力)、圧力投影、セミラグランジュ移流、
速度の外挿、CFL 条件による時間刻みを扱う。
"""

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.sparse import csgraph

from src.internal.errors import NotConvergedError, SolverDivergedError
from src.internal.grid import (
    CellField,
    FaceField,
    FieldKind,
    GridDesc,
    divergence,
    face_average_of_cells,
    face_interp,
    lattice_bilinear,
)
from src.internal.levelset import LevelSet, curvature_field, normal_field
from src.internal.sparse_la import Preconditioner, SparseSym, cg_solve

_logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]
BoolArray = NDArray[np.bool_]

SPEED_FLOOR = 1e-6
DEFAULT_EXTRAPOLATION_LAYERS = 5


class FluidParams(BaseModel):
    """流体の物性値."""

    rho_l: float = Field(default=1000.0, gt=0.0, description="液体の密度 [kg/m^2].")
    rho_a: float = Field(default=1.0, ge=0.0, description="空気の密度 [kg/m^2].")
    gamma: float = Field(default=0.0, ge=0.0, description="表面張力係数 [N/m].")
    gravity: tuple[float, float] = Field(
        default=(0.0, -9.8), description="重力加速度 [m/s^2]."
    )

    model_config = ConfigDict(frozen=True)

    @model_validator(mode="after")
    def _check_densities(self: "FluidParams") -> "FluidParams":
        if self.rho_a >= self.rho_l:
            message = "Air density must be smaller than the liquid density."
            raise ValueError(message)
        return self

    @staticmethod
    def create_default(rho_l: float = 1000.0, gamma: float = 0.0) -> "FluidParams":
        """空気の密度を液体の 1e-3 倍とした設定を作成する."""
        return FluidParams(rho_l=rho_l, rho_a=1e-3 * rho_l, gamma=gamma)


class SolverTols(BaseModel):
    """反復ソルバの許容値."""

    poisson_rel_tol: float = Field(default=1e-6, gt=0.0, description="相対残差.")
    poisson_max_iters: int = Field(default=5000, gt=0, description="最大反復回数.")
    preconditioner: Preconditioner = Field(
        default=Preconditioner.JACOBI, description="前処理の種類."
    )

    model_config = ConfigDict(frozen=True)


@dataclass
class FaceConstraint:
    """法線速度を指定するフェイス (ノイマン境界条件)."""

    u_mask: BoolArray
    u_value: FloatArray
    v_mask: BoolArray
    v_value: FloatArray

    @staticmethod
    def empty(desc: GridDesc) -> "FaceConstraint":
        """制約の無い状態を作成する."""
        su = desc.shape(FieldKind.FACE_X)
        sv = desc.shape(FieldKind.FACE_Y)
        return FaceConstraint(
            u_mask=np.zeros(su, dtype=bool),
            u_value=np.zeros(su),
            v_mask=np.zeros(sv, dtype=bool),
            v_value=np.zeros(sv),
        )

    @property
    def count(self: "FaceConstraint") -> int:
        """制約フェイスの数."""
        return int(np.count_nonzero(self.u_mask) + np.count_nonzero(self.v_mask))


def surface_delta(phi: FloatArray, eps: float) -> FloatArray:
    """ナローバンド内のデルタ関数 δ = (1 + cos(πφ/ε)) / 2ε. バンド外は0."""
    inside = np.abs(phi) < eps
    return np.where(inside, (1.0 + np.cos(np.pi * phi / eps)) / (2.0 * eps), 0.0)


def _face_neighbors(
    shape: tuple[int, int],
) -> tuple[NDArray[np.int64], NDArray[np.int64]]:
    """格子上の4近傍の組 (平坦化インデックス) を返す."""
    ids = np.arange(shape[0] * shape[1]).reshape(shape)
    a = np.concatenate([ids[:-1, :].ravel(), ids[:, :-1].ravel()])
    b = np.concatenate([ids[1:, :].ravel(), ids[:, 1:].ravel()])
    return a, b


def _helmholtz_solve(
    rhs: FloatArray,
    delta: FloatArray,
    band: BoolArray,
    coef: float,
    tols: SolverTols,
) -> FloatArray:
    """1成分について (I + coef δ L) u = rhs を解く. L は4近傍のグラフラプラシアン.

    u = rhs + δ^½ w と置くと w は対称正定値系
    (I + coef δ^½ L δ^½) w = -coef δ^½ L rhs を満たす。
    δ = 0 のフェイスでは u = rhs となるので、未知数は band 内のフェイスに限る。
    """
    out = rhs.copy()
    if not np.any(band):
        return out
    size = rhs.size
    inside = band.ravel()
    n = int(np.count_nonzero(inside))
    index = np.full(size, -1, dtype=np.int64)
    index[inside] = np.arange(n)
    a, b = _face_neighbors(rhs.shape)
    flat_rhs = rhs.ravel()
    diff = flat_rhs[a] - flat_rhs[b]
    lap = np.bincount(a, weights=diff, minlength=size) - np.bincount(
        b, weights=diff, minlength=size
    )
    degree = np.bincount(a, minlength=size) + np.bincount(b, minlength=size)
    s = np.sqrt(np.where(inside, delta.ravel(), 0.0))

    ia, ib = index[a], index[b]
    link = (ia >= 0) & (ib >= 0)
    off = -coef * s[a[link]] * s[b[link]]
    sym = SparseSym(dim=n)
    sym.add_diagonal(np.arange(n), 1.0 + coef * s[inside] ** 2 * degree[inside])
    sym.add(ia[link], ib[link], off)
    sym.add(ib[link], ia[link], off)
    b_vec = -coef * s[inside] * lap[inside]
    try:
        result = cg_solve(
            sym.to_csr(),
            b_vec,
            tol=tols.poisson_rel_tol,
            max_iters=tols.poisson_max_iters,
            preconditioner=tols.preconditioner,
        )
    except NotConvergedError as e:
        message = f"Surface tension solve diverged: {e}"
        raise SolverDivergedError(message) from e
    flat = out.ravel()
    flat[inside] = flat_rhs[inside] + s[inside] * result.x
    return flat.reshape(rhs.shape)


def apply_forces(
    u: FaceField,
    ls: LevelSet,
    params: FluidParams,
    dt: float,
    tols: SolverTols | None = None,
) -> FaceField:
    """重力と半陰的な表面張力を速度に加える.

    Parameters
    ----------
    u : FaceField
        現在の速度.

    ls : LevelSet
        再距離化済みのレベルセット.

    params : FluidParams
        流体の物性値.

    dt : float
        時間刻み [s].

    tols : SolverTols | None
        共役勾配法の許容値.

    Returns
    -------
    FaceField
        外力を加えた速度.

    Notes
    -----
    |φ| < ε のフェイスで (I - dt²γδ∇²) u⁺ = uⁿ + dt g - dt γ δ κ n を解き、
    それ以外のフェイスは uⁿ + dt g とする。
    δ, κ, n はセル中心の値をフェイスへ平均して用いる。

    """
    tols = SolverTols() if tols is None else tols
    gx, gy = params.gravity
    out = FaceField(desc=u.desc, u=u.u + dt * gx, v=u.v + dt * gy)
    if params.gamma <= 0.0 or not np.any(ls.phi.data < 0.0):
        return out

    eps = ls.band_width
    dx = u.desc.dx
    phi_u, phi_v = face_average_of_cells(ls.phi.data)
    kap_u, kap_v = face_average_of_cells(curvature_field(ls.phi))
    nx_cell, ny_cell = normal_field(ls.phi)
    n_u, _ = face_average_of_cells(nx_cell)
    _, n_v = face_average_of_cells(ny_cell)

    coef = dt * dt * params.gamma / (dx * dx)
    components = []
    for base, phi_f, kap_f, n_f in (
        (out.u, phi_u, kap_u, n_u),
        (out.v, phi_v, kap_v, n_v),
    ):
        delta = surface_delta(phi_f, eps)
        rhs = base - dt * params.gamma * delta * kap_f * n_f
        band = np.abs(phi_f) < eps
        components.append(_helmholtz_solve(rhs, delta, band, coef, tols))
    return FaceField(desc=u.desc, u=components[0], v=components[1])


def _fixed_faces(
    desc: GridDesc, solid_bc: FaceConstraint | None
) -> tuple[BoolArray, FloatArray, BoolArray, FloatArray]:
    """壁と固体で法線速度が決まるフェイスのマスクと値."""
    bc = FaceConstraint.empty(desc) if solid_bc is None else solid_bc
    u_fixed = bc.u_mask.copy()
    u_val = np.where(bc.u_mask, bc.u_value, 0.0)
    v_fixed = bc.v_mask.copy()
    v_val = np.where(bc.v_mask, bc.v_value, 0.0)
    u_fixed[0, :] = u_fixed[-1, :] = True
    u_val[0, :] = u_val[-1, :] = 0.0
    v_fixed[:, 0] = v_fixed[:, -1] = True
    v_val[:, 0] = v_val[:, -1] = 0.0
    return u_fixed, u_val, v_fixed, v_val


def project(  # noqa: PLR0913
    u: FaceField,
    ls: LevelSet,
    dt: float,
    params: FluidParams,
    tols: SolverTols | None = None,
    solid_bc: FaceConstraint | None = None,
) -> FaceField:
    """圧力投影で流体セルの速度を発散ゼロにする.

    Parameters
    ----------
    u : FaceField
        投影前の速度.

    ls : LevelSet
        流体セル (φ < 0) を定めるレベルセット.

    dt : float
        時間刻み [s].

    params : FluidParams
        流体の物性値.

    tols : SolverTols | None
        共役勾配法の許容値.

    solid_bc : FaceConstraint | None
        固体が法線速度を与えるフェイス.

    Returns
    -------
    FaceField
        投影後の速度. 流体が無い場合は入力のコピー.

    Notes
    -----
    空気セルは p = 0 のディリクレ条件、壁と固体フェイスは法線速度を
    代入したノイマン条件とする。q = dt p / ρ について
    グラフラプラシアン L q = -dx² ∇·u を解き、u - ∇q を返す。
    ディリクレセルを含まない成分は右辺の平均を引いて可解にする。

    """
    tols = SolverTols() if tols is None else tols
    desc = u.desc
    fluid = ls.phi.data < 0.0
    if not np.any(fluid):
        _logger.debug("No fluid cells; projection skipped.")
        return u.copy()

    u_fixed, u_val, v_fixed, v_val = _fixed_faces(desc, solid_bc)
    work = FaceField(
        desc=desc,
        u=np.where(u_fixed, u_val, u.u),
        v=np.where(v_fixed, v_val, u.v),
    )

    n = int(np.count_nonzero(fluid))
    index = np.full(fluid.shape, -1, dtype=np.int64)
    index[fluid] = np.arange(n)
    sym = SparseSym(dim=n)
    dirichlet = np.zeros(n, dtype=bool)
    links_a: list[NDArray[np.int64]] = []
    links_b: list[NDArray[np.int64]] = []
    for lo_f, hi_f, lo_i, hi_i, open_f in (
        (fluid[:-1, :], fluid[1:, :], index[:-1, :], index[1:, :], ~u_fixed[1:-1, :]),
        (fluid[:, :-1], fluid[:, 1:], index[:, :-1], index[:, 1:], ~v_fixed[:, 1:-1]),
    ):
        both = open_f & lo_f & hi_f
        lo_only = open_f & lo_f & ~hi_f
        hi_only = open_f & ~lo_f & hi_f
        ia, ib = lo_i[both], hi_i[both]
        sym.add_diagonal(ia, np.ones(ia.size))
        sym.add_diagonal(ib, np.ones(ib.size))
        sym.add(ia, ib, -1.0)
        sym.add(ib, ia, -1.0)
        links_a.append(ia)
        links_b.append(ib)
        for cells in (lo_i[lo_only], hi_i[hi_only]):
            sym.add_diagonal(cells, np.ones(cells.size))
            dirichlet[cells] = True

    rhs = -desc.dx * desc.dx * divergence(work).data[fluid]
    ia = np.concatenate(links_a)
    ib = np.concatenate(links_b)
    graph = sp.csr_matrix((np.ones(ia.size), (ia, ib)), shape=(n, n))
    count, comp = csgraph.connected_components(graph, directed=False)
    weights = dirichlet.astype(np.float64)
    has_dirichlet = np.bincount(comp, weights=weights, minlength=count) > 0
    for c in np.flatnonzero(~has_dirichlet):
        members = comp == c
        rhs[members] -= rhs[members].mean()

    mat = sym.to_csr()
    isolated = mat.diagonal() == 0.0
    if np.any(isolated):
        # 全フェイスが固定された孤立セル
        mat = mat + sp.diags(isolated.astype(np.float64))
        rhs[isolated] = 0.0
    try:
        result = cg_solve(
            mat,
            rhs,
            tol=tols.poisson_rel_tol / np.sqrt(n),
            max_iters=tols.poisson_max_iters,
            preconditioner=tols.preconditioner,
        )
    except NotConvergedError as e:
        message = f"Pressure projection diverged: {e}"
        raise SolverDivergedError(message) from e
    _logger.debug(
        "Pressure solve: %d cells, %d iterations, residual %.3e, max |p| %.3e.",
        n,
        result.iterations,
        result.residual,
        float(np.max(np.abs(result.x))) * params.rho_l / dt,
    )

    q = np.zeros(fluid.shape)
    q[fluid] = result.x
    dx = desc.dx
    out_u = work.u.copy()
    out_v = work.v.copy()
    touch_u = ~u_fixed[1:-1, :] & (fluid[:-1, :] | fluid[1:, :])
    touch_v = ~v_fixed[:, 1:-1] & (fluid[:, :-1] | fluid[:, 1:])
    grad_u = (q[1:, :] - q[:-1, :]) / dx
    grad_v = (q[:, 1:] - q[:, :-1]) / dx
    out_u[1:-1, :] = np.where(touch_u, work.u[1:-1, :] - grad_u, work.u[1:-1, :])
    out_v[:, 1:-1] = np.where(touch_v, work.v[:, 1:-1] - grad_v, work.v[:, 1:-1])
    return FaceField(desc=desc, u=out_u, v=out_v)


def max_fluid_divergence(u: FaceField, ls: LevelSet) -> float:
    """流体セルでの発散の絶対値の最大."""
    fluid = ls.phi.data < 0.0
    if not np.any(fluid):
        return 0.0
    return float(np.max(np.abs(divergence(u).data[fluid])))


def _backtrace(carrier: FaceField, pts: FloatArray, dt: float) -> FloatArray:
    """中点法 (RK2) で1ステップ分さかのぼった位置. 領域内にクランプする."""
    desc = carrier.desc
    vel = face_interp(carrier, pts)
    mid = desc.clamp_to_domain(pts - 0.5 * dt * vel)
    return desc.clamp_to_domain(pts - dt * face_interp(carrier, mid))


def _advect_samples(
    carrier: FaceField, data: FloatArray, kind: FieldKind, dt: float
) -> FloatArray:
    desc = carrier.desc
    xs, ys = desc.positions(kind)
    pts = np.stack([xs.ravel(), ys.ravel()], axis=-1)
    back = _backtrace(carrier, pts, dt)
    values = lattice_bilinear(data, desc.to_lattice(back, kind))
    return values.reshape(data.shape)


def advect_semilagrangian(
    carrier: FaceField, field: CellField | FaceField, dt: float
) -> CellField | FaceField:
    """セミラグランジュ法で場を移流する.

    各サンプル位置から RK2 で逆向きに追跡し、元の場を双線形補間する。
    """
    if isinstance(field, CellField):
        return CellField(
            desc=field.desc,
            data=_advect_samples(carrier, field.data, FieldKind.CELL, dt),
        )
    return FaceField(
        desc=field.desc,
        u=_advect_samples(carrier, field.u, FieldKind.FACE_X, dt),
        v=_advect_samples(carrier, field.v, FieldKind.FACE_Y, dt),
    )


def extrapolate_component(
    values: FloatArray, valid: BoolArray, layers: int
) -> tuple[FloatArray, BoolArray]:
    """有効なサンプルから幅優先で層ごとに値を外挿する.

    各層で、有効な4近傍を持つ無効サンプルに近傍の平均を与える。
    最終的に無効なままのサンプルは0とする。
    """
    out = np.where(valid, values, 0.0)
    ok = valid.copy()
    for _ in range(layers):
        total = np.zeros_like(out)
        count = np.zeros_like(out)
        for axis in (0, 1):
            for shift in (1, -1):
                src = [slice(None), slice(None)]
                dst = [slice(None), slice(None)]
                if shift == 1:
                    src[axis], dst[axis] = slice(None, -1), slice(1, None)
                else:
                    src[axis], dst[axis] = slice(1, None), slice(None, -1)
                total[tuple(dst)] += np.where(ok[tuple(src)], out[tuple(src)], 0.0)
                count[tuple(dst)] += ok[tuple(src)]
        grow = ~ok & (count > 0)
        if not np.any(grow):
            break
        out[grow] = total[grow] / count[grow]
        ok = ok | grow
    out[~ok] = 0.0
    return out, ok


def extrapolate_velocity(
    u: FaceField, ls: LevelSet, layers: int = DEFAULT_EXTRAPOLATION_LAYERS
) -> FaceField:
    """流体セルに接するフェイスの速度を周囲の空気へ外挿する."""
    fluid = ls.phi.data < 0.0
    if not np.any(fluid):
        return u.copy()
    nx, ny = fluid.shape
    valid_u = np.zeros((nx + 1, ny), dtype=bool)
    valid_u[:-1, :] |= fluid
    valid_u[1:, :] |= fluid
    valid_v = np.zeros((nx, ny + 1), dtype=bool)
    valid_v[:, :-1] |= fluid
    valid_v[:, 1:] |= fluid
    new_u, _ = extrapolate_component(u.u, valid_u, layers)
    new_v, _ = extrapolate_component(u.v, valid_v, layers)
    return FaceField(desc=u.desc, u=new_u, v=new_v)


def cfl_dt(
    u: FaceField,
    cfl: float,
    dx: float,
    params: FluidParams | None = None,
    solid_speed: float = 0.0,
) -> float:
    """CFL 条件による時間刻み.

    dt = cfl dx / max(|u|∞, 1e-6) とし、γ > 0 の場合は
    表面張力の制限 sqrt(ρ_l dx³ / 2πγ) で上から抑える。
    """
    speed = max(u.max_abs(), solid_speed, SPEED_FLOOR)
    dt = cfl * dx / speed
    if params is not None and params.gamma > 0.0:
        capillary = np.sqrt(params.rho_l * dx**3 / (2.0 * np.pi * params.gamma))
        dt = min(dt, float(capillary))
    return dt
