"""レベルセットと固体位置を同時に求める制約付き最適化のモジュール.

未知数はナローバンド内の φ と自由頂点の座標で、
目的関数は流体と固体の慣性項、固体の弾性エネルギー、接触バリアの和、
等式制約は連結成分ごとの体積保存である。
ニュートン法の各反復で KKT 系を解き、CCD とメリット関数による
直線探索で歩幅を決める。
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field

from src.internal.contact import (
    CCD_MIN_STEP,
    BarrierTerms,
    ContactParams,
    PrimitivePair,
    barrier_energy_grad_hess,
    ccd_filter,
    pair_distances,
)
from src.internal.errors import NonPositiveDistanceError, SingularSystemError
from src.internal.fluid_stage import FluidParams
from src.internal.grid import CellField
from src.internal.levelset import (
    LevelSet,
    NarrowbandSet,
    heaviside,
    heaviside_prime,
    select_narrowband,
)
from src.internal.solid import (
    ElasticParams,
    SolidState,
    elastic_energy,
    elastic_gradient,
    elastic_hessian,
    lumped_mass_matrix,
)
from src.internal.sparse_la import ldl_solve, schur_solve

_logger = logging.getLogger(__name__)

FloatArray = NDArray[np.float64]
IntArray = NDArray[np.int64]

MAX_REGULARIZATION_RETRIES = 5
MIN_LINE_SEARCH_STEP = 1e-10
MAX_CCD_FLOOR_HITS = 3
ROW_DROP_TOL = 1e-14


class NewtonOptions(BaseModel):
    """ニュートン法の設定."""

    max_iters: int = Field(default=30, gt=0, description="最大反復回数.")
    tol_v: float = Field(default=1e-3, gt=0.0, description="収束判定の速度 [m/s].")
    volume_tol: float = Field(default=1e-6, gt=0.0, description="相対体積誤差.")
    line_search: bool = Field(default=True, description="直線探索を行うか.")
    ccd: bool = Field(default=True, description="CCD で歩幅を制限するか.")

    model_config = ConfigDict(frozen=True)


class NewtonStats(BaseModel):
    """ニュートン法の実行結果の統計."""

    iterations: int = 0
    final_step_size: float = 0.0
    final_residual: float = 0.0
    final_volume_error: float = 0.0
    used_line_search: bool = False
    used_ccd: bool = False
    converged: bool = False
    penetrated: bool = False
    ccd_floor_hits: int = 0
    alpha_history: list[float] = Field(default_factory=list)
    merit_history: list[float] = Field(default_factory=list)
    min_distance: float | None = None


@dataclass
class CoupledProblem:
    """1ステップ分の最適化問題.

    Parameters
    ----------
    phi_star : CellField
        移流後の φ⋆. ナローバンド外の φ はこの値に固定する.

    band : NarrowbandSet
        φ の未知数となるセル.

    attribution : IntArray
        体積制約で各セルが属する成分.

    targets : FloatArray
        成分ごとの目標体積 V_0.

    sharpness : float
        ヘヴィサイド関数の鋭さ k.

    fluid : FluidParams
        流体の物性値.

    solid : SolidState
        固体 (質量、接続、固定フラグ).

    x_star : FloatArray
        固体の予測位置 x⋆ (n, 2).

    elastic : ElasticParams
        弾性パラメータ.

    pairs : list[PrimitivePair]
        接触ペア. 最適化中は固定する.

    contact : ContactParams | None
        接触パラメータ. ペアが無い場合は None でよい.

    dt : float
        時間刻み [s].

    volume_constraint : bool
        体積制約を課すか.

    """

    phi_star: CellField
    band: NarrowbandSet
    attribution: IntArray
    targets: FloatArray
    sharpness: float
    fluid: FluidParams
    solid: SolidState
    x_star: FloatArray
    elastic: ElasticParams
    pairs: list[PrimitivePair]
    contact: ContactParams | None
    dt: float
    volume_constraint: bool = True
    x_dofs: IntArray = field(init=False)
    x_mass: FloatArray = field(init=False)
    x_index: IntArray = field(init=False)

    def __post_init__(self: "CoupledProblem") -> None:
        """未知数の並びを決める."""
        self.x_star = np.asarray(self.x_star, dtype=np.float64).reshape(-1, 2)
        self.x_dofs, self.x_mass = lumped_mass_matrix(self.solid)
        self.x_index = np.full(2 * self.solid.num_vertices, -1, dtype=np.int64)
        self.x_index[self.x_dofs] = self.n_phi + np.arange(self.x_dofs.size)
        if self.pairs and self.contact is None:
            message = "Contact parameters are required when pairs are given."
            raise ValueError(message)

    @property
    def n_phi(self: "CoupledProblem") -> int:
        """φ の未知数の数."""
        return self.band.size

    @property
    def n_unknowns(self: "CoupledProblem") -> int:
        """未知数の総数."""
        return self.n_phi + int(self.x_dofs.size)

    @property
    def num_constraints(self: "CoupledProblem") -> int:
        """体積制約の数."""
        return len(self.targets) if self.volume_constraint else 0

    def pack(self: "CoupledProblem", phi: CellField, x: FloatArray) -> FloatArray:
        """全体の (φ, x) から未知数ベクトルを取り出す."""
        return np.concatenate(
            [
                phi.data.ravel()[self.band.cells],
                np.asarray(x, dtype=np.float64).ravel()[self.x_dofs],
            ]
        )

    def phi_full(self: "CoupledProblem", z: FloatArray) -> CellField:
        """未知数ベクトルから全セルの φ を作る."""
        data = self.phi_star.data.ravel().copy()
        data[self.band.cells] = z[: self.n_phi]
        shape = self.phi_star.data.shape
        return CellField(desc=self.phi_star.desc, data=data.reshape(shape))

    def x_full(self: "CoupledProblem", z: FloatArray) -> FloatArray:
        """未知数ベクトルから全頂点の位置 (n, 2) を作る. 固定頂点は x⋆."""
        x = self.x_star.ravel().copy()
        x[self.x_dofs] = z[self.n_phi :]
        return x.reshape(-1, 2)

    def expand_direction(
        self: "CoupledProblem", delta: FloatArray
    ) -> tuple[FloatArray, FloatArray]:
        """方向ベクトルを全セル (nx, ny) と全頂点 (n, 2) に展開する."""
        dphi = np.zeros(self.phi_star.data.size)
        dphi[self.band.cells] = delta[: self.n_phi]
        dx = np.zeros(2 * self.solid.num_vertices)
        dx[self.x_dofs] = delta[self.n_phi :]
        return dphi.reshape(self.phi_star.data.shape), dx.reshape(-1, 2)

    @property
    def phi_index(self: "CoupledProblem") -> IntArray:
        """平坦化セルインデックスから未知数番号への写像."""
        return self.band.index_of


@dataclass(frozen=True)
class KKTSystem:
    """ニュートン1反復分の KKT 系 [H Jᵀ; J 0][Δ; λ] = [-g; -h]."""

    hess: sp.csr_matrix
    jac: sp.csr_matrix
    grad: FloatArray
    cons: FloatArray
    diagonal: bool = False


def unknown_masses(problem: CoupledProblem, z: FloatArray) -> FloatArray:
    """φ 未知数ごとの質量 ((ρ_l - ρ_a) H(φ) + ρ_a) V_c."""
    fp = problem.fluid
    h = np.asarray(heaviside(z[: problem.n_phi], problem.sharpness))
    return ((fp.rho_l - fp.rho_a) * h + fp.rho_a) * problem.phi_star.desc.cell_volume


def _barrier(problem: CoupledProblem, z: FloatArray) -> BarrierTerms | None:
    if not problem.pairs or problem.contact is None:
        return None
    return barrier_energy_grad_hess(
        problem.pairs,
        problem.phi_full(z),
        problem.x_full(z),
        problem.contact,
        problem.phi_index,
        problem.x_index,
        problem.n_unknowns,
    )


def _solid_parts(
    problem: CoupledProblem, z: FloatArray
) -> tuple[FloatArray, FloatArray]:
    x_all = problem.x_full(z)
    x_free = z[problem.n_phi :]
    x_star_free = problem.x_star.ravel()[problem.x_dofs]
    return x_all, x_free - x_star_free


def objective(problem: CoupledProblem, z: FloatArray, masses: FloatArray) -> float:
    """目的関数の値. φ の質量は masses に固定して評価する.

    Raises
    ------
    NonPositiveDistanceError
        接触ペアの距離が非正の場合.

    """
    phi = z[: problem.n_phi]
    phi_star = problem.phi_star.data.ravel()[problem.band.cells]
    value = float(0.5 * phi @ (masses * phi) - phi @ (masses * phi_star))
    x_all, _ = _solid_parts(problem, z)
    x_free = z[problem.n_phi :]
    x_star_free = problem.x_star.ravel()[problem.x_dofs]
    value += float(0.5 * x_free @ (problem.x_mass * x_free))
    value -= float(x_free @ (problem.x_mass * x_star_free))
    if problem.solid.num_vertices:
        value += problem.dt**2 * elastic_energy(problem.solid, x_all, problem.elastic)
    terms = _barrier(problem, z)
    if terms is not None:
        value += terms.energy
    return value


def gradient(problem: CoupledProblem, z: FloatArray, masses: FloatArray) -> FloatArray:
    """目的関数の勾配."""
    g = np.zeros(problem.n_unknowns)
    phi = z[: problem.n_phi]
    phi_star = problem.phi_star.data.ravel()[problem.band.cells]
    g[: problem.n_phi] = masses * (phi - phi_star)
    x_all, diff = _solid_parts(problem, z)
    if problem.x_dofs.size:
        g[problem.n_phi :] = problem.x_mass * diff
        grad_e = elastic_gradient(problem.solid, x_all, problem.elastic)
        g[problem.n_phi :] += problem.dt**2 * grad_e[problem.x_dofs]
    terms = _barrier(problem, z)
    if terms is not None:
        g += terms.gradient
    return g


def hessian(
    problem: CoupledProblem, z: FloatArray, masses: FloatArray
) -> sp.csr_matrix:
    """目的関数のヘッセ行列 (バリア項はガウス・ニュートン近似)."""
    blocks = [sp.diags(masses)] if problem.n_phi else []
    if problem.x_dofs.size:
        x_all = problem.x_full(z)
        k = elastic_hessian(problem.solid, x_all, problem.elastic)
        k_free = k[problem.x_dofs][:, problem.x_dofs]
        blocks.append(sp.diags(problem.x_mass) + problem.dt**2 * k_free)
    if blocks:
        hess = sp.block_diag(blocks, format="csr")
    else:
        hess = sp.csr_matrix((0, 0))
    terms = _barrier(problem, z)
    if terms is not None:
        hess = hess + terms.hessian
    return sp.csr_matrix(hess)


def constraints(
    problem: CoupledProblem, z: FloatArray
) -> tuple[FloatArray, sp.csr_matrix]:
    """成分ごとの体積制約 h と、φ 未知数に関するヤコビアン J."""
    m = problem.num_constraints
    n = problem.n_unknowns
    if m == 0:
        return np.zeros(0), sp.csr_matrix((0, n))
    desc = problem.phi_star.desc
    phi = problem.phi_full(z).data.ravel()
    attr = problem.attribution.ravel()
    vc = desc.cell_volume
    h_cells = np.asarray(heaviside(phi, problem.sharpness)) * vc
    owned = attr >= 0
    volumes = np.bincount(attr[owned], weights=h_cells[owned], minlength=m)
    cons = volumes - problem.targets

    cells = problem.band.cells
    rows = attr[cells]
    hp = np.asarray(heaviside_prime(phi[cells], problem.sharpness)) * vc
    keep = rows >= 0
    jac = sp.csr_matrix(
        (hp[keep], (rows[keep], np.flatnonzero(keep))), shape=(m, n)
    )
    return cons, jac


def _active_rows(problem: CoupledProblem, jac: sp.csr_matrix) -> NDArray[np.bool_]:
    """ヤコビアンの行がほぼ0の成分を除いたマスク."""
    if jac.shape[0] == 0:
        return np.zeros(0, dtype=bool)
    scale = problem.phi_star.desc.cell_volume * problem.sharpness
    row_norm = np.asarray(abs(jac).sum(axis=1)).ravel()
    return row_norm > ROW_DROP_TOL * scale


def assemble(
    problem: CoupledProblem, z: FloatArray
) -> tuple[float, FloatArray, KKTSystem, FloatArray]:
    """現在の反復点で目的関数、勾配、KKT 系、φ の質量を組み立てる."""
    masses = unknown_masses(problem, z)
    f = objective(problem, z, masses)
    g = gradient(problem, z, masses)
    hess = hessian(problem, z, masses)
    cons, jac = constraints(problem, z)
    active = _active_rows(problem, jac)
    if np.any(~active):
        _logger.debug(
            "Dropping %d degenerate volume rows.", int(np.count_nonzero(~active))
        )
    diagonal = problem.x_dofs.size == 0 and not problem.pairs
    system = KKTSystem(
        hess=hess,
        jac=jac[active],
        grad=g,
        cons=cons[active],
        diagonal=diagonal,
    )
    return f, g, system, masses


def solve_kkt(
    system: KKTSystem, mu: float = 0.0
) -> tuple[FloatArray, FloatArray]:
    """KKT 系を解いて (Δ, λ) を返す.

    Parameters
    ----------
    system : KKTSystem
        解く系.

    mu : float
        初期の正則化量. 0 の場合は正則化なしから始める.

    Returns
    -------
    tuple[FloatArray, FloatArray]
        Δ (未知数の更新量) と λ (ラグランジュ乗数).

    Raises
    ------
    SingularSystemError
        正則化を5回強めても解けない場合.

    Notes
    -----
    分解の失敗または Δᵀ H Δ <= 0 を不定値とみなし、
    H に μI を加えて解き直す。μ は 1e-8 trace(H)/n から始め10倍ずつ増やす。
    H が対角ならシューア補元で解く。

    """
    hess = sp.csr_matrix(system.hess)
    n = hess.shape[0]
    m = system.jac.shape[0]
    if n == 0:
        return np.zeros(0), np.zeros(m)
    diag = hess.diagonal()
    if system.diagonal and np.all(diag > 0.0):
        return schur_solve(diag, system.jac, system.grad, system.cons)

    trace = float(np.sum(diag))
    base = 1e-8 * trace / n if trace > 0.0 else 1e-8
    rhs = np.concatenate([-system.grad, -system.cons])
    current = mu
    for attempt in range(MAX_REGULARIZATION_RETRIES + 1):
        reg = hess + current * sp.identity(n, format="csr") if current > 0.0 else hess
        try:
            sol = ldl_solve(reg, system.jac, rhs)
        except SingularSystemError:
            sol = None
        if sol is not None:
            delta = sol[:n]
            curvature = float(delta @ (reg @ delta))
            if curvature > 0.0 or not np.any(delta):
                if current > 0.0:
                    _logger.debug("KKT regularized with mu=%.3e.", current)
                return delta, sol[n:]
        if attempt == MAX_REGULARIZATION_RETRIES:
            break
        current = base if current <= 0.0 else current * 10.0
    message = (
        f"KKT system remained singular after regularization up to mu={current:.3e}."
    )
    raise SingularSystemError(message)


@dataclass(frozen=True)
class NewtonResult:
    """ニュートン法の結果."""

    phi: CellField
    x: FloatArray
    lam: FloatArray
    stats: NewtonStats


def _merit(
    problem: CoupledProblem, z: FloatArray, masses: FloatArray, rho_m: float
) -> float:
    """メリット関数 f + ρ_m Σ|h|. 非正の距離を含む場合は inf."""
    try:
        f = objective(problem, z, masses)
    except NonPositiveDistanceError:
        return np.inf
    cons, _ = constraints(problem, z)
    return f + rho_m * float(np.sum(np.abs(cons)))


def _distances_positive(problem: CoupledProblem, z: FloatArray) -> bool:
    if not problem.pairs or problem.contact is None:
        return True
    d = pair_distances(
        problem.pairs, problem.phi_full(z), problem.x_full(z), problem.contact.scheme
    )
    return bool(np.all(d > 0.0))


def _min_distance(problem: CoupledProblem, z: FloatArray) -> float | None:
    if not problem.pairs or problem.contact is None:
        return None
    d = pair_distances(
        problem.pairs, problem.phi_full(z), problem.x_full(z), problem.contact.scheme
    )
    return float(np.min(d))


def _volume_error(
    problem: CoupledProblem, cons: FloatArray, active: NDArray[np.bool_]
) -> float:
    if cons.size == 0 or not np.any(active):
        return 0.0
    return float(np.max(np.abs(cons[active]) / problem.targets[active]))


def newton_solve(  # noqa: C901, PLR0912, PLR0915
    problem: CoupledProblem,
    phi_init: CellField,
    x_init: FloatArray,
    options: NewtonOptions | None = None,
) -> NewtonResult:
    """結合最適化問題をニュートン法で解く.

    Parameters
    ----------
    problem : CoupledProblem
        最適化問題.

    phi_init : CellField
        初期反復点の φ (通常は前ステップの φⁿ).

    x_init : FloatArray
        初期反復点の頂点位置 (通常は xⁿ).

    options : NewtonOptions | None
        ニュートン法の設定.

    Returns
    -------
    NewtonResult
        最後に受理した反復点と統計.

    Notes
    -----
    ‖Δ‖∞ / dt < tol_v かつ相対体積誤差が volume_tol 以下で収束とする。
    CCD を使う場合は歩幅を min(1, t_b) から始め、距離が正になるまで半減する。
    直線探索はメリット関数 f + ρ_m Σ|h| (ρ_m = max(1, 2|λ|∞)) が
    減少するまで歩幅を半減する。
    ペアの距離が非正の状態に達した場合は penetrated として打ち切る。

    """
    opts = NewtonOptions() if options is None else options
    stats = NewtonStats(used_line_search=opts.line_search)
    z = problem.pack(phi_init, x_init)
    lam = np.zeros(problem.num_constraints)
    use_ccd = opts.ccd and bool(problem.pairs) and problem.contact is not None
    floor_hits = 0

    for _ in range(opts.max_iters + 1):
        try:
            f, _, system, masses = assemble(problem, z)
        except NonPositiveDistanceError:
            _logger.warning("Newton iterate reached a non-positive contact distance.")
            stats.penetrated = True
            break
        cons_all, jac_all = constraints(problem, z)
        active = _active_rows(problem, jac_all)
        delta, lam_active = solve_kkt(system)
        lam = np.zeros(problem.num_constraints)
        lam[active] = lam_active
        step_norm = float(np.max(np.abs(delta))) / problem.dt if delta.size else 0.0
        stats.final_residual = step_norm
        stats.final_volume_error = _volume_error(problem, cons_all, active)
        if step_norm < opts.tol_v and stats.final_volume_error <= opts.volume_tol:
            stats.converged = True
            break
        if stats.iterations >= opts.max_iters:
            break

        alpha = 1.0
        if use_ccd and problem.contact is not None:
            stats.used_ccd = True
            dphi, dx = problem.expand_direction(delta)
            t_b = ccd_filter(
                problem.pairs,
                problem.phi_full(z),
                problem.x_full(z),
                dphi,
                dx,
                problem.contact,
            )
            alpha = min(1.0, t_b)
            if t_b <= CCD_MIN_STEP:
                floor_hits += 1
                stats.ccd_floor_hits += 1
                _logger.warning(
                    "CCD step bound hit the floor (%d in a row).", floor_hits
                )
                if floor_hits >= MAX_CCD_FLOOR_HITS:
                    break
            else:
                floor_hits = 0
            while alpha > MIN_LINE_SEARCH_STEP and not _distances_positive(
                problem, z + alpha * delta
            ):
                alpha *= 0.5

        rho_m = max(1.0, 2.0 * float(np.max(np.abs(lam), initial=0.0)))
        merit0 = f + rho_m * float(np.sum(np.abs(cons_all)))
        if opts.line_search:
            merit_try = _merit(problem, z + alpha * delta, masses, rho_m)
            threshold = merit0 + 1e-12 * abs(merit0)
            while merit_try > threshold and alpha > MIN_LINE_SEARCH_STEP:
                alpha *= 0.5
                merit_try = _merit(problem, z + alpha * delta, masses, rho_m)
            if merit_try > threshold:
                _logger.warning("Line search failed to decrease the merit function.")
                break
        else:
            merit_try = _merit(problem, z + alpha * delta, masses, rho_m)

        z = z + alpha * delta
        stats.iterations += 1
        stats.final_step_size = alpha
        stats.alpha_history.append(alpha)
        stats.merit_history.append(float(merit_try))
        _logger.debug(
            "Newton iter %d: |dz|/dt=%.3e alpha=%.3e merit=%.6e",
            stats.iterations,
            step_norm,
            alpha,
            merit_try,
        )

    stats.min_distance = _min_distance(problem, z) if not stats.penetrated else None
    if not stats.converged:
        _logger.warning(
            "Newton solve stopped after %d iterations (residual %.3e, volume %.3e).",
            stats.iterations,
            stats.final_residual,
            stats.final_volume_error,
        )
    return NewtonResult(
        phi=problem.phi_full(z), x=problem.x_full(z), lam=lam, stats=stats
    )


def volume_only_solve(
    ls_star: LevelSet,
    fluid: FluidParams,
    dt: float,
    band: NarrowbandSet | None = None,
    options: NewtonOptions | None = None,
) -> NewtonResult:
    """固体と接触を含まない体積補正のみの最適化. 初期値は φ⋆."""
    nb = select_narrowband(ls_star, 3.0 * ls_star.desc.dx) if band is None else band
    empty = SolidState.empty()
    problem = CoupledProblem(
        phi_star=ls_star.phi,
        band=nb,
        attribution=ls_star.attribution,
        targets=ls_star.targets,
        sharpness=ls_star.sharpness,
        fluid=fluid,
        solid=empty,
        x_star=np.zeros((0, 2)),
        elastic=ElasticParams(),
        pairs=[],
        contact=None,
        dt=dt,
    )
    return newton_solve(problem, ls_star.phi, np.zeros((0, 2)), options)
