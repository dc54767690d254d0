"""固体と流体の結合シミュレーションの時間積分とシーンの実行.

1ステップは次の順に進める。

1. 固体位置の予測
2. 流体への外力の適用、圧力投影、速度と φ の移流
3. ナローバンドと接触ペアの収集、φ と固体位置の結合最適化
4. φ の再初期化
5. 固体速度の更新、固体速度を境界条件とした流体速度の補正、速度の外挿
"""

import logging
import time
from collections.abc import Callable
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import cast

import numpy as np

from src.internal.contact import (
    ContactParams,
    PrimitivePair,
    collect_pairs,
    vertex_distances,
)
from src.internal.coupled_opt import (
    CoupledProblem,
    NewtonOptions,
    NewtonStats,
    newton_solve,
)
from src.internal.diagnostics import DiagnosticsWriter
from src.internal.errors import (
    NoInterfaceError,
    PenetrationError,
    SimulationError,
    SolverDivergedError,
    StepFailedError,
)
from src.internal.field_io import FrameData, write_frame
from src.internal.fluid_stage import (
    FluidParams,
    SolverTols,
    advect_semilagrangian,
    apply_forces,
    cfl_dt,
    extrapolate_velocity,
    max_fluid_divergence,
    project,
)
from src.internal.grid import CellField, FaceField, FieldKind, FloatArray, GridDesc
from src.internal.levelset import (
    LevelSet,
    narrowband_width,
    redistance,
    sdf_box,
    sdf_circle,
    select_narrowband,
    total_volume,
    volume_errors,
)
from src.internal.solid import (
    ElasticParams,
    SolidState,
    check_edge_lengths,
    predict_positions,
)
from src.internal.solid import correct_velocities as correct_solid_velocities
from src.internal.step_report import StepReport
from src.internal.velocity_correction import SolidBCSet, build_weights, detect_bc_faces
from src.internal.velocity_correction import (
    correct_velocities as correct_fluid_velocities,
)
from src.scene.scene_config import SceneConfig, ToggleConfig

_logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_SOLVER_FAILURE = 3

TIME_EPS = 1e-12
FRAMES_DIRNAME = "frames"


class Stage(Enum):
    """1ステップ内の処理段階."""

    SOLID_PREDICT = "solid_predict"
    APPLY_FORCES = "apply_forces"
    PROJECT = "project"
    ADVECT = "advect"
    COLLECT = "collect"
    OPTIMIZE = "optimize"
    REDISTANCE = "redistance"
    SOLID_CORRECT = "solid_correct"
    FLUID_CORRECT = "fluid_correct"
    EXTRAPOLATE = "extrapolate"


StageHook = Callable[[Stage], None]


@dataclass(frozen=True)
class SimContext:
    """シーン設定から作成した、ステップ間で変わらないパラメータ."""

    desc: GridDesc
    fluid: FluidParams
    elastic: ElasticParams
    contact: ContactParams
    newton: NewtonOptions
    tols: SolverTols
    toggles: ToggleConfig
    extrapolation_layers: int
    cfl: float

    @staticmethod
    def from_scene(scene: SceneConfig) -> "SimContext":
        """シーン設定からパラメータを作成する."""
        desc = scene.grid.to_desc()
        fluid = scene.fluid.to_params()
        return SimContext(
            desc=desc,
            fluid=fluid,
            elastic=scene.solid.to_params(),
            contact=scene.contact.to_params(desc.dx, fluid.rho_l),
            newton=scene.solver.newton_options(scene.toggles),
            tols=scene.solver.solver_tols(),
            toggles=scene.toggles,
            extrapolation_layers=scene.solver.extrapolation_layers,
            cfl=scene.cfl,
        )


@dataclass(frozen=True)
class SimState:
    """シミュレーションの状態."""

    time: float
    step: int
    ls: LevelSet
    u: FaceField
    solid: SolidState

    @property
    def has_fluid(self: "SimState") -> bool:
        """流体セルが存在するか."""
        return bool(np.any(self.ls.phi.data < 0.0))


def initial_state(scene: SceneConfig, ctx: SimContext) -> SimState:
    """液滴とプールの和集合から初期状態を作成する.

    φ は各形状の符号付き距離の最小値を再初期化したもので、
    目標体積は再初期化後の φ から測る。
    各形状の内部にあるフェイスにはその形状の初速度を与える。
    """
    desc = ctx.desc
    phi = np.full(desc.shape(FieldKind.CELL), desc.domain_length)
    u = FaceField.zeros(desc)
    inside_u = np.zeros(desc.shape(FieldKind.FACE_X), dtype=bool)
    inside_v = np.zeros(desc.shape(FieldKind.FACE_Y), dtype=bool)

    def add_body(
        sdf: Callable[[FieldKind], FloatArray], velocity: tuple[float, float]
    ) -> None:
        np.minimum(phi, sdf(FieldKind.CELL), out=phi)
        mu = sdf(FieldKind.FACE_X) < 0.0
        mv = sdf(FieldKind.FACE_Y) < 0.0
        u.u[mu] = velocity[0]
        u.v[mv] = velocity[1]
        inside_u[mu] = True
        inside_v[mv] = True

    for drop in scene.droplets:
        add_body(
            lambda kind, d=drop: sdf_circle(desc, d.center, d.radius, kind),
            drop.velocity,
        )
    for pool in scene.pools:
        add_body(
            lambda kind, p=pool: sdf_box(desc, p.lower, p.upper, kind),
            pool.velocity,
        )

    if scene.perturbation > 0.0:
        rng = np.random.default_rng(scene.seed)
        u.u[inside_u] += scene.perturbation * rng.standard_normal(int(inside_u.sum()))
        u.v[inside_v] += scene.perturbation * rng.standard_normal(int(inside_v.sum()))

    ls = LevelSet.from_phi(CellField(desc=desc, data=phi))
    try:
        ls = LevelSet.from_phi(redistance(ls).phi)
    except NoInterfaceError:
        _logger.info("Initial level set has no interface; skipping redistancing.")
    solid = scene.solid.build()
    check_edge_lengths(solid, solid.x, desc.dx)
    state = SimState(time=0.0, step=0, ls=ls, u=u, solid=solid)
    if state.has_fluid:
        state = replace(state, u=extrapolate_velocity(u, ls, ctx.extrapolation_layers))
    _logger.info(
        "Initial state: %d fluid component(s), volume %.6e, %d solid vertices.",
        ls.num_components,
        total_volume(ls),
        solid.num_vertices,
    )
    return state


def _min_vertex_distance(ls: LevelSet, x: FloatArray, ctx: SimContext) -> float | None:
    if x.shape[0] == 0 or not np.any(ls.phi.data < 0.0):
        return None
    return float(np.min(vertex_distances(ls.phi, x, ctx.contact.scheme)))


def _solid_speed(solid: SolidState) -> float:
    if solid.num_vertices == 0:
        return 0.0
    return float(np.max(np.abs(solid.v)))


def _advance(  # noqa: PLR0915
    state: SimState, dt: float, ctx: SimContext, hook: StageHook
) -> tuple[SimState, StepReport]:
    """1ステップ進める. 失敗時は SimulationError を送出する."""
    desc = ctx.desc
    solid = state.solid
    ls = state.ls
    fluid_present = state.has_fluid
    gravity = np.asarray(ctx.fluid.gravity, dtype=np.float64)

    hook(Stage.SOLID_PREDICT)
    x_star = predict_positions(solid, gravity, dt)

    u = state.u
    hook(Stage.APPLY_FORCES)
    if fluid_present:
        u = apply_forces(u, ls, ctx.fluid, dt, ctx.tols)
    hook(Stage.PROJECT)
    if fluid_present:
        u = project(u, ls, dt, ctx.fluid, ctx.tols)
        u = extrapolate_velocity(u, ls, ctx.extrapolation_layers)
    hook(Stage.ADVECT)
    ls_star = ls
    u_star = u
    if fluid_present:
        phi_adv = cast(CellField, advect_semilagrangian(u, ls.phi, dt))
        u_star = cast(FaceField, advect_semilagrangian(u, u, dt))
        ls_star = ls.with_phi(phi_adv.data)

    hook(Stage.COLLECT)
    max_speed = max(u.max_abs(), _solid_speed(solid))
    band = select_narrowband(ls_star, narrowband_width(max_speed, dt, desc.dx))
    pairs: list[PrimitivePair] = []
    if ctx.toggles.contact_barrier and solid.num_vertices > 0 and not band.no_fluid:
        pairs = collect_pairs(ls_star.phi, x_star, ctx.contact, ls.phi, solid.x)

    hook(Stage.OPTIMIZE)
    problem = CoupledProblem(
        phi_star=ls_star.phi,
        band=band,
        attribution=ls_star.attribution,
        targets=ls_star.targets,
        sharpness=ls_star.sharpness,
        fluid=ctx.fluid,
        solid=solid,
        x_star=x_star,
        elastic=ctx.elastic,
        pairs=pairs,
        contact=ctx.contact if pairs else None,
        dt=dt,
        volume_constraint=ctx.toggles.volume_constraint,
    )
    if problem.n_unknowns == 0:
        phi_new, x_new = ls_star.phi, x_star
        stats = NewtonStats(converged=True)
    else:
        result = newton_solve(problem, ls.phi, solid.x, ctx.newton)
        phi_new, x_new, stats = result.phi, result.x, result.stats
        if stats.penetrated and ctx.toggles.ccd:
            message = "Newton iterate penetrated the fluid surface despite CCD."
            raise SolverDivergedError(message)
    ls_opt = ls_star.with_phi(phi_new.data) if fluid_present else ls_star
    vol_errs = volume_errors(ls_opt)

    hook(Stage.REDISTANCE)
    ls_new = ls_opt
    if fluid_present:
        try:
            ls_new = redistance(ls_opt)
        except NoInterfaceError:
            _logger.warning("Level set lost its interface; skipping redistancing.")
    min_distance = _min_vertex_distance(ls_new, x_new, ctx)
    guarded = ctx.toggles.contact_barrier and ctx.toggles.ccd
    if guarded and min_distance is not None and min_distance <= 0.0:
        message = (
            f"Solid vertex ended inside the fluid (distance {min_distance:.3e}, "
            f"newton converged={stats.converged})."
        )
        raise PenetrationError(message)

    hook(Stage.SOLID_CORRECT)
    v_new = correct_solid_velocities(x_new, solid.x, dt, solid.damping)
    v_new[solid.fixed] = 0.0
    solid_new = solid.with_motion(x_new, v_new)
    check_edge_lengths(solid, x_new, desc.dx)

    hook(Stage.FLUID_CORRECT)
    fluid_after = bool(np.any(ls_new.phi.data < 0.0))
    bc = SolidBCSet.empty(solid.num_vertices)
    u_new = FaceField.zeros(desc)
    if fluid_after:
        if solid.num_vertices > 0:
            faces = detect_bc_faces(ls_new.phi, x_new, ctx.contact)
            bc = build_weights(faces, solid_new, x_new, desc, ctx.contact)
        u_new = correct_fluid_velocities(
            u_star, ls_new, bc, v_new, dt, ctx.fluid, ctx.tols
        )
    max_div = max_fluid_divergence(u_new, ls_new) if fluid_after else 0.0

    hook(Stage.EXTRAPOLATE)
    if fluid_after:
        u_new = extrapolate_velocity(u_new, ls_new, ctx.extrapolation_layers)

    new_state = SimState(
        time=state.time + dt, step=state.step + 1, ls=ls_new, u=u_new, solid=solid_new
    )
    report = StepReport(
        step=state.step,
        time=new_state.time,
        dt=dt,
        newton=stats,
        volume_errors=[float(e) for e in vol_errs],
        total_volume=total_volume(ls_new),
        min_distance=min_distance,
        max_divergence=max_div,
        num_pairs=len(pairs),
        band_size=band.size,
        bc_faces=bc.size,
    )
    return new_state, report


def _ignore_stage(_: Stage) -> None:
    return


def step(
    state: SimState, dt: float, ctx: SimContext, hook: StageHook | None = None
) -> tuple[SimState, StepReport]:
    """1ステップ進める.

    Parameters
    ----------
    state : SimState
        現在の状態.

    dt : float
        時間刻み [s].

    ctx : SimContext
        シーンのパラメータ.

    hook : StageHook | None
        各処理段階の開始時に呼ばれる関数.

    Returns
    -------
    tuple[SimState, StepReport]
        新しい状態と実行結果.

    Raises
    ------
    StepFailedError
        dt/2 で再試行しても失敗した場合.

    """
    record = _ignore_stage if hook is None else hook
    start = time.perf_counter()
    try:
        new_state, report = _advance(state, dt, ctx, record)
    except SimulationError as e:
        _logger.warning(
            "Step %d failed with dt=%.3e (%s); retrying with dt/2.", state.step, dt, e
        )
        try:
            new_state, report = _advance(state, 0.5 * dt, ctx, record)
        except SimulationError as e2:
            failed = StepReport(
                step=state.step,
                time=state.time,
                dt=0.5 * dt,
                retried=True,
                wall_time=time.perf_counter() - start,
            )
            message = (
                f"Step {state.step} failed after retry with dt={0.5 * dt:.3e}: {e2}"
            )
            raise StepFailedError(message, report=failed) from e2
        report = report.model_copy(update={"retried": True})
    report = report.model_copy(update={"wall_time": time.perf_counter() - start})
    _logger.debug(
        "Step %d: t=%.6f dt=%.3e newton=%d pairs=%d",
        report.step,
        report.time,
        report.dt,
        report.newton.iterations,
        report.num_pairs,
    )
    return new_state, report


def next_dt(state: SimState, ctx: SimContext, t_limit: float) -> float:
    """CFL 条件と重力による制限から時間刻みを決め、t_limit を超えないように切り詰める."""
    dx = ctx.desc.dx
    dt = cfl_dt(state.u, ctx.cfl, dx, ctx.fluid, _solid_speed(state.solid))
    g = float(np.hypot(*ctx.fluid.gravity))
    if g > 0.0:
        dt = min(dt, ctx.cfl * float(np.sqrt(dx / g)))
    return min(dt, t_limit - state.time)


def _frame_data(state: SimState) -> FrameData:
    return FrameData(
        phi=state.ls.phi,
        velocity=state.u,
        labels=state.ls.components,
        x=state.solid.x,
        edges=state.solid.edges,
    )


def _write_frame(
    out_dir: Path, index: int, state: SimState, scene: SceneConfig
) -> None:
    if scene.output.write_fields:
        write_frame(out_dir / FRAMES_DIRNAME / f"frame_{index:05d}", _frame_data(state))


def run(scene: SceneConfig, out_dir: Path) -> int:
    """シーンを終了時刻まで実行し、フレームと診断情報を書き出す.

    Parameters
    ----------
    scene : SceneConfig
        実行するシーン.

    out_dir : Path
        出力ディレクトリ.

    Returns
    -------
    int
        終了コード. 成功は 0、ステップの失敗は 3.

    """
    ctx = SimContext.from_scene(scene)
    state = initial_state(scene, ctx)
    writer = DiagnosticsWriter(out_dir)
    initial_volume = total_volume(state.ls)
    num_frames = int(np.floor(scene.output.end_time * scene.output.frame_rate + 1e-9))

    _write_frame(out_dir, 0, state, scene)
    writer.write_frame(0, 0.0, [], initial_volume)
    status = EXIT_OK
    frame = 0
    try:
        for frame in range(1, num_frames + 1):
            t_frame = frame / scene.output.frame_rate
            reports: list[StepReport] = []
            while state.time < t_frame - TIME_EPS:
                dt = next_dt(state, ctx, t_frame)
                state, report = step(state, dt, ctx)
                writer.write_step(report)
                reports.append(report)
            state = replace(state, time=t_frame)
            _write_frame(out_dir, frame, state, scene)
            writer.write_frame(frame, t_frame, reports, total_volume(state.ls))
            _logger.info(
                "Frame %d/%d: t=%.4f, %d steps, volume %.6e",
                frame,
                num_frames,
                t_frame,
                len(reports),
                total_volume(state.ls),
            )
    except StepFailedError:
        _logger.exception("Simulation aborted at t=%.6f.", state.time)
        _write_frame(out_dir, frame, state, scene)
        status = EXIT_SOLVER_FAILURE

    writer.write_summary(
        {
            "scene": scene.model_dump(mode="json"),
            "exit_status": status,
            "steps": state.step,
            "time": state.time,
            "frames": frame if status == EXIT_OK else frame - 1,
            "initial_volume": initial_volume,
            "final_volume": total_volume(state.ls),
        }
    )
    return status
