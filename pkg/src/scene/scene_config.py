"""シミュレーションのシーン設定と組み込みシーン."""

from collections.abc import Callable
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.internal.contact import ContactParams, InterpScheme
from src.internal.coupled_opt import NewtonOptions
from src.internal.fluid_stage import (
    DEFAULT_EXTRAPOLATION_LAYERS,
    FluidParams,
    SolverTols,
)
from src.internal.grid import GridDesc
from src.internal.solid import ElasticParams, SolidState
from src.internal.sparse_la import Preconditioner

Vec2 = tuple[float, float]

_DEFAULT_GRAVITY: Vec2 = (0.0, -9.8)
_WATER_SURFACE_TENSION = 0.07


class GridConfig(BaseModel):
    """格子の設定. dx = width / resolution."""

    resolution: int = Field(default=64, ge=4, description="x方向のセル数.")
    width: float = Field(default=1.0, gt=0.0, description="領域の幅 [m].")
    height: float = Field(default=1.0, gt=0.0, description="領域の高さ [m].")
    origin: Vec2 = Field(default=(0.0, 0.0), description="左下隅の座標 [m].")

    model_config = ConfigDict(frozen=True, extra="forbid")

    def to_desc(self: "GridConfig") -> GridDesc:
        """格子形状を作成する."""
        dx = self.width / self.resolution
        ny = max(4, round(self.height / dx))
        return GridDesc(nx=self.resolution, ny=ny, dx=dx, origin=self.origin)


class FluidConfig(BaseModel):
    """流体の物性値. rho_a を省略した場合は 1e-3 rho_l."""

    rho_l: float = Field(default=1000.0, gt=0.0, description="液体の密度.")
    rho_a: float | None = Field(default=None, gt=0.0, description="空気の密度.")
    gamma: float = Field(default=0.0, ge=0.0, description="表面張力係数.")
    gravity: Vec2 = Field(default=_DEFAULT_GRAVITY, description="重力加速度.")

    model_config = ConfigDict(frozen=True, extra="forbid")

    def to_params(self: "FluidConfig") -> FluidParams:
        """流体パラメータを作成する."""
        rho_a = 1e-3 * self.rho_l if self.rho_a is None else self.rho_a
        return FluidParams(
            rho_l=self.rho_l, rho_a=rho_a, gamma=self.gamma, gravity=self.gravity
        )


class DropletConfig(BaseModel):
    """円形の液滴."""

    center: Vec2
    radius: float = Field(gt=0.0)
    velocity: Vec2 = (0.0, 0.0)

    model_config = ConfigDict(frozen=True, extra="forbid")


class PoolConfig(BaseModel):
    """軸平行な矩形の液体."""

    lower: Vec2
    upper: Vec2
    velocity: Vec2 = (0.0, 0.0)

    model_config = ConfigDict(frozen=True, extra="forbid")

    @model_validator(mode="after")
    def _check_corners(self: "PoolConfig") -> "PoolConfig":
        if self.lower[0] >= self.upper[0] or self.lower[1] >= self.upper[1]:
            message = "Pool lower corner must be below and left of the upper corner."
            raise ValueError(message)
        return self


class ParticleConfig(BaseModel):
    """接続を持たない頂点の集まり."""

    positions: list[Vec2]
    mass: float = Field(default=1.0, gt=0.0, description="頂点1つの質量 [kg].")
    fixed: bool = Field(default=False, description="全頂点を固定するか.")
    velocity: Vec2 = (0.0, 0.0)

    model_config = ConfigDict(frozen=True, extra="forbid")

    def build(self: "ParticleConfig", damping: float) -> SolidState:
        """固体を作成する."""
        n = len(self.positions)
        return SolidState.from_points(
            np.asarray(self.positions, dtype=np.float64).reshape(-1, 2),
            self.mass,
            fixed=np.full(n, self.fixed),
            velocity=self.velocity,
            damping=damping,
        )


class PolylineConfig(BaseModel):
    """開いた折れ線."""

    points: list[Vec2] = Field(min_length=2)
    line_density: float = Field(gt=0.0, description="線密度 [kg/m].")
    fixed_vertices: list[int] = Field(default_factory=list)
    velocity: Vec2 = (0.0, 0.0)

    model_config = ConfigDict(frozen=True, extra="forbid")

    @model_validator(mode="after")
    def _check_fixed(self: "PolylineConfig") -> "PolylineConfig":
        n = len(self.points)
        if any(i < 0 or i >= n for i in self.fixed_vertices):
            message = f"Fixed vertex index out of range for {n} points."
            raise ValueError(message)
        return self

    def build(self: "PolylineConfig", damping: float) -> SolidState:
        """固体を作成する."""
        fixed = np.zeros(len(self.points), dtype=bool)
        fixed[self.fixed_vertices] = True
        return SolidState.from_polyline(
            np.asarray(self.points, dtype=np.float64),
            self.line_density,
            fixed=fixed,
            velocity=self.velocity,
            damping=damping,
        )


class SolidConfig(BaseModel):
    """固体の形状と弾性パラメータ."""

    particles: list[ParticleConfig] = Field(default_factory=list)
    polylines: list[PolylineConfig] = Field(default_factory=list)
    k_stretch: float = Field(default=0.0, ge=0.0)
    k_bend: float = Field(default=0.0, ge=0.0)
    project_psd: bool = True
    damping: float = Field(default=0.0, ge=0.0)

    model_config = ConfigDict(frozen=True, extra="forbid")

    def build(self: "SolidConfig") -> SolidState:
        """全ての固体を1つにまとめて作成する. 頂点は粒子、折れ線の順に並ぶ."""
        parts = [p.build(self.damping) for p in self.particles]
        parts += [p.build(self.damping) for p in self.polylines]
        return SolidState.concatenate(parts, damping=self.damping)

    def to_params(self: "SolidConfig") -> ElasticParams:
        """弾性パラメータを作成する."""
        return ElasticParams(
            k_stretch=self.k_stretch, k_bend=self.k_bend, project_psd=self.project_psd
        )


class ContactConfig(BaseModel):
    """接触の設定. 省略した値は格子サイズから決める."""

    dhat: float | None = Field(default=None, gt=0.0)
    kappa: float | None = Field(default=None, gt=0.0)
    scheme: InterpScheme = InterpScheme.LINEAR

    model_config = ConfigDict(frozen=True, extra="forbid")

    def to_params(self: "ContactConfig", dx: float, rho_l: float) -> ContactParams:
        """接触パラメータを作成する."""
        default = ContactParams.create_default(dx, rho_l, self.scheme)
        return ContactParams(
            dhat=default.dhat if self.dhat is None else self.dhat,
            kappa=default.kappa if self.kappa is None else self.kappa,
            scheme=self.scheme,
        )


class ToggleConfig(BaseModel):
    """比較実験のための機能の切り替え."""

    line_search: bool = True
    ccd: bool = True
    volume_constraint: bool = True
    contact_barrier: bool = True

    model_config = ConfigDict(frozen=True, extra="forbid")


class SolverConfig(BaseModel):
    """ソルバの許容値と反復回数."""

    max_newton_iters: int = Field(default=30, gt=0)
    tol_v: float = Field(default=1e-3, gt=0.0)
    volume_tol: float = Field(default=1e-6, gt=0.0)
    poisson_rel_tol: float = Field(default=1e-6, gt=0.0)
    poisson_max_iters: int = Field(default=5000, gt=0)
    preconditioner: Preconditioner = Preconditioner.JACOBI
    extrapolation_layers: int = Field(default=DEFAULT_EXTRAPOLATION_LAYERS, ge=1)

    model_config = ConfigDict(frozen=True, extra="forbid")

    def newton_options(self: "SolverConfig", toggles: ToggleConfig) -> NewtonOptions:
        """ニュートン法の設定を作成する."""
        return NewtonOptions(
            max_iters=self.max_newton_iters,
            tol_v=self.tol_v,
            volume_tol=self.volume_tol,
            line_search=toggles.line_search,
            ccd=toggles.ccd,
        )

    def solver_tols(self: "SolverConfig") -> SolverTols:
        """圧力ソルバの許容値を作成する."""
        return SolverTols(
            poisson_rel_tol=self.poisson_rel_tol,
            poisson_max_iters=self.poisson_max_iters,
            preconditioner=self.preconditioner,
        )


class OutputConfig(BaseModel):
    """出力の設定."""

    frame_rate: float = Field(default=30.0, gt=0.0, description="フレームレート [1/s].")
    end_time: float = Field(default=1.0, ge=0.0, description="終了時刻 [s].")
    write_fields: bool = Field(default=True, description="フレームごとに場を書き出すか.")

    model_config = ConfigDict(frozen=True, extra="forbid")


class SceneConfig(BaseModel):
    """シーン全体の設定."""

    name: str = Field(default="custom")
    grid: GridConfig = Field(default_factory=GridConfig)
    fluid: FluidConfig = Field(default_factory=FluidConfig)
    droplets: list[DropletConfig] = Field(default_factory=list)
    pools: list[PoolConfig] = Field(default_factory=list)
    solid: SolidConfig = Field(default_factory=SolidConfig)
    contact: ContactConfig = Field(default_factory=ContactConfig)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    toggles: ToggleConfig = Field(default_factory=ToggleConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)
    cfl: float = Field(default=1.0, gt=0.0, description="CFL 数.")
    seed: int = Field(default=0, ge=0, description="初期速度の擾乱の乱数シード.")
    perturbation: float = Field(
        default=0.0, ge=0.0, description="初期速度に加える擾乱の大きさ [m/s]."
    )

    model_config = ConfigDict(frozen=True, extra="forbid")

    @staticmethod
    def load(filepath: Path) -> "SceneConfig":
        """JSONファイルから読み込む."""
        return SceneConfig.model_validate_json(filepath.read_text(encoding="utf-8"))

    @staticmethod
    def create_particle_collision(resolution: int = 128) -> "SceneConfig":
        """落下する液滴と固定された1粒子の衝突."""
        return SceneConfig(
            name="particle_collision",
            grid=GridConfig(resolution=resolution),
            fluid=FluidConfig(gamma=_WATER_SURFACE_TENSION),
            droplets=[
                DropletConfig(center=(0.5, 0.7), radius=0.15, velocity=(0.0, -1.0))
            ],
            solid=SolidConfig(
                particles=[ParticleConfig(positions=[(0.5, 0.45)], fixed=True)]
            ),
            contact=ContactConfig(scheme=InterpScheme.QUADRATIC),
            cfl=0.7,
        )

    @staticmethod
    def create_splash_volume(
        resolution: int = 128, *, volume_constraint: bool = True
    ) -> "SceneConfig":
        """高速で床に衝突する液滴. 体積制約の有無を比較する."""
        return SceneConfig(
            name="splash_volume",
            grid=GridConfig(resolution=resolution),
            fluid=FluidConfig(gamma=_WATER_SURFACE_TENSION),
            droplets=[
                DropletConfig(center=(0.5, 0.5), radius=0.15, velocity=(0.0, -5.0))
            ],
            toggles=ToggleConfig(volume_constraint=volume_constraint),
            output=OutputConfig(end_time=2.0),
            cfl=0.7,
        )

    @staticmethod
    def create_porous_wall(
        spacing: float = 1.0, resolution: int = 128
    ) -> "SceneConfig":
        """固定粒子の列に落下する液滴. spacing は粒子間隔をセルサイズ単位で与える."""
        grid = GridConfig(resolution=resolution)
        dx = grid.width / resolution
        return SceneConfig(
            name="porous_wall",
            grid=grid,
            fluid=FluidConfig(gamma=_WATER_SURFACE_TENSION),
            droplets=[
                DropletConfig(center=(0.5, 0.75), radius=0.12, velocity=(0.0, -1.0))
            ],
            solid=SolidConfig(
                particles=[
                    ParticleConfig(
                        positions=particle_row(0.2, 0.8, 0.5, spacing * dx), fixed=True
                    )
                ]
            ),
            cfl=0.7,
        )

    @staticmethod
    def create_convergence_study(
        cfl: float = 0.7, resolution: int = 128, *, line_search: bool = True
    ) -> "SceneConfig":
        """粒子の列との衝突でニュートン法の反復回数を調べる. 反復は30回まで."""
        base = SceneConfig.create_porous_wall(1.0, resolution)
        return base.model_copy(
            update={
                "name": "convergence_study",
                "cfl": cfl,
                "solver": SolverConfig(max_newton_iters=30),
                "toggles": ToggleConfig(line_search=line_search, ccd=line_search),
            }
        )

    @staticmethod
    def create_droplet_band_2d(resolution: int = 128) -> "SceneConfig":
        """両端を固定した弾性の折れ線に落下する液滴."""
        grid = GridConfig(resolution=resolution)
        dx = grid.width / resolution
        points = particle_row(0.15, 0.85, 0.4, 0.8 * dx)
        return SceneConfig(
            name="droplet_band_2d",
            grid=grid,
            fluid=FluidConfig(gamma=_WATER_SURFACE_TENSION),
            droplets=[
                DropletConfig(center=(0.5, 0.7), radius=0.12, velocity=(0.0, -1.0))
            ],
            solid=SolidConfig(
                polylines=[
                    PolylineConfig(
                        points=points,
                        line_density=0.1,
                        fixed_vertices=[0, len(points) - 1],
                    )
                ],
                k_stretch=10.0,
                k_bend=1e-4,
            ),
            cfl=0.7,
        )

    @staticmethod
    def create_interp_compare(
        cfl: float = 1.0,
        scheme: InterpScheme = InterpScheme.QUADRATIC,
        resolution: int = 128,
    ) -> "SceneConfig":
        """無重力で静止した液滴を重い粒子が通り抜ける. 補間方式を比較する."""
        return SceneConfig(
            name="interp_compare",
            grid=GridConfig(resolution=resolution),
            fluid=FluidConfig(gamma=_WATER_SURFACE_TENSION, gravity=(0.0, 0.0)),
            droplets=[DropletConfig(center=(0.5, 0.5), radius=0.15)],
            solid=SolidConfig(
                particles=[
                    ParticleConfig(
                        positions=[(0.5, 0.8)], mass=10.0, velocity=(0.0, -1.5)
                    )
                ]
            ),
            contact=ContactConfig(scheme=scheme),
            cfl=cfl,
        )


def particle_row(x0: float, x1: float, y: float, spacing: float) -> list[Vec2]:
    """x0 から spacing 間隔で x1 まで並べた水平な頂点列."""
    count = int(np.floor((x1 - x0) / spacing + 1e-9)) + 1
    return [(x0 + k * spacing, y) for k in range(count)]


def builtin_scenes() -> dict[str, Callable[[], SceneConfig]]:
    """組み込みシーンの名前と既定のパラメータで作成する関数."""
    return {
        "particle_collision": SceneConfig.create_particle_collision,
        "splash_volume": SceneConfig.create_splash_volume,
        "porous_wall": SceneConfig.create_porous_wall,
        "convergence_study": SceneConfig.create_convergence_study,
        "droplet_band_2d": SceneConfig.create_droplet_band_2d,
        "interp_compare": SceneConfig.create_interp_compare,
    }
