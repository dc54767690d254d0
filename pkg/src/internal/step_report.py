"""1ステップ分の実行結果を管理するクラス."""

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.internal.coupled_opt import NewtonStats
from src.scene.diagnostics_keys import DiagnosticsColumn


class StepReport(BaseModel):
    """1ステップ分の実行結果.

    Parameters
    ----------
    step : int
        0 から始まるステップ番号.

    time : float
        ステップ終了時の時刻 [s].

    dt : float
        実際に使った時間刻み [s].

    retried : bool
        dt/2 で再試行した場合に True.

    newton : NewtonStats
        結合最適化の統計. 最適化を行わなかった場合は既定値.

    volume_errors : list[float]
        成分ごとの相対体積誤差 |h| / V_0 (最適化直後).

    total_volume : float
        再初期化後の流体の離散体積 [m^2].

    min_distance : float | None
        ステップ終了時の固体頂点での φ の最小値. 固体か流体が無い場合は None.

    max_divergence : float
        流体セルでの |div u| の最大値 [1/s].

    num_pairs : int
        接触ペアの数.

    band_size : int
        ナローバンドのセル数.

    bc_faces : int
        固体速度を課したフェイスの数.

    wall_time : float
        ステップの実行時間 [s]. diagnostics.csv には含めない.

    """

    step: int
    time: float
    dt: float
    retried: bool = False
    newton: NewtonStats = Field(default_factory=NewtonStats)
    volume_errors: list[float] = Field(default_factory=list)
    total_volume: float = 0.0
    min_distance: float | None = None
    max_divergence: float = 0.0
    num_pairs: int = 0
    band_size: int = 0
    bc_faces: int = 0
    wall_time: float = 0.0

    model_config = ConfigDict(frozen=True)

    @property
    def volume_error(self: "StepReport") -> float:
        """成分ごとの相対体積誤差の最大値."""
        return max(self.volume_errors, default=0.0)

    def to_row(self: "StepReport") -> dict[str, str]:
        """diagnostics.csv の1行に変換する."""
        values: dict[DiagnosticsColumn, object] = {
            DiagnosticsColumn.step: self.step,
            DiagnosticsColumn.time: self.time,
            DiagnosticsColumn.dt: self.dt,
            DiagnosticsColumn.retried: self.retried,
            DiagnosticsColumn.newton_iterations: self.newton.iterations,
            DiagnosticsColumn.converged: self.newton.converged,
            DiagnosticsColumn.penetrated: self.newton.penetrated,
            DiagnosticsColumn.final_step_size: self.newton.final_step_size,
            DiagnosticsColumn.final_residual: self.newton.final_residual,
            DiagnosticsColumn.ccd_floor_hits: self.newton.ccd_floor_hits,
            DiagnosticsColumn.num_pairs: self.num_pairs,
            DiagnosticsColumn.band_size: self.band_size,
            DiagnosticsColumn.volume_error: self.volume_error,
            DiagnosticsColumn.total_volume: self.total_volume,
            DiagnosticsColumn.min_distance: self.min_distance,
            DiagnosticsColumn.max_divergence: self.max_divergence,
            DiagnosticsColumn.bc_faces: self.bc_faces,
        }
        return {key.value: format_value(values[key]) for key in DiagnosticsColumn}

    @staticmethod
    def load_from_row(row: dict[str, str]) -> "StepReport":
        """diagnostics.csv の1行から復元する. 履歴と実行時間は復元しない."""
        newton = NewtonStats(
            iterations=int(_get_value_from(row, DiagnosticsColumn.newton_iterations)),
            converged=_parse_bool(_get_value_from(row, DiagnosticsColumn.converged)),
            penetrated=_parse_bool(_get_value_from(row, DiagnosticsColumn.penetrated)),
            final_step_size=float(
                _get_value_from(row, DiagnosticsColumn.final_step_size)
            ),
            final_residual=float(
                _get_value_from(row, DiagnosticsColumn.final_residual)
            ),
            ccd_floor_hits=int(_get_value_from(row, DiagnosticsColumn.ccd_floor_hits)),
        )
        min_distance = _get_value_from(row, DiagnosticsColumn.min_distance)
        return StepReport(
            step=int(_get_value_from(row, DiagnosticsColumn.step)),
            time=float(_get_value_from(row, DiagnosticsColumn.time)),
            dt=float(_get_value_from(row, DiagnosticsColumn.dt)),
            retried=_parse_bool(_get_value_from(row, DiagnosticsColumn.retried)),
            newton=newton,
            volume_errors=[float(_get_value_from(row, DiagnosticsColumn.volume_error))],
            total_volume=float(_get_value_from(row, DiagnosticsColumn.total_volume)),
            min_distance=float(min_distance) if min_distance else None,
            max_divergence=float(
                _get_value_from(row, DiagnosticsColumn.max_divergence)
            ),
            num_pairs=int(_get_value_from(row, DiagnosticsColumn.num_pairs)),
            band_size=int(_get_value_from(row, DiagnosticsColumn.band_size)),
            bc_faces=int(_get_value_from(row, DiagnosticsColumn.bc_faces)),
        )


def format_value(value: object) -> str:
    """CSV に書く文字列. float は往復で値が変わらない表現にする."""
    if value is None:
        return ""
    if isinstance(value, bool | np.bool_):
        return "1" if value else "0"
    if isinstance(value, float | np.floating):
        return repr(float(value))
    return str(value)


def _parse_bool(text: str) -> bool:
    return text.strip() in ("1", "True", "true")


def _get_value_from(row: dict[str, str], key: DiagnosticsColumn) -> str:
    """行から指定した列の値を取得する."""
    value = row.get(key.value)
    if value is None:
        message = f"Diagnostics column not found: {key.value}"
        raise ValueError(message)

    return value
