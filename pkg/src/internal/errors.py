"""シミュレーション全体で利用する例外を定義するモジュール."""

from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from src.internal.step_report import StepReport


class SimulationError(RuntimeError):
    """シミュレーションで発生する例外の基底クラス."""


class NoInterfaceError(SimulationError):
    """レベルセットに符号の変化が存在しない."""


class DegenerateGradientError(SimulationError):
    """レベルセットの勾配が小さすぎて法線を定義できない."""


class SolverDivergedError(SimulationError):
    """反復ソルバが最大反復回数以内に収束しなかった."""


class NonPositiveDistanceError(SimulationError):
    """バリア関数に非正の距離が渡された."""


class PenetrationError(SimulationError):
    """ステップ終了時に固体の頂点が流体の内部にある."""


class SingularSystemError(SimulationError):
    """線形システムが特異で解けない."""


class NotConvergedError(SimulationError):
    """反復解法が収束しなかった.

    Parameters
    ----------
    message : str
        エラーメッセージ.

    residual : float
        最終反復での相対残差.

    """

    def __init__(self: "NotConvergedError", message: str, residual: float) -> None:
        """初期化メソッド."""
        super().__init__(message)
        self.residual = residual


class StepFailedError(SimulationError):
    """タイムステップの実行に失敗した."""

    def __init__(
        self: "StepFailedError", message: str, report: "StepReport | None" = None
    ) -> None:
        """初期化メソッド."""
        super().__init__(message)
        self.report = report
