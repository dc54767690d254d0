"""実行中の診断情報をファイルに書き出すモジュール.

diagnostics.csv は列順が固定で、同じシーンと乱数シードでは同一の内容になる。
実行時間は timings.csv に分けて書く。
"""

import csv
import json
import logging
import os
from pathlib import Path
from typing import Any

from src.internal.json_encoder import NumpyEncoder
from src.internal.step_report import StepReport, format_value
from src.scene.diagnostics_keys import DiagnosticsColumn, FrameColumn, TimingColumn

_logger = logging.getLogger(__name__)

DIAGNOSTICS_FILENAME = "diagnostics.csv"
FRAMES_FILENAME = "frames.csv"
TIMINGS_FILENAME = "timings.csv"
REPORTS_FILENAME = "reports.jsonl"
SUMMARY_FILENAME = "summary.json"


class DiagnosticsWriter:
    """出力ディレクトリに診断ファイルを追記する."""

    def __init__(self: "DiagnosticsWriter", out_dir: Path) -> None:
        """ヘッダーを書いてファイルを初期化する."""
        self._out_dir = out_dir
        self._out_dir.mkdir(parents=True, exist_ok=True)
        _write_header(self.diagnostics_path, [key.value for key in DiagnosticsColumn])
        _write_header(self.frames_path, [key.value for key in FrameColumn])
        _write_header(self.timings_path, [key.value for key in TimingColumn])
        self.reports_path.write_text("", encoding="utf-8")

    @property
    def diagnostics_path(self: "DiagnosticsWriter") -> Path:
        """diagnostics.csv のパス."""
        return self._out_dir / DIAGNOSTICS_FILENAME

    @property
    def frames_path(self: "DiagnosticsWriter") -> Path:
        """frames.csv のパス."""
        return self._out_dir / FRAMES_FILENAME

    @property
    def timings_path(self: "DiagnosticsWriter") -> Path:
        """timings.csv のパス."""
        return self._out_dir / TIMINGS_FILENAME

    @property
    def reports_path(self: "DiagnosticsWriter") -> Path:
        """reports.jsonl のパス."""
        return self._out_dir / REPORTS_FILENAME

    @property
    def summary_path(self: "DiagnosticsWriter") -> Path:
        """summary.json のパス."""
        return self._out_dir / SUMMARY_FILENAME

    def write_step(self: "DiagnosticsWriter", report: StepReport) -> None:
        """1ステップ分の結果を追記する."""
        row = report.to_row()
        _append_row(
            self.diagnostics_path, [row[key.value] for key in DiagnosticsColumn]
        )
        _append_row(
            self.timings_path,
            [format_value(report.step), format_value(report.wall_time)],
        )
        _save_log(
            self.reports_path, report.model_dump(mode="json", exclude={"wall_time"})
        )

    def write_frame(
        self: "DiagnosticsWriter",
        frame: int,
        time: float,
        reports: list[StepReport],
        total_volume: float,
    ) -> None:
        """フレーム間のステップをまとめた1行を追記する.

        Parameters
        ----------
        frame : int
            フレーム番号.

        time : float
            フレームの時刻 [s].

        reports : list[StepReport]
            前のフレームからこのフレームまでのステップの結果.

        total_volume : float
            フレーム時点の流体の体積 [m^2].

        """
        steps = len(reports)
        avg_iters = sum(r.newton.iterations for r in reports) / steps if steps else 0.0
        distances = [r.min_distance for r in reports if r.min_distance is not None]
        values: dict[FrameColumn, object] = {
            FrameColumn.frame: frame,
            FrameColumn.time: float(time),
            FrameColumn.steps: steps,
            FrameColumn.avg_newton_iterations: float(avg_iters),
            FrameColumn.min_distance: min(distances) if distances else None,
            FrameColumn.max_volume_error: max(
                (r.volume_error for r in reports), default=0.0
            ),
            FrameColumn.total_volume: float(total_volume),
        }
        _append_row(
            self.frames_path, [format_value(values[key]) for key in FrameColumn]
        )

    def write_summary(self: "DiagnosticsWriter", summary: dict[str, Any]) -> None:
        """実行全体の情報を summary.json に書く."""
        with self.summary_path.open("w", encoding="utf-8") as f:
            json.dump(summary, f, cls=NumpyEncoder, indent=2, sort_keys=True)
            f.write(os.linesep)
        _logger.info("Wrote summary: %s", self.summary_path)


def load_diagnostics(filepath: Path) -> list[StepReport]:
    """diagnostics.csv を読み込む."""
    with filepath.open("r", encoding="utf-8", newline="") as f:
        return [StepReport.load_from_row(row) for row in csv.DictReader(f)]


def load_reports(filepath: Path) -> list[StepReport]:
    """reports.jsonl を読み込む."""
    return [StepReport.model_validate(log) for log in _load_log(filepath)]


def _write_header(filepath: Path, columns: list[str]) -> None:
    with filepath.open("w", encoding="utf-8", newline="") as f:
        csv.writer(f, lineterminator="\n").writerow(columns)


def _append_row(filepath: Path, values: list[str]) -> None:
    with filepath.open("a", encoding="utf-8", newline="") as f:
        csv.writer(f, lineterminator="\n").writerow(values)


def _load_log(filepath: Path) -> list[dict]:
    """ログを読み込む."""
    with filepath.open("r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def _save_log(filepath: Path, log: dict[str, Any]) -> None:
    """ログを1行のJSONとして追記する."""
    with filepath.open("a", encoding="utf-8") as f:
        json.dump(log, f, cls=NumpyEncoder, sort_keys=True)
        f.write(os.linesep)
