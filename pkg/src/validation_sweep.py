"""検証用のシーンをパラメータを変えて実行し、結果をCSVにまとめるスクリプト.

利用例:

```sh
python -m src.validation_sweep --study convergence --resolution 64 --frames 60 -vv
python -m src.validation_sweep --study splash --resolution 64 --frames 20
python -m src.validation_sweep --study all --out data/processed/sweep
```
"""

import csv
import logging
import sys
from argparse import ArgumentParser
from enum import Enum
from logging import Formatter, StreamHandler
from logging.handlers import RotatingFileHandler
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field

from src.internal.contact import InterpScheme
from src.internal.diagnostics import (
    DIAGNOSTICS_FILENAME,
    FRAMES_FILENAME,
    load_diagnostics,
)
from src.internal.field_io import load_frame
from src.internal.grid import FieldKind
from src.internal.levelset import LevelSet
from src.internal.sim_driver import FRAMES_DIRNAME, run
from src.internal.step_report import StepReport
from src.scene.diagnostics_keys import FrameColumn
from src.scene.scene_config import SceneConfig

_logger = logging.getLogger(__name__)

_PACKAGE_LOGGER = "src"

CONVERGENCE_CFLS = (0.7, 1.2, 2.0)
POROSITY_SPACINGS = (1.0, 1.2, 1.8, 5.0)
INTERP_CFLS = (0.5, 1.0, 3.0)
WALL_HEIGHT = 0.5


class _Study(Enum):
    """実行する検証."""

    ALL = "all"
    CONVERGENCE = "convergence"
    POROSITY = "porosity"
    INTERP = "interp"
    CONTACT_BASELINE = "contact_baseline"
    SPLASH = "splash"


class _RunConfig(BaseModel):
    """スクリプト実行のためのオプション."""

    study: _Study = Field(default=_Study.ALL, description="実行する検証.")
    out: Path = Field(description="出力ディレクトリ.")
    resolution: int = Field(default=64, ge=4, description="x方向のセル数.")
    frames: int = Field(default=30, ge=1, description="各シーンで出力するフレーム数.")

    verbosity: int = Field(description="ログレベル.")

    model_config = ConfigDict(frozen=True)


def _main() -> None:
    """スクリプトのエントリポイント."""
    # 実行時引数の読み込み
    config = _parse_args()
    config.out.mkdir(parents=True, exist_ok=True)

    # ログ設定
    loglevel = {
        0: logging.ERROR,
        1: logging.WARNING,
        2: logging.INFO,
        3: logging.DEBUG,
    }.get(config.verbosity, logging.DEBUG)
    _setup_logger(config.out / "validation_sweep.log", loglevel=loglevel)
    _logger.info(config)

    if config.study in (_Study.ALL, _Study.CONVERGENCE):
        convergence_study(config.out / "convergence", config.resolution, config.frames)
    if config.study in (_Study.ALL, _Study.POROSITY):
        porosity_study(config.out / "porosity", config.resolution, config.frames)
    if config.study in (_Study.ALL, _Study.INTERP):
        interp_study(config.out / "interp", config.resolution, config.frames)
    if config.study in (_Study.ALL, _Study.CONTACT_BASELINE):
        contact_baseline_study(
            config.out / "contact_baseline", config.resolution, config.frames
        )
    if config.study in (_Study.ALL, _Study.SPLASH):
        splash_volume_study(config.out / "splash", config.resolution, config.frames)


def _with_frames(scene: SceneConfig, frames: int) -> SceneConfig:
    end_time = frames / scene.output.frame_rate
    output = scene.output.model_copy(update={"end_time": end_time})
    return scene.model_copy(update={"output": output})


def _run_case(scene: SceneConfig, out_dir: Path) -> tuple[int, list[StepReport]]:
    """シーンを実行し、終了コードと各ステップの結果を返す."""
    _logger.info("Running %s -> %s", scene.name, out_dir)
    status = run(scene, out_dir)
    return status, load_diagnostics(out_dir / DIAGNOSTICS_FILENAME)


def _min_distance(reports: list[StepReport]) -> float | None:
    distances = [r.min_distance for r in reports if r.min_distance is not None]
    return min(distances) if distances else None


def _write_csv(filepath: Path, header: list[str], rows: list[list[object]]) -> None:
    with filepath.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    _logger.info("Wrote %s", filepath)


def convergence_study(out_dir: Path, resolution: int, frames: int) -> None:
    """CFL 数と直線探索の有無ごとにニュートン法の反復回数を調べる.

    フレームごとの平均反復回数を convergence_frames.csv に、
    ケースごとの要約を convergence.csv に書く。
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    summary: list[list[object]] = []
    per_frame: list[list[object]] = []
    for cfl in CONVERGENCE_CFLS:
        for line_search in (True, False):
            scene = _with_frames(
                SceneConfig.create_convergence_study(
                    cfl, resolution, line_search=line_search
                ),
                frames,
            )
            case_dir = out_dir / f"cfl_{cfl}_ls_{int(line_search)}"
            status, reports = _run_case(scene, case_dir)
            cap = scene.solver.max_newton_iters
            capped = sum(1 for r in reports if not r.newton.converged)
            summary.append(
                [
                    cfl,
                    int(line_search),
                    status,
                    len(reports),
                    max((r.newton.iterations for r in reports), default=0),
                    capped,
                    cap,
                    _min_distance(reports),
                ]
            )
            frames_path = case_dir / FRAMES_FILENAME
            with frames_path.open("r", encoding="utf-8", newline="") as f:
                for row in csv.DictReader(f):
                    per_frame.append(
                        [
                            cfl,
                            int(line_search),
                            row["frame"],
                            row["avg_newton_iterations"],
                        ]
                    )
    _write_csv(
        out_dir / "convergence.csv",
        [
            "cfl",
            "line_search",
            "exit_status",
            "steps",
            "max_iterations",
            "unconverged_steps",
            "iteration_cap",
            "min_distance",
        ],
        summary,
    )
    _write_csv(
        out_dir / "convergence_frames.csv",
        ["cfl", "line_search", "frame", "avg_newton_iterations"],
        per_frame,
    )


def fraction_below(frame_dir: Path, height: float) -> float:
    """フレームの流体体積のうち、セル中心が height より下にある割合."""
    frame = load_frame(frame_dir)
    ls = LevelSet.from_phi(frame.phi)
    h = ls.heaviside_field()
    total = float(h.sum())
    if total <= 0.0:
        return 0.0
    _, ys = frame.phi.desc.positions(FieldKind.CELL)
    return float(h[ys < height].sum()) / total


def _last_frame_dir(case_dir: Path) -> Path:
    frames = sorted((case_dir / FRAMES_DIRNAME).glob("frame_*"))
    if not frames:
        message = f"No frames found in {case_dir}"
        raise FileNotFoundError(message)
    return frames[-1]


def porosity_study(out_dir: Path, resolution: int, frames: int) -> None:
    """粒子間隔ごとに、最終フレームで粒子列より下に抜けた流体の割合を調べる."""
    out_dir.mkdir(parents=True, exist_ok=True)
    rows: list[list[object]] = []
    for spacing in POROSITY_SPACINGS:
        scene = _with_frames(
            SceneConfig.create_porous_wall(spacing, resolution), frames
        )
        case_dir = out_dir / f"spacing_{spacing}"
        status, reports = _run_case(scene, case_dir)
        leaked = fraction_below(_last_frame_dir(case_dir), WALL_HEIGHT)
        rows.append(
            [
                spacing,
                len(scene.solid.particles[0].positions),
                status,
                leaked,
                _min_distance(reports),
            ]
        )
    _write_csv(
        out_dir / "porosity.csv",
        ["spacing", "num_particles", "exit_status", "fraction_below", "min_distance"],
        rows,
    )


def interp_study(out_dir: Path, resolution: int, frames: int) -> None:
    """CFL 数と距離の補間方式ごとに、侵入の有無を調べる."""
    out_dir.mkdir(parents=True, exist_ok=True)
    rows: list[list[object]] = []
    for cfl in INTERP_CFLS:
        for scheme in InterpScheme:
            scene = _with_frames(
                SceneConfig.create_interp_compare(cfl, scheme, resolution), frames
            )
            case_dir = out_dir / f"cfl_{cfl}_{scheme.value}"
            status, reports = _run_case(scene, case_dir)
            min_d = _min_distance(reports)
            rows.append(
                [
                    cfl,
                    scheme.value,
                    status,
                    int(all(r.newton.converged for r in reports)),
                    min_d,
                    int(min_d is not None and min_d <= 0.0),
                ]
            )
    _write_csv(
        out_dir / "interp.csv",
        ["cfl", "scheme", "exit_status", "all_converged", "min_distance", "penetrated"],
        rows,
    )


def contact_baseline_study(out_dir: Path, resolution: int, frames: int) -> None:
    """接触バリアの有無で、粒子が流体の内部に入り込むかを比べる.

    バリアを使わない場合は固体を Neumann 境界としてだけ扱う。
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    rows: list[list[object]] = []
    for contact_barrier in (True, False):
        base = SceneConfig.create_particle_collision(resolution)
        toggles = base.toggles.model_copy(update={"contact_barrier": contact_barrier})
        scene = _with_frames(base.model_copy(update={"toggles": toggles}), frames)
        case_dir = out_dir / f"barrier_{int(contact_barrier)}"
        status, reports = _run_case(scene, case_dir)
        min_d = _min_distance(reports)
        rows.append(
            [
                int(contact_barrier),
                status,
                len(reports),
                min_d,
                int(min_d is not None and min_d <= 0.0),
            ]
        )
    _write_csv(
        out_dir / "contact_baseline.csv",
        ["contact_barrier", "exit_status", "steps", "min_distance", "penetrated"],
        rows,
    )


def _initial_volume(case_dir: Path) -> float:
    with (case_dir / FRAMES_FILENAME).open("r", encoding="utf-8", newline="") as f:
        first = next(csv.DictReader(f))
    return float(first[FrameColumn.total_volume.value])


def volume_drift(initial_volume: float, reports: list[StepReport]) -> float:
    """最後のステップでの全体積の相対変化 |V - V_0| / V_0."""
    if not reports or initial_volume <= 0.0:
        return 0.0
    return abs(reports[-1].total_volume - initial_volume) / initial_volume


def splash_volume_study(out_dir: Path, resolution: int, frames: int) -> None:
    """体積制約の有無で、高速な衝突の間の体積の変化を比べる.

    ステップごとの |h| / V_0 と全体積を splash_steps.csv に、
    ケースごとの最大値と最終的な体積の変化を splash.csv に書く。
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    summary: list[list[object]] = []
    per_step: list[list[object]] = []
    for volume_constraint in (True, False):
        scene = _with_frames(
            SceneConfig.create_splash_volume(
                resolution, volume_constraint=volume_constraint
            ),
            frames,
        )
        case_dir = out_dir / f"volume_{int(volume_constraint)}"
        status, reports = _run_case(scene, case_dir)
        initial_volume = _initial_volume(case_dir)
        per_step.extend(
            [int(volume_constraint), r.step, r.time, r.volume_error, r.total_volume]
            for r in reports
        )
        summary.append(
            [
                int(volume_constraint),
                status,
                len(reports),
                max((r.volume_error for r in reports), default=0.0),
                volume_drift(initial_volume, reports),
            ]
        )
    _write_csv(
        out_dir / "splash.csv",
        [
            "volume_constraint",
            "exit_status",
            "steps",
            "max_volume_error",
            "volume_drift",
        ],
        summary,
    )
    _write_csv(
        out_dir / "splash_steps.csv",
        ["volume_constraint", "step", "time", "volume_error", "total_volume"],
        per_step,
    )


def _parse_args() -> _RunConfig:
    """スクリプト実行のための引数を読み込む."""
    parser = ArgumentParser(description="検証用のシーンをまとめて実行する.")

    parser.add_argument(
        "--study",
        default=_Study.ALL.value,
        choices=[v.value for v in _Study],
        help="実行する検証.",
    )
    parser.add_argument(
        "-o", "--out", type=Path, default=Path("data/processed/sweep"), help="出力先."
    )
    parser.add_argument("-r", "--resolution", type=int, default=64, help="x方向のセル数.")
    parser.add_argument("-f", "--frames", type=int, default=30, help="フレーム数.")

    parser.add_argument(
        "-v",
        "--verbosity",
        action="count",
        default=0,
        help="詳細メッセージのレベルを設定.",
    )

    args = parser.parse_args()

    return _RunConfig(**vars(args))


def _setup_logger(filepath: Path | None, loglevel: int) -> None:
    """ロガー設定を行う.

    Parameters
    ----------
    filepath : Path | None
        ログ出力するファイルパス. Noneの場合はファイル出力しない.

    loglevel : int
        出力するログレベル.

    """
    formatter = Formatter("[%(levelname)7s] %(asctime)s (%(name)s) %(message)s")
    loggers = [logging.getLogger(_PACKAGE_LOGGER)]
    if not _logger.name.startswith(f"{_PACKAGE_LOGGER}."):
        loggers.append(_logger)
    for logger in loggers:
        logger.setLevel(loglevel)

        # consoleログ
        console_handler = StreamHandler()
        console_handler.setLevel(loglevel)
        console_handler.setFormatter(formatter)
        logger.addHandler(console_handler)

        # ファイル出力するログ
        if filepath is not None:
            file_handler = RotatingFileHandler(
                filepath,
                encoding="utf-8",
                mode="a",
                maxBytes=10 * 1024 * 1024,  # 10 MB
                backupCount=1,
            )
            file_handler.setLevel(loglevel)
            file_handler.setFormatter(formatter)
            logger.addHandler(file_handler)


if __name__ == "__main__":
    try:
        _main()
    except Exception:
        _logger.exception("Unhandled error")
        sys.exit(1)
