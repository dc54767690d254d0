"""固体と流体の結合シミュレーションを実行するスクリプト.

利用例:

```sh
python -m src.pfsim run --scene particle_collision --out data/processed/particle -vv
python -m src.pfsim run --scene scene.json --out data/processed/custom --cfl 0.7
python -m src.pfsim list
```
"""

import logging
import sys
from argparse import ArgumentParser
from enum import Enum
from logging import Formatter, StreamHandler
from logging.handlers import RotatingFileHandler
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from src.internal.contact import InterpScheme
from src.internal.sim_driver import EXIT_CONFIG_ERROR, EXIT_OK, run
from src.scene.scene_config import SceneConfig, builtin_scenes

_logger = logging.getLogger(__name__)

_PACKAGE_LOGGER = "src"


class _Command(Enum):
    """サブコマンド."""

    RUN = "run"
    LIST = "list"


class _ListConfig(BaseModel):
    """list サブコマンドのオプション."""

    verbosity: int = Field(default=0, description="ログレベル.")

    model_config = ConfigDict(frozen=True)


class _RunConfig(BaseModel):
    """run サブコマンドのオプション."""

    scene: str = Field(description="シーンファイルか組み込みシーン名.")
    out: Path = Field(description="出力ディレクトリ.")

    frames: int | None = Field(default=None, ge=0, description="出力するフレーム数.")
    cfl: float | None = Field(default=None, gt=0.0, description="CFL 数.")
    scheme: InterpScheme | None = Field(default=None, description="距離の補間方式.")
    no_line_search: bool = Field(default=False, description="直線探索を行わない.")
    no_ccd: bool = Field(default=False, description="CCD を行わない.")
    no_volume_constraint: bool = Field(default=False, description="体積制約を課さない.")
    no_contact_barrier: bool = Field(
        default=False, description="接触バリアを使わない (Neumann 境界のみ)."
    )
    seed: int | None = Field(default=None, ge=0, description="乱数シード.")

    verbosity: int = Field(description="ログレベル.")

    model_config = ConfigDict(frozen=True)


def main(argv: list[str] | None = None) -> int:
    """コマンドラインのエントリポイント. 終了コードを返す."""
    try:
        config = _parse_args(argv)
    except ValidationError as e:
        sys.stderr.write(f"Invalid arguments: {e}\n")
        return EXIT_CONFIG_ERROR

    if isinstance(config, _ListConfig):
        sys.stdout.write("\n".join(builtin_scenes()) + "\n")
        return EXIT_OK

    # ログ設定
    loglevel = {
        0: logging.ERROR,
        1: logging.WARNING,
        2: logging.INFO,
        3: logging.DEBUG,
    }.get(config.verbosity, logging.DEBUG)
    config.out.mkdir(parents=True, exist_ok=True)
    _setup_logger(config.out / "pfsim.log", loglevel=loglevel)
    _logger.info(config)

    try:
        scene = apply_overrides(load_scene(config.scene), config)
    except (ValidationError, ValueError, OSError):
        _logger.exception("Invalid scene: %s", config.scene)
        return EXIT_CONFIG_ERROR

    _logger.info("Running scene %s -> %s", scene.name, config.out)
    status = run(scene, config.out)
    _logger.info("Finished with exit status %d.", status)
    return status


def load_scene(name_or_path: str) -> SceneConfig:
    """シーンファイルを読み込むか、組み込みシーンを作成する."""
    path = Path(name_or_path)
    if path.is_file():
        return SceneConfig.load(path)
    factory = builtin_scenes().get(name_or_path)
    if factory is None:
        message = f"Unknown scene: {name_or_path}"
        raise ValueError(message)
    return factory()


def apply_overrides(scene: SceneConfig, config: _RunConfig) -> SceneConfig:
    """コマンドライン引数で指定された値でシーン設定を上書きする."""
    update: dict[str, object] = {}
    if config.frames is not None:
        update["output"] = scene.output.model_copy(
            update={"end_time": config.frames / scene.output.frame_rate}
        )
    if config.cfl is not None:
        update["cfl"] = config.cfl
    if config.scheme is not None:
        update["contact"] = scene.contact.model_copy(update={"scheme": config.scheme})
    disabled = (
        config.no_line_search,
        config.no_ccd,
        config.no_volume_constraint,
        config.no_contact_barrier,
    )
    if any(disabled):
        toggles = scene.toggles
        update["toggles"] = toggles.model_copy(
            update={
                "line_search": toggles.line_search and not config.no_line_search,
                "ccd": toggles.ccd and not config.no_ccd,
                "volume_constraint": toggles.volume_constraint
                and not config.no_volume_constraint,
                "contact_barrier": toggles.contact_barrier
                and not config.no_contact_barrier,
            }
        )
    if config.seed is not None:
        update["seed"] = config.seed
    return scene.model_copy(update=update) if update else scene


def _parse_args(argv: list[str] | None = None) -> _RunConfig | _ListConfig:
    """スクリプト実行のための引数を読み込む."""
    parser = ArgumentParser(description="固体と流体の結合シミュレーションを実行する.")
    subparsers = parser.add_subparsers(dest="command", required=True)

    run_parser = subparsers.add_parser("run", help="シーンを実行する.")
    run_parser.add_argument("--scene", required=True, help="シーンファイルか組み込みシーン名.")
    run_parser.add_argument("--out", required=True, type=Path, help="出力ディレクトリ.")
    run_parser.add_argument("--frames", type=int, default=None, help="出力するフレーム数.")
    run_parser.add_argument("--cfl", type=float, default=None, help="CFL 数.")
    run_parser.add_argument(
        "--scheme",
        default=None,
        choices=[v.value for v in InterpScheme],
        help="距離の補間方式.",
    )
    run_parser.add_argument("--no-line-search", action="store_true", help="直線探索を行わない.")
    run_parser.add_argument("--no-ccd", action="store_true", help="CCD を行わない.")
    run_parser.add_argument(
        "--no-volume-constraint", action="store_true", help="体積制約を課さない."
    )
    run_parser.add_argument(
        "--no-contact-barrier",
        action="store_true",
        help="接触バリアを使わず、Neumann 境界だけで固体を扱う.",
    )
    run_parser.add_argument("--seed", type=int, default=None, help="乱数シード.")
    run_parser.add_argument(
        "-v",
        "--verbosity",
        action="count",
        default=0,
        help="詳細メッセージのレベルを設定.",
    )

    list_parser = subparsers.add_parser("list", help="組み込みシーンの名前を表示する.")
    list_parser.add_argument("-v", "--verbosity", action="count", default=0)

    args = vars(parser.parse_args(argv))
    command = _Command(args.pop("command"))
    if command == _Command.LIST:
        return _ListConfig(**args)
    return _RunConfig(**args)


def _setup_logger(filepath: Path | None, loglevel: int) -> None:
    """ロガー設定を行う.

    Parameters
    ----------
    filepath : Path | None
        ログ出力するファイルパス. Noneの場合はファイル出力しない.

    loglevel : int
        出力するログレベル.

    Notes
    -----
    パッケージ全体のロガーにファイル出力とコンソール出力を設定する。
    スクリプトとして実行した場合はこのモジュールのロガーにも設定する。

    """
    loggers = [logging.getLogger(_PACKAGE_LOGGER)]
    if not _logger.name.startswith(f"{_PACKAGE_LOGGER}."):
        loggers.append(_logger)
    formatter = Formatter("[%(levelname)7s] %(asctime)s (%(name)s) %(message)s")

    for logger in loggers:
        logger.setLevel(loglevel)
        for handler in list(logger.handlers):
            logger.removeHandler(handler)
            handler.close()

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
        sys.exit(main())
    except Exception:
        _logger.exception("Unhandled error")
        sys.exit(1)
