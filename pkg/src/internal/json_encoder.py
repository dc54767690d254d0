"""numpy の値をJSONに変換するためのエンコーダーを提供するモジュール."""

import json
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel


class NumpyEncoder(json.JSONEncoder):
    """numpy の配列やスカラー、pydantic のモデルをJSONに変換するためのエンコーダー."""

    def default(self: "NumpyEncoder", o: Any) -> Any:  # noqa: ANN401
        """JSONで表現できない値を変換する."""
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, np.integer):
            return int(o)
        if isinstance(o, np.floating):
            return float(o)
        if isinstance(o, np.bool_):
            return bool(o)
        if isinstance(o, BaseModel):
            return o.model_dump(mode="json")
        if isinstance(o, Enum):
            return o.value
        if isinstance(o, Path):
            return str(o)
        return super().default(o)
