"""格子上の場と固体形状をテキストファイルに書き出すモジュール.

場のファイルは1行目が "nx ny dx ox oy kind" のヘッダーで、
続く各行が y 方向の1行分 (x 方向に並んだ値) になる。
固体のファイルは頂点数 n、n 行の "x y"、辺数 m、m 行の "i j" の順に並ぶ。
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from src.internal.grid import (
    CellField,
    FaceField,
    FieldKind,
    FloatArray,
    GridDesc,
    IntArray,
)

_logger = logging.getLogger(__name__)

PHI_FILENAME = "phi.txt"
U_FILENAME = "u.txt"
V_FILENAME = "v.txt"
LABELS_FILENAME = "labels.txt"
SOLID_FILENAME = "solid.txt"

_HEADER_FIELDS = 6


def _header(desc: GridDesc, kind: FieldKind) -> str:
    ox, oy = desc.origin
    return f"{desc.nx} {desc.ny} {desc.dx!r} {ox!r} {oy!r} {kind.value}"


def write_field(
    filepath: Path, desc: GridDesc, kind: FieldKind, data: FloatArray | IntArray
) -> None:
    """場を1ファイルに書き出す. 整数配列は整数として書く."""
    arr = np.asarray(data)
    if arr.shape != desc.shape(kind):
        expected = desc.shape(kind)
        message = f"Field shape {arr.shape} does not match {kind.value} {expected}."
        raise ValueError(message)
    fmt = "%d" if np.issubdtype(arr.dtype, np.integer) else "%.17g"
    np.savetxt(filepath, arr.T, fmt=fmt, header=_header(desc, kind), comments="")


def read_field(filepath: Path) -> tuple[GridDesc, FieldKind, FloatArray]:
    """write_field で書いたファイルを読み込む."""
    with filepath.open("r", encoding="utf-8") as f:
        tokens = f.readline().split()
    if len(tokens) != _HEADER_FIELDS:
        message = f"Invalid field header in {filepath}: {' '.join(tokens)}"
        raise ValueError(message)
    desc = GridDesc(
        nx=int(tokens[0]),
        ny=int(tokens[1]),
        dx=float(tokens[2]),
        origin=(float(tokens[3]), float(tokens[4])),
    )
    kind = FieldKind(tokens[5])
    data = np.loadtxt(filepath, skiprows=1, ndmin=2).T
    if data.shape != desc.shape(kind):
        message = (
            f"Field data in {filepath} has shape {data.shape}, "
            f"expected {desc.shape(kind)}."
        )
        raise ValueError(message)
    return desc, kind, data


def write_polyline(filepath: Path, x: FloatArray, edges: IntArray) -> None:
    """頂点位置と辺を書き出す."""
    pts = np.asarray(x, dtype=np.float64).reshape(-1, 2)
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    lines = [str(pts.shape[0])]
    lines += [f"{p[0]!r} {p[1]!r}" for p in pts.tolist()]
    lines.append(str(e.shape[0]))
    lines += [f"{a} {b}" for a, b in e.tolist()]
    filepath.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_polyline(filepath: Path) -> tuple[FloatArray, IntArray]:
    """write_polyline で書いたファイルを読み込む."""
    lines = filepath.read_text(encoding="utf-8").splitlines()
    n = int(lines[0])
    pts = np.array([[float(t) for t in line.split()] for line in lines[1 : 1 + n]])
    m = int(lines[1 + n])
    edges = np.array(
        [[int(t) for t in line.split()] for line in lines[2 + n : 2 + n + m]],
        dtype=np.int64,
    )
    return pts.reshape(-1, 2), edges.reshape(-1, 2)


@dataclass(frozen=True)
class FrameData:
    """1フレーム分の出力."""

    phi: CellField
    velocity: FaceField
    labels: IntArray
    x: FloatArray
    edges: IntArray


def write_frame(frame_dir: Path, data: FrameData) -> None:
    """1フレーム分の場と固体形状をディレクトリに書き出す."""
    frame_dir.mkdir(parents=True, exist_ok=True)
    desc = data.phi.desc
    write_field(frame_dir / PHI_FILENAME, desc, FieldKind.CELL, data.phi.data)
    write_field(frame_dir / U_FILENAME, desc, FieldKind.FACE_X, data.velocity.u)
    write_field(frame_dir / V_FILENAME, desc, FieldKind.FACE_Y, data.velocity.v)
    write_field(frame_dir / LABELS_FILENAME, desc, FieldKind.CELL, data.labels)
    write_polyline(frame_dir / SOLID_FILENAME, data.x, data.edges)
    _logger.debug("Wrote frame: %s", frame_dir)


def load_frame(frame_dir: Path) -> FrameData:
    """write_frame で書いたディレクトリを読み込む."""
    desc, _, phi = read_field(frame_dir / PHI_FILENAME)
    _, _, u = read_field(frame_dir / U_FILENAME)
    _, _, v = read_field(frame_dir / V_FILENAME)
    _, _, labels = read_field(frame_dir / LABELS_FILENAME)
    x, edges = read_polyline(frame_dir / SOLID_FILENAME)
    return FrameData(
        phi=CellField(desc=desc, data=phi),
        velocity=FaceField(desc=desc, u=u, v=v),
        labels=labels.astype(np.int64),
        x=x,
        edges=edges,
    )
