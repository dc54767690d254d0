"""診断出力ファイルの列名."""

from enum import Enum


class DiagnosticsColumn(Enum):
    """diagnostics.csv の列. 定義順が列の順序になる."""

    step = "step"
    time = "time"
    dt = "dt"
    retried = "retried"
    newton_iterations = "newton_iterations"
    converged = "converged"
    penetrated = "penetrated"
    final_step_size = "final_step_size"
    final_residual = "final_residual"
    ccd_floor_hits = "ccd_floor_hits"
    num_pairs = "num_pairs"
    band_size = "band_size"
    volume_error = "volume_error"
    total_volume = "total_volume"
    min_distance = "min_distance"
    max_divergence = "max_divergence"
    bc_faces = "bc_faces"


class FrameColumn(Enum):
    """frames.csv の列."""

    frame = "frame"
    time = "time"
    steps = "steps"
    avg_newton_iterations = "avg_newton_iterations"
    min_distance = "min_distance"
    max_volume_error = "max_volume_error"
    total_volume = "total_volume"


class TimingColumn(Enum):
    """timings.csv の列."""

    step = "step"
    wall_time = "wall_time"
