import json
from dataclasses import replace

import numpy as np
import pytest

from src.internal import sim_driver
from src.internal.coupled_opt import newton_solve
from src.internal.diagnostics import load_diagnostics
from src.internal.errors import (
    PenetrationError,
    SolverDivergedError,
    StepFailedError,
)
from src.internal.field_io import load_frame
from src.internal.levelset import total_volume
from src.internal.sim_driver import (
    EXIT_OK,
    FRAMES_DIRNAME,
    SimContext,
    Stage,
    initial_state,
    next_dt,
    run,
    step,
)
from src.scene.scene_config import (
    DropletConfig,
    FluidConfig,
    GridConfig,
    OutputConfig,
    ParticleConfig,
    SceneConfig,
    SolidConfig,
    ToggleConfig,
)


def _free_particle_scene() -> SceneConfig:
    return SceneConfig(
        grid=GridConfig(resolution=16),
        fluid=FluidConfig(gravity=(0.0, -10.0)),
        solid=SolidConfig(particles=[ParticleConfig(positions=[(0.5, 0.5)])]),
    )


def _static_droplet_scene() -> SceneConfig:
    return SceneConfig(
        grid=GridConfig(resolution=24),
        fluid=FluidConfig(gravity=(0.0, 0.0)),
        droplets=[DropletConfig(center=(0.5, 0.5), radius=0.25)],
    )


def test_stage_order():
    scene = _static_droplet_scene()
    ctx = SimContext.from_scene(scene)
    stages: list[Stage] = []
    step(initial_state(scene, ctx), 0.01, ctx, stages.append)
    assert stages == list(Stage)


def test_empty_scene_steps():
    scene = SceneConfig(grid=GridConfig(resolution=16))
    ctx = SimContext.from_scene(scene)
    state = initial_state(scene, ctx)
    assert not state.has_fluid
    new_state, report = step(state, 0.01, ctx)
    assert new_state.step == 1
    assert new_state.time == pytest.approx(0.01)
    assert report.min_distance is None
    assert report.band_size == 0
    assert report.newton.converged


def test_free_fall_matches_implicit_euler():
    scene = _free_particle_scene()
    ctx = SimContext.from_scene(scene)
    state = initial_state(scene, ctx)
    dts = [0.01, 0.02, 0.01]
    for dt in dts:
        state, _ = step(state, dt, ctx)
    assert state.solid.v[0, 1] == pytest.approx(-10.0 * sum(dts))
    assert state.solid.v[0, 0] == pytest.approx(0.0, abs=1e-12)
    expected_y = 0.5 - (0.01 * 0.1 + 0.02 * 0.3 + 0.01 * 0.4)
    assert state.solid.x[0, 1] == pytest.approx(expected_y)


def test_static_droplet_stays_at_rest():
    scene = _static_droplet_scene()
    ctx = SimContext.from_scene(scene)
    state = initial_state(scene, ctx)
    v0 = total_volume(state.ls)
    for _ in range(2):
        state, report = step(state, 0.01, ctx)
        assert report.newton.converged
        assert report.volume_error <= 1e-6
    assert state.u.max_abs() < 1e-8
    assert total_volume(state.ls) == pytest.approx(v0, rel=1e-2)


def test_step_retries_with_half_dt():
    scene = _free_particle_scene()
    ctx = SimContext.from_scene(scene)
    calls = {"n": 0}

    def fail_once(stage: Stage) -> None:
        if stage is Stage.OPTIMIZE and calls["n"] == 0:
            calls["n"] += 1
            message = "injected"
            raise SolverDivergedError(message)

    state, report = step(initial_state(scene, ctx), 0.02, ctx, fail_once)
    assert report.retried
    assert report.dt == pytest.approx(0.01)
    assert state.time == pytest.approx(0.01)


def test_step_failure_after_retry():
    scene = _free_particle_scene()
    ctx = SimContext.from_scene(scene)

    def always_fail(stage: Stage) -> None:
        if stage is Stage.OPTIMIZE:
            message = "injected"
            raise SolverDivergedError(message)

    with pytest.raises(StepFailedError) as info:
        step(initial_state(scene, ctx), 0.02, ctx, always_fail)
    assert info.value.report is not None
    assert info.value.report.retried


def _droplet_below_particle_scene(*, ccd: bool) -> SceneConfig:
    return SceneConfig(
        grid=GridConfig(resolution=24),
        droplets=[DropletConfig(center=(0.5, 0.4), radius=0.2)],
        solid=SolidConfig(particles=[ParticleConfig(positions=[(0.5, 0.66)])]),
        toggles=ToggleConfig(ccd=ccd),
    )


def _capped_newton(x_override: np.ndarray | None):
    def solve(*args, **kwargs):
        result = newton_solve(*args, **kwargs)
        stats = result.stats.model_copy(update={"converged": False})
        x = result.x if x_override is None else x_override
        return replace(result, x=x, stats=stats)

    return solve


def test_penetrating_step_is_retried_then_fails(monkeypatch):
    monkeypatch.setattr(
        sim_driver, "newton_solve", _capped_newton(np.array([[0.5, 0.4]]))
    )
    scene = _droplet_below_particle_scene(ccd=True)
    ctx = SimContext.from_scene(scene)
    with pytest.raises(StepFailedError) as info:
        step(initial_state(scene, ctx), 0.01, ctx)
    assert isinstance(info.value.__cause__, PenetrationError)
    assert info.value.report.retried


def test_penetration_is_reported_without_ccd(monkeypatch):
    monkeypatch.setattr(
        sim_driver, "newton_solve", _capped_newton(np.array([[0.5, 0.4]]))
    )
    scene = _droplet_below_particle_scene(ccd=False)
    ctx = SimContext.from_scene(scene)
    _, report = step(initial_state(scene, ctx), 0.01, ctx)
    assert not report.retried
    assert report.min_distance is not None
    assert report.min_distance <= 0.0


def test_capped_step_outside_fluid_is_accepted(monkeypatch):
    monkeypatch.setattr(sim_driver, "newton_solve", _capped_newton(None))
    scene = _droplet_below_particle_scene(ccd=True)
    ctx = SimContext.from_scene(scene)
    _, report = step(initial_state(scene, ctx), 0.01, ctx)
    assert not report.newton.converged
    assert not report.retried
    assert report.min_distance > 0.0


def test_next_dt_limits():
    scene = _free_particle_scene()
    ctx = SimContext.from_scene(scene)
    state = initial_state(scene, ctx)
    gravity_bound = np.sqrt((1.0 / 16) / 10.0)
    assert next_dt(state, ctx, 10.0) == pytest.approx(gravity_bound)
    assert next_dt(state, ctx, 0.01) == pytest.approx(0.01)


def test_initial_state_velocity_and_volume():
    scene = SceneConfig(
        grid=GridConfig(resolution=32),
        droplets=[DropletConfig(center=(0.5, 0.5), radius=0.2, velocity=(0.0, -1.0))],
    )
    ctx = SimContext.from_scene(scene)
    state = initial_state(scene, ctx)
    assert state.ls.num_components == 1
    assert state.ls.targets[0] == pytest.approx(total_volume(state.ls))
    assert state.u.v[16, 16] == -1.0
    assert state.u.v[16, 31] == 0.0


def test_run_writes_outputs(tmp_path):
    scene = _static_droplet_scene().model_copy(
        update={"output": OutputConfig(frame_rate=50.0, end_time=0.04)}
    )
    assert run(scene, tmp_path) == EXIT_OK
    frames = sorted((tmp_path / FRAMES_DIRNAME).iterdir())
    assert [f.name for f in frames] == ["frame_00000", "frame_00001", "frame_00002"]
    frame = load_frame(frames[-1])
    assert frame.phi.desc.nx == 24
    reports = load_diagnostics(tmp_path / "diagnostics.csv")
    assert reports
    assert reports[-1].time == pytest.approx(0.04)
    summary = json.loads((tmp_path / "summary.json").read_text(encoding="utf-8"))
    assert summary["exit_status"] == EXIT_OK
    assert summary["frames"] == 2
    assert summary["steps"] == len(reports)


def test_run_is_deterministic(tmp_path):
    scene = _static_droplet_scene().model_copy(
        update={
            "output": OutputConfig(frame_rate=50.0, end_time=0.02, write_fields=False),
            "perturbation": 0.01,
            "seed": 3,
        }
    )
    run(scene, tmp_path / "a")
    run(scene, tmp_path / "b")
    first = (tmp_path / "a" / "diagnostics.csv").read_bytes()
    assert first == (tmp_path / "b" / "diagnostics.csv").read_bytes()
    assert not (tmp_path / "a" / FRAMES_DIRNAME).exists()


@pytest.mark.slow
def test_particle_collision_does_not_penetrate(tmp_path):
    scene = SceneConfig.create_particle_collision(resolution=48).model_copy(
        update={"output": OutputConfig(frame_rate=30.0, end_time=0.3)}
    )
    assert run(scene, tmp_path) == EXIT_OK
    reports = load_diagnostics(tmp_path / "diagnostics.csv")
    distances = [r.min_distance for r in reports if r.min_distance is not None]
    assert distances
    assert min(distances) > 0.0
