import numpy as np
import pytest

from src.internal.errors import DegenerateGradientError, NoInterfaceError
from src.internal.grid import CellField, FieldKind, GridDesc
from src.internal.levelset import (
    LevelSet,
    attribute_cells,
    connected_components,
    discrete_volume,
    heaviside,
    heaviside_prime,
    narrowband_width,
    normal_and_curvature,
    redistance,
    sdf_box,
    sdf_circle,
    select_narrowband,
    total_volume,
    update_component_targets,
    volume_errors,
)


def _desc(n: int = 64) -> GridDesc:
    return GridDesc(nx=n, ny=n, dx=1.0 / n)


def _circle(desc: GridDesc, center=(0.5, 0.5), radius=0.25) -> LevelSet:
    phi = CellField(desc=desc, data=sdf_circle(desc, center, radius))
    return LevelSet.from_phi(phi)


def test_heaviside_values():
    assert heaviside(0.0, 10.0) == pytest.approx(0.5)
    assert heaviside(-1.0, 100.0) == 1.0
    assert heaviside(1.0, 100.0) == 0.0
    assert heaviside_prime(0.0, 10.0) == pytest.approx(-5.0)
    assert heaviside_prime(1.0, 100.0) == 0.0


def test_heaviside_prime_matches_finite_difference():
    k, phi, h = 7.0, 0.03, 1e-6
    fd = (heaviside(phi + h, k) - heaviside(phi - h, k)) / (2 * h)
    assert heaviside_prime(phi, k) == pytest.approx(fd, rel=1e-6)


def test_connected_components_and_attribution():
    desc = _desc(32)
    phi = np.minimum(
        sdf_circle(desc, (0.25, 0.5), 0.1), sdf_circle(desc, (0.75, 0.5), 0.1)
    )
    labels, count = connected_components(phi)
    assert count == 2
    assert np.all(labels[phi >= 0.0] == -1)
    attribution = attribute_cells(labels, phi)
    assert np.all(attribution >= 0)
    assert attribution[0, 16] == labels[8, 16]
    assert attribution[31, 16] == labels[24, 16]


def test_attribution_without_fluid():
    labels = np.full((4, 4), -1, dtype=np.int64)
    assert np.all(attribute_cells(labels, np.ones((4, 4))) == -1)


@pytest.mark.parametrize(
    ("row", "expected"),
    [
        ([-0.1, 0.05, -0.5], [0, 0, 1]),
        ([-0.5, 0.05, -0.1], [0, 1, 1]),
        ([-0.3, 0.05, -0.3], [0, 0, 1]),
        ([-0.3, 0.2, 0.4, -0.1], [0, 0, 1, 1]),
    ],
)
def test_attribution_prefers_smallest_adjacent_magnitude(row, expected):
    phi = np.array([row])
    labels, _ = connected_components(phi)
    np.testing.assert_array_equal(attribute_cells(labels, phi)[0], expected)


def test_initial_targets_are_current_volume():
    ls = _circle(_desc())
    assert ls.num_components == 1
    np.testing.assert_allclose(discrete_volume(ls), ls.targets)
    np.testing.assert_allclose(volume_errors(ls), 0.0)
    assert ls.targets[0] == pytest.approx(np.pi * 0.25**2, rel=0.05)
    assert total_volume(ls) == pytest.approx(ls.targets[0])


def test_level_set_rejects_bad_targets():
    ls = _circle(_desc(16))
    with pytest.raises(ValueError):
        ls.with_targets(np.array([1.0, 2.0]))
    with pytest.raises(ValueError):
        ls.with_targets(np.array([0.0]))


def test_redistance_recovers_distance():
    desc = _desc()
    exact = sdf_circle(desc, (0.5, 0.5), 0.25)
    ls = LevelSet.from_phi(CellField(desc=desc, data=3.0 * exact))
    out = redistance(ls).phi.data
    assert np.all(np.sign(out) == np.sign(3.0 * exact))
    near = np.abs(exact) < 3.0 * desc.dx
    assert np.max(np.abs(out[near] - exact[near])) < desc.dx


def _edge_crossings(phi: np.ndarray, axis: int) -> tuple[np.ndarray, np.ndarray]:
    a = phi[:-1, :] if axis == 0 else phi[:, :-1]
    b = phi[1:, :] if axis == 0 else phi[:, 1:]
    change = (a < 0.0) != (b < 0.0)
    theta = np.where(change, a / np.where(change, a - b, 1.0), np.nan)
    return change, theta


def test_redistance_preserves_zero_crossings():
    desc = _desc()
    xs, ys = desc.positions(FieldKind.CELL)
    phi = (xs - 0.45) ** 2 + (ys - 0.55) ** 2 - 0.3**2
    out = redistance(LevelSet.from_phi(CellField(desc=desc, data=phi))).phi.data
    for axis in (0, 1):
        change, theta = _edge_crossings(phi, axis)
        change_out, theta_out = _edge_crossings(out, axis)
        np.testing.assert_array_equal(change, change_out)
        assert np.max(np.abs(theta[change] - theta_out[change])) <= 0.5


def test_redistance_requires_interface():
    desc = _desc(16)
    air = np.ones(desc.shape(FieldKind.CELL))
    ls = LevelSet.from_phi(CellField(desc=desc, data=air))
    with pytest.raises(NoInterfaceError):
        redistance(ls)


def test_normal_and_curvature_of_circle():
    ls = _circle(_desc(128))
    normal, kappa = normal_and_curvature(ls, np.array([0.75, 0.5]))
    np.testing.assert_allclose(normal, [1.0, 0.0], atol=1e-3)
    assert kappa == pytest.approx(4.0, rel=0.05)


def test_normal_degenerate_gradient():
    desc = _desc(16)
    air = np.ones(desc.shape(FieldKind.CELL))
    ls = LevelSet.from_phi(CellField(desc=desc, data=air))
    with pytest.raises(DegenerateGradientError):
        normal_and_curvature(ls, np.array([0.5, 0.5]))


def test_narrowband_selection():
    desc = _desc(32)
    ls = _circle(desc)
    band = select_narrowband(ls, 0.05)
    assert not band.no_fluid
    assert np.all(np.diff(band.cells) > 0)
    assert np.all(np.abs(ls.phi.data.ravel()[band.cells]) < 0.05)
    np.testing.assert_array_equal(band.index_of[band.cells], np.arange(band.size))
    assert np.count_nonzero(band.index_of >= 0) == band.size


def test_narrowband_width_has_floor():
    assert select_narrowband(_circle(_desc(32)), 0.0).width == pytest.approx(3.0 / 32)
    assert narrowband_width(0.0, 0.1, 0.01) == pytest.approx(0.03)
    assert narrowband_width(2.0, 0.1, 0.01) == pytest.approx(0.6)


def test_narrowband_without_fluid():
    desc = _desc(16)
    air = np.ones(desc.shape(FieldKind.CELL))
    ls = LevelSet.from_phi(CellField(desc=desc, data=air))
    band = select_narrowband(ls, 0.1)
    assert band.no_fluid
    assert band.size == 0


def test_targets_split_proportionally():
    targets = update_component_targets(
        np.array([[0, -1, 1, 1]]),
        np.array([0.3, 0.6]),
        np.array([[0, 0, 0, 0]]),
        np.array([1.0]),
    )
    np.testing.assert_allclose(targets, [1.0 / 3.0, 2.0 / 3.0])


def test_targets_merge_sums():
    targets = update_component_targets(
        np.array([[0, 0, 0, 0]]),
        np.array([0.8]),
        np.array([[0, 0, 1, 1]]),
        np.array([0.4, 0.5]),
    )
    np.testing.assert_allclose(targets, [0.9])


def test_new_component_keeps_own_volume():
    targets = update_component_targets(
        np.array([[0, -1, 1]]),
        np.array([0.2, 0.1]),
        np.array([[0, -1, -1]]),
        np.array([0.25]),
    )
    np.testing.assert_allclose(targets, [0.25, 0.1])


def test_with_phi_carries_targets():
    desc = _desc()
    ls = _circle(desc).with_targets(np.array([0.2]))
    moved = ls.with_phi(sdf_circle(desc, (0.52, 0.5), 0.25))
    np.testing.assert_allclose(moved.targets, [0.2])


def test_sdf_box_sign():
    desc = _desc(16)
    phi = sdf_box(desc, (0.0, 0.0), (1.0, 0.5))
    xs, ys = desc.positions(FieldKind.CELL)
    assert np.all(phi[ys < 0.5] < 0.0)
    assert np.all(phi[ys > 0.5] > 0.0)
    assert phi[8, 12] == pytest.approx(ys[8, 12] - 0.5)
