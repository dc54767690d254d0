import numpy as np
import pytest

from src.internal.solid import (
    ElasticParams,
    SolidState,
    check_edge_lengths,
    correct_velocities,
    elastic_energy,
    elastic_gradient,
    elastic_hessian,
    lumped_mass_matrix,
    predict_positions,
    turning_angles,
)

_POINTS = np.array([[0.0, 0.0], [1.0, 0.1], [2.0, -0.1], [3.0, 0.2]])


def _deformed() -> tuple[SolidState, np.ndarray]:
    solid = SolidState.from_polyline(_POINTS, line_density=1.0)
    rng = np.random.default_rng(11)
    return solid, _POINTS + 0.1 * rng.standard_normal(_POINTS.shape)


def _numeric_gradient(solid, x, params, h=1e-6):
    flat = x.ravel()
    grad = np.zeros(flat.size)
    for k in range(flat.size):
        xp, xm = flat.copy(), flat.copy()
        xp[k] += h
        xm[k] -= h
        ep = elastic_energy(solid, xp.reshape(-1, 2), params)
        em = elastic_energy(solid, xm.reshape(-1, 2), params)
        grad[k] = (ep - em) / (2 * h)
    return grad


def test_polyline_masses_and_rest_state():
    solid = SolidState.from_polyline(
        np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]), line_density=2.0
    )
    np.testing.assert_allclose(solid.mass, [1.0, 2.0, 1.0])
    np.testing.assert_allclose(solid.rest_len, [1.0, 1.0])
    np.testing.assert_allclose(solid.rest_angle, [0.0])
    params = ElasticParams(k_stretch=5.0, k_bend=1.0)
    assert elastic_energy(solid, solid.x, params) == 0.0
    np.testing.assert_allclose(elastic_gradient(solid, solid.x, params), 0.0)


def test_turning_angle_sign():
    x = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [2.0, 1.0]])
    angles = turning_angles(x, np.array([[0, 1, 2], [1, 2, 3]]))
    np.testing.assert_allclose(angles, [np.pi / 2, -np.pi / 2])


def test_polyline_needs_two_vertices():
    with pytest.raises(ValueError):
        SolidState.from_polyline(np.array([[0.0, 0.0]]), line_density=1.0)


def test_state_rejects_bad_mass():
    with pytest.raises(ValueError):
        SolidState.from_points(np.array([[0.5, 0.5]]), mass=0.0)


def test_stretch_energy_value():
    solid = SolidState.from_polyline(np.array([[0.0, 0.0], [2.0, 0.0]]), 1.0)
    x = np.array([[0.0, 0.0], [3.0, 0.0]])
    params = ElasticParams(k_stretch=4.0)
    # 0.5 * (k / l0) * (l - l0)^2
    assert elastic_energy(solid, x, params) == pytest.approx(1.0)


@pytest.mark.parametrize(
    "params",
    [
        ElasticParams(k_stretch=3.0, project_psd=False),
        ElasticParams(k_bend=0.5, project_psd=False),
        ElasticParams(k_stretch=3.0, k_bend=0.5, project_psd=False),
    ],
)
def test_gradient_matches_finite_difference(params):
    solid, x = _deformed()
    np.testing.assert_allclose(
        elastic_gradient(solid, x, params),
        _numeric_gradient(solid, x, params),
        rtol=1e-5,
        atol=1e-6,
    )


@pytest.mark.parametrize(
    "params",
    [
        ElasticParams(k_stretch=3.0, project_psd=False),
        ElasticParams(k_bend=0.5, project_psd=False),
    ],
)
def test_hessian_matches_finite_difference(params):
    solid, x = _deformed()
    h = 1e-6
    flat = x.ravel()
    hess = elastic_hessian(solid, x, params).toarray()
    for k in range(flat.size):
        xp, xm = flat.copy(), flat.copy()
        xp[k] += h
        xm[k] -= h
        column = (
            elastic_gradient(solid, xp.reshape(-1, 2), params)
            - elastic_gradient(solid, xm.reshape(-1, 2), params)
        ) / (2 * h)
        np.testing.assert_allclose(hess[:, k], column, rtol=1e-4, atol=1e-5)


def test_gradient_is_translation_invariant():
    solid, x = _deformed()
    grad = elastic_gradient(solid, x, ElasticParams(k_stretch=3.0, k_bend=0.5))
    np.testing.assert_allclose(grad.reshape(-1, 2).sum(axis=0), 0.0, atol=1e-10)


@pytest.mark.parametrize("angle", [0.3, np.pi / 2, 2.5])
def test_energy_is_rotation_invariant(angle):
    solid, x = _deformed()
    params = ElasticParams(k_stretch=3.0, k_bend=0.5)
    c, s = np.cos(angle), np.sin(angle)
    rotation = np.array([[c, -s], [s, c]])
    rotated = x @ rotation.T + np.array([0.4, -1.3])
    assert elastic_energy(solid, rotated, params) == pytest.approx(
        elastic_energy(solid, x, params), rel=1e-10
    )


def test_projected_hessian_is_positive_semidefinite():
    solid = SolidState.from_polyline(_POINTS, line_density=1.0)
    offsets = np.array([[0.0, 0.0], [0.0, 0.3], [0.0, -0.2], [0.0, 0.1]])
    compressed = 0.5 * _POINTS + offsets
    hess = elastic_hessian(
        solid, compressed, ElasticParams(k_stretch=3.0, k_bend=0.5, project_psd=True)
    ).toarray()
    np.testing.assert_allclose(hess, hess.T, atol=1e-12)
    assert np.linalg.eigvalsh(hess).min() >= -1e-9


def test_predict_keeps_fixed_vertices():
    solid = SolidState.from_points(
        np.array([[0.2, 0.5], [0.8, 0.5]]),
        mass=1.0,
        fixed=np.array([True, False]),
        velocity=(1.0, 0.0),
    )
    x_star = predict_positions(solid, np.array([0.0, -10.0]), 0.1)
    np.testing.assert_allclose(x_star, [[0.2, 0.5], [0.9, 0.4]])


def test_lumped_mass_skips_fixed():
    solid = SolidState.from_points(
        np.array([[0.1, 0.1], [0.2, 0.2], [0.3, 0.3]]),
        mass=np.array([1.0, 2.0, 3.0]),
        fixed=np.array([False, True, False]),
    )
    dofs, diag = lumped_mass_matrix(solid)
    np.testing.assert_array_equal(dofs, [0, 1, 4, 5])
    np.testing.assert_allclose(diag, [1.0, 1.0, 3.0, 3.0])


def test_velocity_correction_with_damping():
    x_old = np.array([[0.0, 0.0]])
    x_new = np.array([[0.1, -0.2]])
    v = correct_velocities(x_new, x_old, 0.1, 0.0)
    np.testing.assert_allclose(v, [[1.0, -2.0]])
    damped = correct_velocities(x_new, x_old, 0.1, 5.0)
    np.testing.assert_allclose(damped, [[0.5, -1.0]])
    np.testing.assert_allclose(correct_velocities(x_new, x_old, 0.1, 50.0), 0.0)


def test_concatenate_offsets_connectivity():
    a = SolidState.from_points(np.array([[0.1, 0.1]]), mass=1.0)
    b = SolidState.from_polyline(np.array([[0.0, 0.0], [0.1, 0.0], [0.2, 0.0]]), 1.0)
    merged = SolidState.concatenate([a, b], damping=0.5)
    assert merged.num_vertices == 4
    np.testing.assert_array_equal(merged.edges, [[1, 2], [2, 3]])
    np.testing.assert_array_equal(merged.bend_triples, [[1, 2, 3]])
    assert merged.damping == 0.5
    assert SolidState.concatenate([]).num_vertices == 0


def test_check_edge_lengths():
    solid = SolidState.from_polyline(np.array([[0.0, 0.0], [0.3, 0.0]]), 1.0)
    assert check_edge_lengths(solid, solid.x, 0.1) == pytest.approx(0.3)
    assert check_edge_lengths(SolidState.empty(), np.zeros((0, 2)), 0.1) == 0.0
