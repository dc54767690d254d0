import numpy as np
import pytest

from src.internal.contact import (
    CCD_MIN_STEP,
    ContactParams,
    InterpScheme,
    PrimitivePair,
    anchor_of,
    barrier,
    barrier_d1,
    barrier_d2,
    barrier_energy_grad_hess,
    ccd_filter,
    closest_segment_params,
    collect_pairs,
    distance_gradient,
    distance_terms,
    pair_distances,
    signed_distance,
    vertex_distances,
)
from src.internal.errors import NonPositiveDistanceError
from src.internal.grid import CellField, FieldKind, GridDesc

_DESC = GridDesc(nx=16, ny=16, dx=1.0 / 16)


def _plane(desc: GridDesc = _DESC, height: float = 0.5) -> CellField:
    _, ys = desc.positions(FieldKind.CELL)
    return CellField(desc=desc, data=ys - height)


def _wavy(desc: GridDesc = _DESC) -> CellField:
    xs, ys = desc.positions(FieldKind.CELL)
    return CellField(desc=desc, data=ys - 0.5 + 0.05 * np.sin(6.0 * xs))


def _pair(phi: CellField, x: np.ndarray, vertex: int = 0) -> PrimitivePair:
    return PrimitivePair(vertex=vertex, anchor=anchor_of(phi, x), d=0.0)


def test_barrier_values():
    assert barrier(0.2, 0.1) == 0.0
    assert barrier(0.1, 0.1) == 0.0
    assert barrier(0.05, 0.1) > 0.0
    assert barrier(0.01, 0.1) > barrier(0.05, 0.1)
    with pytest.raises(NonPositiveDistanceError):
        barrier(0.0, 0.1)
    with pytest.raises(NonPositiveDistanceError):
        barrier_d1(np.array([0.05, -1e-3]), 0.1)


@pytest.mark.parametrize("d", [0.01, 0.03, 0.07, 0.099])
def test_barrier_derivatives_match_finite_difference(d):
    dhat, h = 0.1, 1e-7
    fd1 = (barrier(d + h, dhat) - barrier(d - h, dhat)) / (2 * h)
    fd2 = (barrier_d1(d + h, dhat) - barrier_d1(d - h, dhat)) / (2 * h)
    assert barrier_d1(d, dhat) == pytest.approx(fd1, rel=1e-5)
    assert barrier_d2(d, dhat) == pytest.approx(fd2, rel=1e-5)
    assert barrier_d1(d, dhat) < 0.0
    assert barrier_d2(d, dhat) > 0.0


def test_barrier_is_decreasing_inside_activation_range():
    dhat = 0.1
    d = np.linspace(1e-4, dhat * (1.0 - 1e-6), 200)
    values = barrier(d, dhat)
    assert np.all(np.diff(values) < 0.0)
    assert np.all(barrier_d1(d, dhat) < 0.0)
    assert np.all(values > 0.0)


def test_default_params():
    params = ContactParams.create_default(0.1, 1000.0)
    assert params.dhat == pytest.approx(0.05)
    assert params.kappa == pytest.approx(100.0)
    assert params.scheme is InterpScheme.LINEAR


@pytest.mark.parametrize("scheme", list(InterpScheme))
def test_plane_distance_is_exact(scheme):
    phi = _plane()
    x = np.array([0.43, 0.56])
    pair = _pair(phi, x)
    assert signed_distance(phi, x, pair, scheme) == pytest.approx(0.06)
    d_phi, d_x = distance_gradient(phi, x, pair, scheme)
    np.testing.assert_allclose(d_x, [0.0, 1.0], atol=1e-12)
    assert d_phi.sum() == pytest.approx(1.0)
    assert np.all(d_phi >= 0.0)


def test_linear_anchor_extrapolates_outside_dual_cell():
    phi = _plane()
    x0 = np.array([0.43, 0.56])
    pair = _pair(phi, x0)
    moved = np.array([0.43, 0.7])
    assert anchor_of(phi, moved) != pair.anchor
    assert signed_distance(phi, moved, pair, InterpScheme.LINEAR) == pytest.approx(0.2)


@pytest.mark.parametrize("scheme", list(InterpScheme))
def test_distance_gradient_matches_finite_difference(scheme):
    phi = _wavy()
    x = np.array([0.41, 0.53])
    pair = _pair(phi, x)
    d_phi, d_x = distance_gradient(phi, x, pair, scheme)
    h = 1e-7
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        fd = (
            signed_distance(phi, x + e, pair, scheme)
            - signed_distance(phi, x - e, pair, scheme)
        ) / (2 * h)
        assert d_x[k] == pytest.approx(fd, rel=1e-5, abs=1e-8)
    assert signed_distance(phi, x, pair, scheme) == pytest.approx(
        float(d_phi @ phi.data.ravel()[distance_terms(phi, x, pair, scheme).cells])
    )


def test_vertex_and_pair_distances():
    phi = _plane()
    x = np.array([[0.3, 0.52], [0.7, 0.9]])
    np.testing.assert_allclose(
        vertex_distances(phi, x, InterpScheme.LINEAR), [0.02, 0.4], atol=1e-12
    )
    pairs = [_pair(phi, x[1], vertex=1)]
    np.testing.assert_allclose(
        pair_distances(pairs, phi, x, InterpScheme.QUADRATIC), [0.4], atol=1e-12
    )


def test_collect_pairs_uses_reference_and_initial_state():
    phi = _plane()
    params = ContactParams(dhat=0.05, kappa=1.0)
    x_ref = np.array([[0.3, 0.52], [0.5, 0.8], [0.7, 0.9]])
    pairs = collect_pairs(phi, x_ref, params)
    assert [p.vertex for p in pairs] == [0]
    assert pairs[0].d == pytest.approx(0.02)
    x_init = x_ref.copy()
    x_init[2] = [0.7, 0.53]
    pairs = collect_pairs(phi, x_ref, params, phi, x_init)
    assert [p.vertex for p in pairs] == [0, 2]
    assert pairs[1].anchor == anchor_of(phi, x_ref[2])


def test_barrier_gradient_matches_energy():
    phi = _wavy()
    x = np.array([[0.47, 0.53]])
    params = ContactParams(dhat=0.06, kappa=2.0)
    pairs = [_pair(phi, x[0])]
    n_cells = _DESC.num_cells
    phi_index = np.arange(n_cells)
    x_index = np.array([n_cells, n_cells + 1])
    n = n_cells + 2

    def energy(z):
        field = CellField(desc=_DESC, data=z[:n_cells].reshape(16, 16))
        return barrier_energy_grad_hess(
            pairs, field, z[n_cells:].reshape(1, 2), params, phi_index, x_index, n
        ).energy

    z0 = np.concatenate([phi.data.ravel(), x.ravel()])
    terms = barrier_energy_grad_hess(pairs, phi, x, params, phi_index, x_index, n)
    assert terms.energy > 0.0
    assert terms.min_distance < params.dhat
    support = np.flatnonzero(terms.gradient)
    assert set(support) >= {n_cells, n_cells + 1}
    h = 1e-7
    for k in support:
        zp, zm = z0.copy(), z0.copy()
        zp[k] += h
        zm[k] -= h
        fd = (energy(zp) - energy(zm)) / (2 * h)
        assert terms.gradient[k] == pytest.approx(fd, rel=1e-4)
    hess = terms.hessian.toarray()
    np.testing.assert_allclose(hess, hess.T)
    assert np.linalg.eigvalsh(hess[np.ix_(support, support)]).min() >= -1e-9


def test_barrier_ignores_fixed_unknowns():
    phi = _plane()
    x = np.array([[0.47, 0.53]])
    params = ContactParams(dhat=0.06, kappa=2.0)
    terms = barrier_energy_grad_hess(
        [_pair(phi, x[0])],
        phi,
        x,
        params,
        np.full(_DESC.num_cells, -1),
        np.array([0, 1]),
        2,
    )
    assert terms.gradient[1] < 0.0
    assert terms.hessian.shape == (2, 2)


def test_barrier_skips_far_pairs():
    phi = _plane()
    x = np.array([[0.47, 0.8]])
    terms = barrier_energy_grad_hess(
        [_pair(phi, x[0])],
        phi,
        x,
        ContactParams(dhat=0.06, kappa=2.0),
        np.arange(_DESC.num_cells),
        np.array([-1, -1]),
        _DESC.num_cells,
    )
    assert terms.energy == 0.0
    assert terms.min_distance == pytest.approx(0.3)
    np.testing.assert_array_equal(terms.gradient, 0.0)


def test_closest_segment_params():
    s, t = closest_segment_params(
        np.array([0.0, 0.0]), np.array([1.0, 0.0]),
        np.array([0.5, -1.0]), np.array([0.5, 1.0]),
    )
    assert s == pytest.approx(0.5)
    assert t == pytest.approx(0.5)
    p = np.array([0.2, 0.2])
    assert closest_segment_params(p, p, p, p) == (None, None)
    s, t = closest_segment_params(
        np.array([0.0, 0.0]), np.array([0.0, 1.0]), p, p
    )
    assert s == pytest.approx(0.2)
    assert t is None


def test_ccd_bounds_crossing_step():
    phi = _plane()
    x = np.array([[0.5, 0.6]])
    params = ContactParams(dhat=0.2, kappa=1.0)
    pairs = [_pair(phi, x[0])]
    t_b = ccd_filter(pairs, phi, x, np.zeros((16, 16)), np.array([[0.0, -0.3]]), params)
    assert t_b == pytest.approx(1.0 / 3.0)


def test_ccd_allows_non_crossing_step():
    phi = _plane()
    x = np.array([[0.5, 0.6]])
    params = ContactParams(dhat=0.2, kappa=1.0)
    pairs = [_pair(phi, x[0])]
    x_moved = np.array([[0.0, -0.05]])
    t_b = ccd_filter(pairs, phi, x, np.zeros((16, 16)), x_moved, params)
    assert t_b == 1.0


def test_ccd_accounts_for_moving_interface():
    phi = _plane()
    x = np.array([[0.5, 0.6]])
    params = ContactParams(dhat=0.2, kappa=1.0)
    pairs = [_pair(phi, x[0])]
    # 界面が 0.3 上がる
    t_b = ccd_filter(pairs, phi, x, np.full((16, 16), -0.3), np.zeros((1, 2)), params)
    assert t_b == pytest.approx(1.0 / 3.0)


def test_ccd_floor():
    phi = _plane()
    x = np.array([[0.5, 0.5 + 1e-7]])
    params = ContactParams(dhat=0.2, kappa=1.0)
    pairs = [_pair(phi, x[0])]
    t_b = ccd_filter(pairs, phi, x, np.zeros((16, 16)), np.array([[0.0, -0.3]]), params)
    assert t_b == CCD_MIN_STEP
