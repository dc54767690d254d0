import numpy as np
import pytest
import scipy.sparse as sp

from src.internal.contact import ContactParams, collect_pairs
from src.internal.coupled_opt import (
    CoupledProblem,
    KKTSystem,
    NewtonOptions,
    constraints,
    gradient,
    newton_solve,
    objective,
    solve_kkt,
    unknown_masses,
    volume_only_solve,
)
from src.internal.errors import SingularSystemError
from src.internal.fluid_stage import FluidParams
from src.internal.grid import CellField, GridDesc
from src.internal.levelset import (
    LevelSet,
    sdf_box,
    sdf_circle,
    select_narrowband,
    volume_errors,
)
from src.internal.solid import ElasticParams, SolidState

_DESC = GridDesc(nx=16, ny=16, dx=1.0 / 16)
_FLUID = FluidParams.create_default()


def _pool() -> LevelSet:
    return LevelSet.from_phi(
        CellField(desc=_DESC, data=sdf_box(_DESC, (-1.0, -1.0), (2.0, 0.5)))
    )


def _problem(
    solid: SolidState, x_star: np.ndarray, x_ref: np.ndarray
) -> CoupledProblem:
    ls = _pool()
    contact = ContactParams.create_default(_DESC.dx, _FLUID.rho_l)
    return CoupledProblem(
        phi_star=ls.phi,
        band=select_narrowband(ls, 3.0 * _DESC.dx),
        attribution=ls.attribution,
        targets=ls.targets,
        sharpness=ls.sharpness,
        fluid=_FLUID,
        solid=solid,
        x_star=x_star,
        elastic=ElasticParams(k_stretch=1.0),
        pairs=collect_pairs(ls.phi, x_ref, contact),
        contact=contact,
        dt=0.01,
    )


def _segment_problem() -> tuple[CoupledProblem, np.ndarray]:
    x = np.array([[0.45, 0.52], [0.55, 0.52]])
    solid = SolidState.from_polyline(x, line_density=1.0)
    problem = _problem(solid, x - np.array([0.0, 0.05]), x)
    rng = np.random.default_rng(4)
    z = problem.pack(problem.phi_star, x + 1e-3 * rng.standard_normal(x.shape))
    z[: problem.n_phi] += 1e-3 * rng.standard_normal(problem.n_phi)
    return problem, z


def test_problem_layout():
    problem, _ = _segment_problem()
    assert problem.n_unknowns == problem.n_phi + 4
    assert len(problem.pairs) == 2
    np.testing.assert_array_equal(problem.x_index, problem.n_phi + np.arange(4))
    z = problem.pack(problem.phi_star, problem.x_star)
    np.testing.assert_array_equal(problem.phi_full(z).data, problem.phi_star.data)
    np.testing.assert_array_equal(problem.x_full(z), problem.x_star)


def test_problem_requires_contact_params_for_pairs():
    problem, _ = _segment_problem()
    with pytest.raises(ValueError):
        CoupledProblem(
            phi_star=problem.phi_star,
            band=problem.band,
            attribution=problem.attribution,
            targets=problem.targets,
            sharpness=problem.sharpness,
            fluid=_FLUID,
            solid=problem.solid,
            x_star=problem.x_star,
            elastic=problem.elastic,
            pairs=problem.pairs,
            contact=None,
            dt=0.01,
        )


def test_unknown_masses_bounds():
    problem, z = _segment_problem()
    masses = unknown_masses(problem, z)
    vc = _DESC.cell_volume
    assert np.all(masses >= _FLUID.rho_a * vc)
    assert np.all(masses <= _FLUID.rho_l * vc)


def test_gradient_matches_objective():
    problem, z = _segment_problem()
    masses = unknown_masses(problem, z)
    g = gradient(problem, z, masses)
    h = 1e-7
    for k in range(problem.n_unknowns):
        zp, zm = z.copy(), z.copy()
        zp[k] += h
        zm[k] -= h
        fd = (objective(problem, zp, masses) - objective(problem, zm, masses)) / (2 * h)
        assert g[k] == pytest.approx(fd, rel=1e-4, abs=1e-6)


def test_constraint_jacobian_matches_finite_difference():
    problem, z = _segment_problem()
    cons, jac = constraints(problem, z)
    assert cons.shape == (1,)
    dense = jac.toarray()
    h = 1e-7
    for k in range(0, problem.n_phi, 7):
        zp, zm = z.copy(), z.copy()
        zp[k] += h
        zm[k] -= h
        fd = (constraints(problem, zp)[0] - constraints(problem, zm)[0]) / (2 * h)
        assert dense[0, k] == pytest.approx(fd[0], rel=1e-4, abs=1e-12)
    np.testing.assert_array_equal(dense[:, problem.n_phi :], 0.0)


def test_solve_kkt_hand_solved():
    system = KKTSystem(
        hess=sp.identity(2, format="csr"),
        jac=sp.csr_matrix(np.array([[1.0, 1.0]])),
        grad=np.zeros(2),
        cons=np.array([1.0]),
    )
    delta, lam = solve_kkt(system)
    np.testing.assert_allclose(delta, [-0.5, -0.5], atol=1e-12)
    np.testing.assert_allclose(lam, [0.5], atol=1e-12)
    schur = KKTSystem(
        hess=system.hess,
        jac=system.jac,
        grad=system.grad,
        cons=system.cons,
        diagonal=True,
    )
    d2, l2 = solve_kkt(schur)
    np.testing.assert_allclose(d2, delta, atol=1e-12)
    np.testing.assert_allclose(l2, lam, atol=1e-12)


def test_solve_kkt_regularizes_semidefinite_hessian():
    system = KKTSystem(
        hess=sp.csr_matrix(np.diag([1.0, 0.0])),
        jac=sp.csr_matrix((0, 2)),
        grad=np.array([1.0, 0.0]),
        cons=np.zeros(0),
    )
    delta, _ = solve_kkt(system)
    assert delta[0] == pytest.approx(-1.0, rel=1e-6)
    assert delta[1] == pytest.approx(0.0, abs=1e-12)


def test_solve_kkt_rejects_indefinite_hessian():
    system = KKTSystem(
        hess=sp.csr_matrix(np.diag([-1.0, 2.0])),
        jac=sp.csr_matrix((0, 2)),
        grad=np.array([1.0, 1.0]),
        cons=np.zeros(0),
    )
    with pytest.raises(SingularSystemError):
        solve_kkt(system)


def test_volume_only_solve_restores_volume():
    phi = CellField(desc=_DESC, data=sdf_circle(_DESC, (0.5, 0.5), 0.25))
    ls = LevelSet.from_phi(phi)
    ls = ls.with_targets(1.01 * ls.targets)
    result = volume_only_solve(ls, _FLUID, 0.01)
    assert result.stats.converged
    assert result.stats.final_volume_error <= 1e-6
    fixed = np.abs(phi.data) >= 3.0 * _DESC.dx
    np.testing.assert_array_equal(result.phi.data[fixed], phi.data[fixed])
    assert volume_errors(ls.with_phi(result.phi.data)).max() < 1e-5


def test_consistent_start_converges_immediately():
    ls = _pool()
    result = volume_only_solve(ls, _FLUID, 0.01)
    assert result.stats.converged
    assert result.stats.iterations == 0
    np.testing.assert_array_equal(result.phi.data, ls.phi.data)


def test_free_particle_reaches_prediction():
    ls = LevelSet.from_phi(CellField(desc=_DESC, data=np.ones((16, 16))))
    solid = SolidState.from_points(np.array([[0.5, 0.5]]), mass=1.0)
    x_star = np.array([[0.5, 0.49]])
    problem = CoupledProblem(
        phi_star=ls.phi,
        band=select_narrowband(ls, 0.1),
        attribution=ls.attribution,
        targets=ls.targets,
        sharpness=ls.sharpness,
        fluid=_FLUID,
        solid=solid,
        x_star=x_star,
        elastic=ElasticParams(),
        pairs=[],
        contact=None,
        dt=0.01,
    )
    result = newton_solve(problem, ls.phi, solid.x)
    assert result.stats.converged
    np.testing.assert_allclose(result.x, x_star, atol=1e-12)
    assert result.stats.min_distance is None


@pytest.mark.parametrize("line_search", [True, False])
def test_barrier_keeps_particle_outside(line_search):
    x = np.array([[0.5, 0.53]])
    solid = SolidState.from_points(x, mass=1.0)
    problem = _problem(solid, np.array([[0.5, 0.4]]), np.array([[0.5, 0.4]]))
    assert len(problem.pairs) == 1
    result = newton_solve(
        problem,
        problem.phi_star,
        x,
        NewtonOptions(max_iters=40, line_search=line_search, ccd=True),
    )
    assert not result.stats.penetrated
    assert result.stats.used_ccd
    assert result.stats.min_distance is not None
    assert result.stats.min_distance > 0.0
    assert all(0.0 < a <= 1.0 for a in result.stats.alpha_history)


def test_solve_without_contact_splits_into_fluid_and_solid():
    phi = CellField(desc=_DESC, data=sdf_circle(_DESC, (0.5, 0.5), 0.25))
    ls = LevelSet.from_phi(phi)
    ls = ls.with_targets(1.01 * ls.targets)
    solid = SolidState.from_points(np.array([[0.9, 0.9]]), mass=1.0)
    x_star = np.array([[0.9, 0.88]])
    options = NewtonOptions(line_search=False)
    problem = CoupledProblem(
        phi_star=ls.phi,
        band=select_narrowband(ls, 3.0 * _DESC.dx),
        attribution=ls.attribution,
        targets=ls.targets,
        sharpness=ls.sharpness,
        fluid=_FLUID,
        solid=solid,
        x_star=x_star,
        elastic=ElasticParams(),
        pairs=[],
        contact=None,
        dt=0.01,
    )
    coupled = newton_solve(problem, ls.phi, solid.x, options)
    fluid_only = volume_only_solve(ls, _FLUID, 0.01, options=options)
    assert coupled.stats.converged
    assert fluid_only.stats.converged
    np.testing.assert_allclose(coupled.x, x_star, atol=1e-12)
    np.testing.assert_allclose(coupled.phi.data, fluid_only.phi.data, atol=1e-8)
