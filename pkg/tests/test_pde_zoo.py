import numpy as np
import pytest

from pigs.autodiff import seed_inputs
from pigs.errors import ConfigurationError, ContractViolationError, UnsupportedError
from pigs.model import DerivativeRequest
from pigs.pde_zoo import (
    PROBLEMS, SWIRL_LIMIT_RADIUS, V_T_MAX, Constraint, Observations, advection_field, allen_cahn_initial, boundary_ops,
    constraint_residual, get_problem, helmholtz_forcing, klein_gordon_exact, nl_diffusion_initial, ode_eq15_exact,
    residual_allen_cahn, residual_nl_diffusion, swirl_rate,
)
from pigs.sampler import BatchSizes, sample_batch

from tests.conftest import tiny_model


def interior_points(problem, n=1000, seed=7):
    rng = np.random.default_rng(seed)
    return rng.uniform(problem.lo, problem.hi, size=(n, problem.d))


@pytest.mark.parametrize("name", ["helmholtz", "klein_gordon", "flow_mixing", "ode_eq15", "ode_eq30"])
def test_exact_solutions_zero_the_residual(name):
    problem = get_problem(name)
    x = interior_points(problem)
    u = problem.exact_jet(x)
    residual = problem.residual(u, x)
    assert np.max(np.abs(residual.value)) <= 1e-8


def test_helmholtz_variant_keeps_exact_solution():
    problem = get_problem("helmholtz", a1=10.0, a2=10.0)
    x = interior_points(problem, n=200)
    assert np.max(np.abs(problem.residual(problem.exact_jet(x), x).value)) <= 1e-8


def test_helmholtz_forcing_constant():
    x, y = 0.125, 0.5
    expected = (1.0 - 16.0 * np.pi ** 2 - np.pi ** 2) * np.sin(4.0 * np.pi * x) * np.sin(np.pi * y)
    assert helmholtz_forcing(x, y) == pytest.approx(expected, rel=1e-14)


def test_allen_cahn_residual_terms():
    # u_t - D u_xx + lambda u^3 - 5u
    assert residual_allen_cahn(0.5, 1.0, 2.0) == pytest.approx(1.0 - 2e-4 + 5.0 * 0.125 - 2.5)
    np.testing.assert_allclose(allen_cahn_initial(np.array([-1.0, 0.0, 1.0])), [-1.0, 0.0, -1.0], atol=1e-15)


def test_swirl_rate_limit_at_origin():
    assert swirl_rate(0.0, 0.0) == pytest.approx(1.0 / V_T_MAX)
    assert swirl_rate(0.5 * SWIRL_LIMIT_RADIUS, 0.0) == pytest.approx(1.0 / V_T_MAX)
    assert swirl_rate(1e-4, 0.0) == pytest.approx(1.0 / V_T_MAX, rel=1e-6)
    r = 2.0
    assert swirl_rate(0.0, r) == pytest.approx(np.tanh(r) / np.cosh(r) ** 2 / (r * V_T_MAX))


def test_klein_gordon_initial_rate_matches_exact_solution():
    problem = get_problem("klein_gordon")
    c = problem.constraint("initial_rate")
    x = interior_points(problem, n=20)
    x[:, 2] = 0.0
    u = problem.exact_jet(x, DerivativeRequest((2,), second=()))
    np.testing.assert_allclose(c.target(x), u.dx(2).value, rtol=1e-14, atol=1e-15)


def test_nl_diffusion_initial_peaks():
    assert nl_diffusion_initial(-0.1, -0.5) > 0.4
    assert nl_diffusion_initial(1.0, 1.0) < 1e-3


def test_problem_catalogue():
    assert set(PROBLEMS) == {"allen_cahn", "allen_cahn_inverse", "helmholtz", "klein_gordon", "flow_mixing",
                             "nl_diffusion", "ode_eq15", "ode_eq30"}
    ac = get_problem("allen_cahn")
    assert ac.time_axis == 1 and not ac.has_exact
    assert [c.kind for c in ac.constraints] == ["initial", "periodic_value", "periodic_derivative"]
    assert get_problem("flow_mixing").request.second == ()
    assert [c.name for c in get_problem("nl_diffusion").constraints] == ["initial", "neumann_0", "neumann_1"]
    with pytest.raises(UnsupportedError):
        ac.exact_values(np.zeros((1, 2)))


def test_get_problem_rejects_unknown_names_and_arguments():
    with pytest.raises(ConfigurationError):
        get_problem("poisson")
    with pytest.raises(ConfigurationError):
        get_problem("helmholtz", wavenumber=3.0)


def test_unknown_constraint_kind():
    with pytest.raises(ConfigurationError):
        Constraint("x", "robin")


def test_inverse_problem_needs_observations():
    with pytest.raises(ConfigurationError):
        get_problem("allen_cahn_inverse")


def test_inverse_problem_structure():
    rng = np.random.default_rng(0)
    obs = Observations(rng.uniform(0.0, 1.0, size=(10, 2)), rng.normal(size=10))
    problem = get_problem("allen_cahn_inverse", observations=obs, reaction_init=0.5)
    assert problem.name == "allen_cahn_inverse"
    assert problem.learnable == {"reaction": 0.5}
    assert "reaction" not in problem.coeffs
    assert problem.constraints[-1].kind == "data"
    with pytest.raises(ConfigurationError):
        Observations(np.zeros((3, 2)), np.zeros(4))


def test_periodic_residual_of_coincident_pairs_is_zero():
    problem = get_problem("allen_cahn")
    model = tiny_model(problem)
    t = np.linspace(0.1, 0.9, 5)
    same = np.stack([np.column_stack([np.full(5, 0.3), t])] * 2)
    for name in ("periodic_value", "periodic_derivative"):
        r = constraint_residual(problem.constraint(name), model, same)
        np.testing.assert_allclose(r.value, np.zeros(5), atol=1e-14)
    with pytest.raises(ContractViolationError):
        constraint_residual(problem.constraint("periodic_value"), model, same[0])


def test_dirichlet_residual_is_prediction_minus_target(rng):
    problem = get_problem("helmholtz")
    model = tiny_model(problem)
    c = problem.constraint("boundary_0")
    points = np.column_stack([np.full(6, -1.0), rng.uniform(-1.0, 1.0, 6)])
    targets = c.target(points)
    r = constraint_residual(c, model, points, targets)
    np.testing.assert_allclose(r.value, model.predict_values(points) - targets, rtol=1e-13, atol=1e-15)


def test_boundary_ops_covers_every_constraint():
    problem = get_problem("klein_gordon")
    model = tiny_model(problem)
    batch = sample_batch(problem, BatchSizes(interior=8, boundary=4, initial=4, data=4), seed=0)
    ops = boundary_ops(problem, model, batch.constraints, batch.targets)
    assert set(ops) == {"boundary_0", "boundary_1", "initial", "initial_rate"}
    assert ops["boundary_0"].shape == (8,)
    assert ops["initial_rate"].shape == (4,)


def test_flow_mixing_exact_jet_at_the_vortex_centre():
    problem = get_problem("flow_mixing")
    x = np.array([[0.0, 0.0, 1.0], [0.5 * SWIRL_LIMIT_RADIUS, 0.0, 2.0], [0.0, 0.0, 0.0]])
    u = problem.exact_jet(x)
    for component in [u.value] + [u.dx(i) for i in range(3)]:
        assert np.all(np.isfinite(component.value))
    np.testing.assert_allclose(u.value.value, problem.exact_values(x), rtol=1e-14, atol=1e-15)
    assert np.max(np.abs(problem.residual(u, x).value)) <= 1e-12


def test_swirl_rate_jet_is_smooth_across_the_series_radius():
    x = np.array([[0.999 * SWIRL_LIMIT_RADIUS, 0.0], [1.001 * SWIRL_LIMIT_RADIUS, 0.0]])
    xs = seed_inputs(x, (0, 1))
    w = swirl_rate(*xs)
    np.testing.assert_allclose(w.value.value, swirl_rate(x[:, 0], x[:, 1]), rtol=1e-14)
    np.testing.assert_allclose(w.value.value[0], w.value.value[1], rtol=1e-5)
    np.testing.assert_allclose(w.dx(0).value[0], w.dx(0).value[1], rtol=1e-2)


def test_advection_field_is_tangential(rng):
    x, y = rng.uniform(-4.0, 4.0, size=(2, 500))
    a, b = advection_field(x, y)
    np.testing.assert_allclose(a * x + b * y, 0.0, atol=1e-12)


def test_nl_diffusion_flux_identity(rng):
    # |grad u|^2 + u Laplacian(u) equals half the Laplacian of u^2
    x = rng.uniform(-1.0, 1.0, size=(50, 2))
    u = nl_diffusion_initial(*seed_inputs(x, (0, 1)))
    v = u * u
    residual = residual_nl_diffusion(u.value, 0.0, u.dx(0), u.dx(1), u.dxx(0), u.dxx(1), rate=1.0)
    half_laplacian = 0.5 * (v.dxx(0).value + v.dxx(1).value)
    np.testing.assert_allclose(-residual.value, half_laplacian, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("name", ["helmholtz", "klein_gordon", "flow_mixing", "ode_eq15", "ode_eq30"])
def test_exact_solutions_satisfy_boundary_and_initial_constraints(name):
    problem = get_problem(name)
    batch = sample_batch(problem, BatchSizes(interior=4, boundary=64, initial=64, data=4), seed=3)
    for c in problem.constraints:
        points = batch.constraints[c.name]
        u = problem.exact_jet(points, c.request)
        axis = c.axis if c.derivative_axis is None else c.derivative_axis
        component = u.dx(axis).value if c.request.directions else u.value.value
        assert np.max(np.abs(component - c.target(points))) <= 1e-10, c.name


def test_stiff_ode_quarter_period():
    assert ode_eq15_exact(100.0625) == pytest.approx(-1.0, abs=1e-14)
    assert get_problem("ode_eq15").exact_values(np.array([[100.0625]]))[0] == pytest.approx(-1.0, abs=1e-14)


def test_klein_gordon_initial_slice(rng):
    x, y = rng.uniform(-1.0, 1.0, size=(2, 20))
    np.testing.assert_allclose(klein_gordon_exact(x, y, np.zeros(20)), x + y, rtol=1e-15, atol=1e-15)


def test_inverse_hook_at_the_true_reaction_matches_the_forward_residual(rng):
    forward = get_problem("allen_cahn")
    obs = Observations(rng.uniform(0.0, 1.0, size=(4, 2)), np.zeros(4))
    inverse = get_problem("allen_cahn_inverse", observations=obs, reaction_init=5.0)
    forward_model, inverse_model = tiny_model(forward), tiny_model(inverse)
    assert inverse_model.coeff("reaction") == 5.0
    x = rng.uniform((-1.0, 0.0), (1.0, 1.0), size=(30, 2))
    bound = inverse_model.bind()
    u = inverse_model.predict(x, inverse.request, bound)
    r_inverse = inverse.residual(u, x, inverse_model.coeff_vars(bound))
    r_forward = forward.residual(forward_model.predict(x, forward.request), x)
    np.testing.assert_allclose(r_inverse.value, r_forward.value, rtol=1e-14, atol=1e-15)
