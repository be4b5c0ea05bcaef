import numpy as np
import pytest

from pigs.errors import ConfigurationError, UndefinedMetricError, UnsupportedError
from pigs.oracle import (
    ReferenceField, build_reference, exact_field, export_field_csv, field_mass, load_reference_field,
    rel_l2, save_reference_field, solve_allen_cahn_reference, solve_nl_diffusion_reference, trapezoid_weights,
)
from pigs.pde_zoo import allen_cahn_initial, get_problem, nl_diffusion_initial


def test_rel_l2():
    assert rel_l2(np.array([1.0, 1.0]), np.array([1.0, 0.0])) == pytest.approx(1.0)
    assert rel_l2(np.array([3.0, 4.0]), np.array([3.0, 4.0])) == 0.0
    with pytest.raises(UndefinedMetricError):
        rel_l2(np.ones(3), np.zeros(3))
    with pytest.raises(ConfigurationError):
        rel_l2(np.ones(3), np.ones(4))


def test_exact_field_on_grid():
    problem = get_problem("helmholtz")
    field = exact_field(problem, 5)
    assert field.shape == (5, 5)
    assert field.provenance == "analytic"
    np.testing.assert_allclose(field.values.ravel(), problem.exact_values(field.points()))
    with pytest.raises(UnsupportedError):
        exact_field(get_problem("allen_cahn"), 5)


def test_subsample_keeps_both_ends():
    axes = [np.linspace(0.0, 1.0, 257), np.linspace(0.0, 1.0, 11)]
    field = ReferenceField(axes, np.zeros((257, 11)), "test")
    sub = field.subsample(65)
    assert sub.shape == (65, 11)
    assert sub.axes[0][0] == 0.0 and sub.axes[0][-1] == 1.0
    odd = field.subsample(101)
    assert (256 % (len(odd.axes[0]) - 1)) == 0
    assert odd.axes[0][-1] == 1.0
    with pytest.raises(ConfigurationError):
        field.subsample(1)


def test_interpolation_is_exact_on_linear_fields():
    axes = [np.linspace(0.0, 1.0, 5), np.linspace(0.0, 2.0, 3)]
    X, Y = np.meshgrid(*axes, indexing="ij")
    field = ReferenceField(axes, 2.0 * X - Y, "test")
    points = np.array([[0.3, 0.7], [0.95, 1.9]])
    np.testing.assert_allclose(field.interpolate(points), 2.0 * points[:, 0] - points[:, 1], atol=1e-12)


def test_allen_cahn_reference_shape_and_bounds():
    field = solve_allen_cahn_reference(nx=256, nt=201)
    assert field.shape == (257, 201)
    np.testing.assert_array_equal(field.values[-1], field.values[0])
    x = field.axes[0]
    np.testing.assert_allclose(field.values[:, 0], allen_cahn_initial(x), atol=1e-14)
    assert np.max(np.abs(field.values)) <= 1.0 + 1e-3
    assert field.provenance.startswith("fd-solver(allen_cahn")


def test_allen_cahn_reference_validates_grid_and_step():
    with pytest.raises(ConfigurationError):
        solve_allen_cahn_reference(nx=300, nt=201)
    with pytest.raises(ConfigurationError):
        solve_allen_cahn_reference(nx=256, nt=11)
    with pytest.raises(ConfigurationError):
        solve_allen_cahn_reference(nx=256, nt=199)
    assert solve_allen_cahn_reference(nx=256, nt=200).shape == (257, 200)
    with pytest.raises(ConfigurationError):
        solve_allen_cahn_reference(nx=256, nt=201, dt=1.0)


@pytest.mark.slow
def test_allen_cahn_reference_self_convergence():
    coarse = solve_allen_cahn_reference(nx=1024, nt=201)
    mid = solve_allen_cahn_reference(nx=2048, nt=201)
    fine = solve_allen_cahn_reference(nx=4096, nt=201)
    e_coarse = rel_l2(coarse.values, mid.values[::2])
    e_fine = rel_l2(mid.values, fine.values[::2])
    assert e_fine <= 1e-4
    assert e_fine < e_coarse


def test_trapezoid_mass():
    assert trapezoid_weights(3, 0.5).tolist() == [0.25, 0.5, 0.25]
    assert field_mass(np.ones((5, 5)), 0.5) == pytest.approx(4.0)
    assert field_mass(np.ones((5, 3)), 0.5, 1.0) == pytest.approx(4.0)


def test_nl_diffusion_reference_conserves_mass_and_spreads():
    field = solve_nl_diffusion_reference(nx=17, nt=3)
    assert field.shape == (17, 17, 3)
    h = 2.0 / 16
    X, Y = np.meshgrid(field.axes[0], field.axes[1], indexing="ij")
    np.testing.assert_allclose(field.values[..., 0], nl_diffusion_initial(X, Y))
    m0, m1 = field_mass(field.values[..., 0], h), field_mass(field.values[..., -1], h)
    assert abs(m1 - m0) / m0 <= 1e-3
    assert field.values[..., -1].max() < field.values[..., 0].max()
    assert field.values.min() >= field.values[..., 0].min() - 1e-12


def test_nl_diffusion_reference_validates_grid():
    with pytest.raises(ConfigurationError):
        solve_nl_diffusion_reference(nx=64)
    with pytest.raises(ConfigurationError):
        solve_nl_diffusion_reference(nx=17, ny=32)
    with pytest.raises(ConfigurationError):
        solve_nl_diffusion_reference(nx=17, safety=2.0)


def test_nl_diffusion_reference_on_a_rectangular_grid():
    field = solve_nl_diffusion_reference(nx=17, ny=33, nt=3)
    assert field.shape == (17, 33, 3)
    assert len(field.axes[1]) == 33 and field.axes[1][-1] == 1.0
    assert "ny=33" in field.provenance
    X, Y = np.meshgrid(field.axes[0], field.axes[1], indexing="ij")
    np.testing.assert_allclose(field.values[..., 0], nl_diffusion_initial(X, Y))
    hx, hy = 2.0 / 16, 2.0 / 32
    m0, m1 = field_mass(field.values[..., 0], hx, hy), field_mass(field.values[..., -1], hx, hy)
    assert abs(m1 - m0) / m0 <= 1e-3
    assert field.values.min() >= field.values[..., 0].min() - 1e-12


@pytest.mark.slow
def test_nl_diffusion_reference_grid_refinement():
    fields = [solve_nl_diffusion_reference(nx=n, nt=3) for n in (33, 65, 129)]
    # compare on the common 33-point grid
    e1 = rel_l2(fields[0].values, fields[1].values[::2, ::2])
    e2 = rel_l2(fields[1].values[::2, ::2], fields[2].values[::4, ::4])
    assert e2 < e1


def test_build_reference_dispatch():
    assert build_reference(get_problem("flow_mixing"), 4).provenance == "analytic"
    ac = build_reference(get_problem("allen_cahn"), 11, nx=256, nt=201)
    assert ac.shape[1] == 11 and ac.shape[0] <= 11
    assert ac.axes[0][0] == -1.0 and ac.axes[0][-1] == 1.0
    nl = build_reference(get_problem("nl_diffusion"), 9, nx=17, nt=3)
    assert nl.shape == (9, 9, 3)


def test_reference_file_round_trip(tmp_path):
    problem = get_problem("helmholtz")
    field = exact_field(problem, 6)
    path = tmp_path / "field.bin"
    save_reference_field(field, path)
    assert path.stat().st_size == 4 + 2 * 8 + 36 * 8
    loaded = load_reference_field(path, problem)
    np.testing.assert_array_equal(loaded.values, field.values)
    np.testing.assert_allclose(loaded.axes[0], field.axes[0])
    assert loaded.provenance == "imported-file(field.bin)"


def test_reference_file_errors(tmp_path):
    problem = get_problem("helmholtz")
    path = tmp_path / "field.bin"
    save_reference_field(exact_field(problem, 4), path)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ConfigurationError):
        load_reference_field(path, problem)
    save_reference_field(exact_field(get_problem("flow_mixing"), 3), path)
    with pytest.raises(ConfigurationError):
        load_reference_field(path, problem)


def test_export_field_csv(tmp_path):
    field = exact_field(get_problem("helmholtz"), 3)
    path = tmp_path / "field.csv"
    export_field_csv(field, path, names=["x", "y"])
    lines = path.read_text().splitlines()
    assert lines[0] == "x,y,u"
    assert len(lines) == 10
