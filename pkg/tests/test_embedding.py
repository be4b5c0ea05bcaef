import numpy as np
import pytest

from pigs.autodiff import Var, seed_inputs
from pigs.embedding import (
    LOCALITY_CUTOFF, GaussianCloud, InitSpec, cloud_stats, densify, fe_forward, gaussian_eval, init_cloud,
    recipe, snapshot_table, write_stats,
)
from pigs.errors import ConfigurationError, ContractViolationError, InvariantViolationError


def single_gaussian(**kwargs):
    values = dict(n=1, d=2, k=1, mu=np.array([[[0.2, 0.3]]]), feat=np.array([[2.0]]),
                  log_sigma=np.log(np.array([[[0.5, 0.25]]])))
    values.update(kwargs)
    return GaussianCloud(**values)


def test_diagonal_gaussian_value_and_gradient(rng):
    cloud = single_gaussian()
    x = rng.uniform(-1.0, 1.0, size=(6, 2))
    out = fe_forward(cloud, seed_inputs(x, (0, 1)))
    z0, z1 = (x[:, 0] - 0.2) / 0.5, (x[:, 1] - 0.3) / 0.25
    expected = 2.0 * np.exp(-0.5 * (z0 ** 2 + z1 ** 2))
    np.testing.assert_allclose(out.value.value[:, 0], expected, rtol=1e-14)
    np.testing.assert_allclose(out.dx(0).value[:, 0], -expected * z0 / 0.5, rtol=1e-12)
    np.testing.assert_allclose(out.dxx(1).value[:, 0], expected * (z1 ** 2 - 1.0) / 0.25 ** 2, rtol=1e-12)


def test_dense_gaussian_matches_explicit_quadratic_form(rng):
    tril = np.array([[[np.log(0.4), 0.3, np.log(0.6)]]])
    cloud = GaussianCloud(n=1, d=2, k=1, mu=np.zeros((1, 1, 2)), feat=np.ones((1, 1)), tril=tril,
                          covariance="dense")
    sigma = cloud.covariances()[0, 0]
    x = rng.uniform(-1.0, 1.0, size=(8, 2))
    q = np.einsum("bi,ij,bj->b", x, np.linalg.inv(sigma), x)
    out = fe_forward(cloud, seed_inputs(x, ()))
    np.testing.assert_allclose(out.value.value[:, 0], np.exp(-0.5 * q), rtol=1e-12)


def test_densify_preserves_features(rng):
    cloud = init_cloud(InitSpec(n=10, d=2, k=3, scale=0.2, lo=(0.0, 0.0), hi=(1.0, 1.0)), rng)
    dense = densify(cloud)
    x = rng.uniform(0.0, 1.0, size=(5, 2))
    a = fe_forward(cloud, seed_inputs(x, (0, 1))).value.value
    b = fe_forward(dense, seed_inputs(x, (0, 1))).value.value
    np.testing.assert_allclose(a, b, rtol=0.0, atol=1e-14)
    np.testing.assert_allclose(dense.covariances(), cloud.covariances(), rtol=1e-14)


def test_random_dense_factors_are_spd(rng):
    n, d = 50, 3
    tril = rng.normal(0.0, 2.0, size=(n, 1, d * (d + 1) // 2))
    cloud = GaussianCloud(n=n, d=d, k=1, mu=np.zeros((n, 1, d)), feat=np.ones((n, 1)), tril=tril,
                          covariance="dense")
    sigma = cloud.covariances()
    np.testing.assert_allclose(sigma, np.swapaxes(sigma, -1, -2), rtol=0.0, atol=0.0)
    assert np.all(np.linalg.eigvalsh(sigma) > 0.0)
    out = fe_forward(cloud, seed_inputs(rng.uniform(-1.0, 1.0, size=(4, d)), ()))
    assert np.all(np.isfinite(out.value.value))


@pytest.mark.parametrize("d,k", [(1, 4), (2, 1), (3, 4)])
def test_diagonal_shared_centre_parameter_count(rng, d, k):
    cloud = init_cloud(InitSpec(n=7, d=d, k=k, scale=0.1, lo=(0.0,) * d, hi=(1.0,) * d), rng)
    assert cloud.n_params == 7 * (2 * d + k)


def test_per_feature_mode_sums_own_gaussians(rng):
    spec = InitSpec(n=3, d=1, k=2, scale=0.3, lo=(0.0,), hi=(1.0,), per_feature=True, feat_init="uniform",
                    feat_scale=1.0)
    cloud = init_cloud(spec, rng)
    x = rng.uniform(0.0, 1.0, size=(4, 1))
    out = fe_forward(cloud, seed_inputs(x, ())).value.value
    sigma = np.exp(cloud.log_sigma)
    g = np.exp(-0.5 * ((x[:, None, None, 0] - cloud.mu[None, :, :, 0]) / sigma[None, :, :, 0]) ** 2)
    expected = (g * cloud.feat[None]).sum(axis=1)
    np.testing.assert_allclose(out, expected, rtol=1e-13)


def test_gaussian_eval_single_index(rng):
    cloud = init_cloud(InitSpec(n=4, d=2, k=2, scale=0.3, lo=(0.0, 0.0), hi=(1.0, 1.0)), rng)
    x = rng.uniform(0.0, 1.0, size=(3, 2))
    g = gaussian_eval(cloud, 2, seed_inputs(x, ()))
    diff = (x - cloud.mu[2, 0]) / 0.3
    np.testing.assert_allclose(g.value.value, np.exp(-0.5 * (diff ** 2).sum(axis=1)), rtol=1e-13)
    with pytest.raises(ContractViolationError):
        gaussian_eval(cloud, 4, seed_inputs(x, ()))


def test_cutoff_drops_far_gaussians():
    cloud = single_gaussian(cutoff=LOCALITY_CUTOFF)
    far = np.array([[50.0, 50.0]])
    near = np.array([[0.25, 0.3]])
    assert fe_forward(cloud, seed_inputs(far, ())).value.value[0, 0] == 0.0
    assert fe_forward(cloud, seed_inputs(near, ())).value.value[0, 0] > 0.0


def test_overflowing_scale_is_not_spd():
    cloud = single_gaussian(log_sigma=np.full((1, 1, 2), 1000.0))
    with pytest.raises(InvariantViolationError):
        fe_forward(cloud, seed_inputs(np.zeros((1, 2)), ()))


def test_wrong_input_count():
    with pytest.raises(ContractViolationError):
        fe_forward(single_gaussian(), seed_inputs(np.zeros((1, 3)), ()))


def test_recipes():
    assert recipe("helmholtz").n == 3000
    assert recipe("allen_cahn").n == 4000
    assert recipe("klein_gordon").n == 100
    with pytest.raises(ConfigurationError):
        recipe("poisson")


@pytest.mark.parametrize("name", ["allen_cahn", "allen_cahn_inverse"])
def test_allen_cahn_initial_variance(rng, name):
    cloud = init_cloud(recipe(name).with_overrides(n=20), rng)
    np.testing.assert_allclose(cloud.variances(), 0.025, rtol=1e-14)


def test_init_cloud_respects_box(rng):
    spec = recipe("flow_mixing").with_overrides(n=50)
    cloud = init_cloud(spec, rng)
    assert cloud.mu.shape == (50, 1, 3)
    assert np.all(cloud.mu >= 0.0) and np.all(cloud.mu <= 2.0)
    np.testing.assert_allclose(cloud.variances(), 0.01)
    with pytest.raises(ConfigurationError):
        init_cloud(spec.with_overrides(feat_init="zeros"), rng)


def test_cloud_stats_distances_and_variances():
    mu = np.array([[[0.0, 0.0]], [[3.0, 4.0]], [[3.0, 5.0]]])
    cloud = GaussianCloud(n=3, d=2, k=1, mu=mu, feat=np.ones((3, 1)), log_sigma=np.log(np.full((3, 1, 2), 0.5)))
    stats = cloud_stats(cloud)
    np.testing.assert_allclose(stats.nn_distance, [5.0, 1.0, 1.0])
    assert stats.table().shape == (3, 3)
    assert stats.header() == ["nn_distance", "var_0", "var_1"]
    np.testing.assert_allclose(stats.variances, 0.25)
    assert not stats.collapsed


def test_cloud_stats_needs_two_gaussians():
    with pytest.raises(ContractViolationError):
        cloud_stats(single_gaussian())


def test_write_stats(tmp_path, rng):
    cloud = init_cloud(InitSpec(n=6, d=2, k=1, scale=0.1, lo=(0.0, 0.0), hi=(1.0, 1.0)), rng)
    path = tmp_path / "stats.csv"
    write_stats(cloud_stats(cloud), path)
    lines = path.read_text().splitlines()
    assert lines[0] == "nn_distance,var_0,var_1"
    assert len(lines) == 7


def test_snapshot_columns(rng):
    cloud = densify(init_cloud(InitSpec(n=2, d=2, k=3, scale=0.1, lo=(0.0, 0.0), hi=(1.0, 1.0)), rng))
    header, table = snapshot_table(cloud)
    assert header == ["id", "mu_0", "mu_1", "sigma_0", "sigma_1", "f_0", "f_1", "f_2", "l_0_0", "l_1_0", "l_1_1"]
    assert table.shape == (2, len(header))
    np.testing.assert_allclose(table[:, 3:5], 0.1)


def test_snapshot_per_feature_rows(rng):
    spec = InitSpec(n=2, d=1, k=3, scale=0.1, lo=(0.0,), hi=(1.0,), per_feature=True)
    cloud = init_cloud(spec, rng)
    header, table = snapshot_table(cloud)
    assert table.shape[0] == 6
    weights = table[:, 3:6]
    # one non-zero weight column per row
    assert np.all(np.count_nonzero(weights, axis=1) <= 1)
    assert np.allclose(weights[1], [0.0, cloud.feat[0, 1], 0.0])


def test_bind_returns_constants(rng):
    cloud = init_cloud(InitSpec(n=2, d=1, k=1, scale=0.1, lo=(0.0,), hi=(1.0,)), rng)
    bound = cloud.bind()
    assert set(bound) == {"mu", "log_sigma", "feat"}
    assert all(isinstance(v, Var) and v.tape is None for v in bound.values())
