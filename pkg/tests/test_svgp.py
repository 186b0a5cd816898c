import numpy as np
import pytest
import torch

from dvgen import svgp
from dvgen.errors import DimensionMismatch
from dvgen.exact_gp import ExactGpModel, GpDataset, log_marginal_likelihood
from dvgen.kernels import ArdKernelParams
from dvgen.numerics import finite_difference_gradient, flat_function, module_vector, relative_gradient_error, value_and_gradient


def dataset(rng, n=12, d=2):
    X = rng.normal(size=(n, d))
    y = np.cos(X @ np.arange(1, d + 1)) + 0.1 * rng.normal(size=n)
    return X, y


def kern(d, noise=0.1):
    return ArdKernelParams.from_values(sigma_ard=1.1, omega=np.full(d, 0.8), noise_variance=noise)


def randomize_q(model, rng):
    with torch.no_grad():
        model.q_mu.copy_(torch.from_numpy(rng.normal(size=model.q_mu.shape)))
        model.q_sqrt_raw.copy_(torch.from_numpy(0.3 * rng.normal(size=model.q_sqrt_raw.shape)))


def bound(*args, **kw):
    return float(svgp.elbo(*args, **kw).detach())


def exact_lml(X, y, k):
    return float(log_marginal_likelihood(ExactGpModel(k, GpDataset(X, y))))


def test_elbo_below_lml(rng):
    X, y = dataset(rng)
    m = svgp.SvgpModel(X[:5], 1, kernel=kern(2))
    randomize_q(m, rng)
    assert bound(m, X, y) <= exact_lml(X, y, kern(2)) + 1e-6


def test_titsias_optimum_is_tight_with_full_inducing_set(rng):
    X, y = dataset(rng)
    m = svgp.SvgpModel(X, 1, kernel=kern(2))
    svgp.set_optimal_variational(m, X, y)
    assert abs(bound(m, X, y) - exact_lml(X, y, kern(2))) < 1e-3


def test_optimal_q_beats_random_q(rng):
    X, y = dataset(rng)
    m = svgp.SvgpModel(X[:6], 1, kernel=kern(2))
    randomize_q(m, rng)
    before = bound(m, X, y)
    svgp.set_optimal_variational(m, X, y)
    assert bound(m, X, y) >= before


def test_prior_q_has_zero_kl(rng):
    m = svgp.SvgpModel(rng.normal(size=(4, 2)), 3, kernel=kern(2))
    np.testing.assert_allclose(svgp.kl_divergence(m).detach().numpy(), 0.0, atol=1e-10)


def test_kl_matches_dense_gaussian_formula(rng):
    m = svgp.SvgpModel(rng.normal(size=(4, 2)), 2, kernel=kern(2))
    randomize_q(m, rng)
    with torch.no_grad():
        K = svgp.kernel_matrix(m.kernel, m.inducing).numpy()
        mean, cov = m.q_mean().numpy(), m.q_cov().numpy()
        got = svgp.kl_divergence(m).numpy()
    Kinv = np.linalg.inv(K)
    for j in range(2):
        want = 0.5 * (np.trace(Kinv @ cov[j]) + mean[j] @ Kinv @ mean[j] - 4
                      + np.linalg.slogdet(K)[1] - np.linalg.slogdet(cov[j])[1])
        assert got[j] == pytest.approx(want, rel=1e-8)


def test_set_variational_round_trip(rng):
    m = svgp.SvgpModel(rng.normal(size=(3, 2)), 1, kernel=kern(2))
    mean = rng.normal(size=(1, 3))
    B = rng.normal(size=(3, 3))
    cov = (B @ B.T + 0.5 * np.eye(3))[None]
    m.set_variational(mean, cov)
    with torch.no_grad():
        np.testing.assert_allclose(m.q_mean().numpy(), mean, atol=1e-10)
        np.testing.assert_allclose(m.q_cov().numpy(), cov, atol=1e-10)


def test_multi_output_elbo_sums_outputs(rng):
    X, _ = dataset(rng)
    Y = rng.normal(size=(len(X), 2))
    m = svgp.SvgpModel(X[:4], 2, kernel=kern(2))
    randomize_q(m, rng)
    total = bound(m, X, Y)
    parts = []
    for j in range(2):
        mj = svgp.SvgpModel(X[:4], 1, kernel=kern(2))
        with torch.no_grad():
            mj.q_mu.copy_(m.q_mu[j:j + 1])
            mj.q_sqrt_raw.copy_(m.q_sqrt_raw[j:j + 1])
        parts.append(bound(mj, X, Y[:, j]))
    assert total == pytest.approx(sum(parts), rel=1e-12)


def test_minibatch_scaling_is_unbiased(rng):
    X, y = dataset(rng, n=8)
    m = svgp.SvgpModel(X[:3], 1, kernel=kern(2))
    randomize_q(m, rng)
    full = bound(m, X, y)
    halves = [bound(m, X[s], y[s], dataset_size=8) for s in (slice(0, 4), slice(4, 8))]
    assert np.mean(halves) == pytest.approx(full, rel=1e-12)


def test_elbo_gradient_matches_finite_differences(rng):
    X, y = dataset(rng, n=6)
    m = svgp.SvgpModel(X[:3], 1, kernel=kern(2))
    randomize_q(m, rng)
    f, _ = flat_function(m, lambda mm: -svgp.elbo(mm, X, y))
    theta = module_vector(m)
    _, g = value_and_gradient(f, theta)
    assert relative_gradient_error(g, finite_difference_gradient(f, theta)).max() < 1e-4


def test_train_step_improves_bound(rng):
    X, y = dataset(rng, n=20)
    m = svgp.init_svgp(X, 1, num_inducing=6, seed=0)
    state = None
    first = bound(m, X, y)
    for _ in range(60):
        m, state = svgp.train_step(m, X, y, len(X), 0.02, state)
    assert bound(m, X, y) > first
    assert state.step == 60


def test_predict_shapes_and_nonnegative_variance(rng):
    X, y = dataset(rng)
    m = svgp.SvgpModel(X[:5], 1, kernel=kern(2))
    svgp.set_optimal_variational(m, X, y)
    dist = svgp.predict(m, rng.normal(size=(7, 2)))
    assert dist.mean.shape == (7, 1) and dist.var.shape == (7, 1)
    assert (dist.var >= 0).all()


def test_far_away_variance_returns_to_prior(rng):
    X, y = dataset(rng)
    m = svgp.SvgpModel(X[:5], 1, kernel=kern(2))
    svgp.set_optimal_variational(m, X, y)
    far = svgp.predict(m, [[50.0, 50.0]])
    assert float(far.var[0, 0]) == pytest.approx(1.21, rel=1e-9)
    assert abs(float(far.mean[0, 0])) < 1e-9


def test_sample_reproducible_per_seed(rng):
    m = svgp.SvgpModel(rng.normal(size=(4, 2)), 2, kernel=kern(2))
    a = svgp.sample(m, [0.1, 0.2], 7)
    b = svgp.sample(m, [0.1, 0.2], 7)
    c = svgp.sample(m, [0.1, 0.2], 8)
    assert torch.equal(a, b) and not torch.equal(a, c)
    assert a.shape == (2,)


def test_sample_moments(rng):
    X, y = dataset(rng)
    m = svgp.SvgpModel(X[:5], 1, kernel=kern(2))
    svgp.set_optimal_variational(m, X, y)
    gen = torch.Generator().manual_seed(0)
    draws = torch.stack([svgp.sample(m, [0.3, -0.2], gen) for _ in range(4000)])[:, 0].numpy()
    dist = svgp.predict(m, [[0.3, -0.2]])
    sd = float(dist.var[0, 0]) ** 0.5
    assert abs(draws.mean() - float(dist.mean[0, 0])) < 4 * sd / np.sqrt(4000)
    assert draws.std() == pytest.approx(sd, rel=0.1)


def test_reparameterized_sample_gradients_flow(rng):
    m = svgp.SvgpModel(rng.normal(size=(3, 2)), 1, kernel=kern(2))
    z = svgp.reparameterized_sample(m, rng.normal(size=(4, 2)), torch.ones(4, 1, dtype=torch.float64))
    z.sum().backward()
    assert m.q_mu.grad is not None and m.q_sqrt_raw.grad.abs().sum() > 0


def test_noise_floor(rng):
    m = svgp.SvgpModel(rng.normal(size=(3, 1)), 1, noise_floor=1e-3)
    with torch.no_grad():
        m.log_noise.fill_(-50.0)
    assert float(m.kernel.noise_variance) == pytest.approx(1e-3, rel=1e-9)


def test_dimension_errors(rng):
    m = svgp.SvgpModel(rng.normal(size=(3, 2)), 1)
    with pytest.raises(DimensionMismatch):
        svgp.predict(m, np.zeros((2, 3)))
    with pytest.raises(DimensionMismatch):
        svgp.elbo(m, np.zeros((2, 2)), np.zeros(3))
    with pytest.raises(DimensionMismatch):
        svgp.elbo(m, np.zeros((4, 2)), np.zeros(4), dataset_size=2)


class TestRegressor:
    def test_tracks_exact_gp(self, rng):
        X = rng.uniform(-2, 2, size=(40, 1))
        y = np.sin(2 * X[:, 0])
        reg = svgp.SVGPRegressor(n_inducing=15, n_steps=300, lr=0.03).fit(X, y)
        Xq = np.linspace(-1.5, 1.5, 9)[:, None]
        np.testing.assert_allclose(reg.predict(Xq), np.sin(2 * Xq[:, 0]), atol=0.15)
        assert reg.elbo_history_[-1] > reg.elbo_history_[0]

    def test_minibatches_are_seeded(self, rng):
        X = rng.normal(size=(30, 2))
        y = X[:, 0]
        a = svgp.SVGPRegressor(n_inducing=5, n_steps=10, batch_size=8, random_state=3).fit(X, y).predict(X)
        b = svgp.SVGPRegressor(n_inducing=5, n_steps=10, batch_size=8, random_state=3).fit(X, y).predict(X)
        assert np.array_equal(a, b)
