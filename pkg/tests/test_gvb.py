import math

import numpy as np
import pytest
import scipy.stats as ss
from hypothesis import given, settings
from hypothesis import strategies as st

from varbayes.ffvb import TrainerConfig
from varbayes.gvb import (
    DegenerateFactorError,
    GaussianCholeskyFamily,
    GaussianCholeskyParams,
    GaussianFactorFamily,
    GaussianFactorParams,
    cholesky_grad_logq,
    cholesky_logq,
    factor_grad_logq,
    factor_logq,
    factor_natural_gradient,
    factor_sample,
    nagvac_natural_gradient,
    nagvac_v1,
    reparam_gradient_cholesky,
    reparam_gradient_factor,
    reparam_sample_cholesky,
    run_cholesky_gvb,
    run_nagvac,
    unvech,
    vech,
)
from varbayes.models import gaussian_target_model, generate_logistic_data, logistic_loss, logistic_model
from varbayes.special import DomainError


def random_factor(rng, d):
    return GaussianFactorParams(rng.normal(size=d), rng.normal(size=d), rng.uniform(0.3, 2.0, size=d) * rng.choice([-1, 1], d))


def random_cholesky(rng, d):
    L = np.tril(rng.normal(size=(d, d)) * 0.5)
    L[np.diag_indices(d)] = rng.uniform(0.5, 1.5, size=d)
    return GaussianCholeskyParams.from_L(rng.normal(size=d), L)


def dense_fisher_blocks(b, c):
    """Gaussian Fisher 0.5 tr(S^-1 dS S^-1 dS) for the b and c blocks, built densely."""
    d = len(b)
    S = np.outer(b, b) + np.diag(c * c)
    Si = np.linalg.inv(S)
    dS_b, dS_c = [], []
    for i in range(d):
        e = np.zeros(d)
        e[i] = 1.0
        dS_b.append(np.outer(e, b) + np.outer(b, e))
        dS_c.append(np.diag(2 * c * e))

    def block(A):
        return np.array([[0.5 * np.trace(Si @ X @ Si @ Y) for Y in A] for X in A])

    return Si, block(dS_b), block(dS_c)


# ---------------------------------------------------------------------------
# Cholesky family


@given(st.integers(1, 7))
def test_vech_roundtrip(d):
    L = np.tril(np.arange(1.0, d * d + 1).reshape(d, d))
    v = vech(L)
    assert len(v) == d * (d + 1) // 2
    np.testing.assert_array_equal(unvech(v, d), L)
    # column-stacked: the first d entries are the first column
    np.testing.assert_array_equal(v[:d], L[:, 0])


def test_unvech_length_check():
    with pytest.raises(ValueError):
        unvech(np.ones(4), 2)


@pytest.mark.parametrize("seed", range(5))
def test_cholesky_logq_and_grad(seed):
    rng = np.random.default_rng(seed)
    d = 1 + seed
    p = random_cholesky(rng, d)
    thetas = rng.normal(size=(6, d))
    mvn = ss.multivariate_normal(p.mu, p.cov)
    np.testing.assert_allclose(cholesky_logq(p, thetas), mvn.logpdf(thetas).reshape(-1), rtol=1e-10)
    np.testing.assert_allclose(
        cholesky_grad_logq(p, thetas), -(thetas - p.mu) @ np.linalg.inv(p.cov), rtol=1e-9, atol=1e-10
    )


def test_cholesky_sampling_covariance():
    rng = np.random.default_rng(0)
    p = random_cholesky(rng, 3)
    draws = reparam_sample_cholesky(p, rng.standard_normal((200_000, 3)))
    np.testing.assert_allclose(np.cov(draws.T), p.cov, atol=0.03)


def test_cholesky_zero_diagonal_rejected():
    p = GaussianCholeskyParams.from_L(np.zeros(2), np.array([[1.0, 0.0], [0.3, 0.0]]))
    with pytest.raises(np.linalg.LinAlgError):
        cholesky_logq(p, np.zeros((1, 2)))


def analytic_cholesky_gradient(target_mean, target_cov, p: GaussianCholeskyParams):
    P = np.linalg.inv(target_cov)
    L = p.L
    return -P @ (p.mu - target_mean), vech(-P @ L + np.linalg.inv(L).T)


def test_cholesky_reparam_gradient_unbiased():
    rng = np.random.default_rng(1)
    d = 3
    A = rng.normal(size=(d, d))
    cov = A @ A.T + np.eye(d)
    mean = rng.normal(size=d)
    model = gaussian_target_model(mean, cov)
    p = random_cholesky(rng, d)
    S = 40_000
    eps = rng.standard_normal((S, d))
    g_mu, g_L, _ = reparam_gradient_cholesky(model, p, eps)
    # per-draw gradients for standard errors
    per = [reparam_gradient_cholesky(model, p, eps[i:i + 1]) for i in range(2000)]
    se_mu = np.std([x[0] for x in per], axis=0) / math.sqrt(S)
    se_L = np.std([x[1] for x in per], axis=0) / math.sqrt(S)
    a_mu, a_L = analytic_cholesky_gradient(mean, cov, p)
    assert np.all(np.abs(g_mu - a_mu) < 5 * se_mu + 1e-10)
    assert np.all(np.abs(g_L - a_L) < 5 * se_L + 1e-10)


def test_cholesky_gvb_on_gaussian_target():
    mean = np.array([1.0, -0.5])
    cov = np.array([[0.3, 0.1], [0.1, 0.2]])
    model = gaussian_target_model(mean, cov)
    cfg = TrainerConfig(num_samples=50, learning_rate=0.01, max_iter=3000, max_patience=50, seed=0)
    res = run_cholesky_gvb(model, cfg)
    p = GaussianCholeskyParams.from_lambda(res.lambda_best, 2)
    np.testing.assert_allclose(p.mu, mean, atol=0.03)
    np.testing.assert_allclose(p.cov, cov, atol=0.03)


def test_cholesky_family_init():
    fam = GaussianCholeskyFamily(3)
    lam = fam.initial_lambda(np.random.default_rng(0))
    np.testing.assert_allclose(fam.params(lam).L, 0.1 * np.eye(3))


# ---------------------------------------------------------------------------
# factor family


@pytest.mark.parametrize("seed", range(50))
def test_factor_identities_dense(seed):
    rng = np.random.default_rng(100 + seed)
    d = int(rng.integers(1, 9))
    p = random_factor(rng, d)
    thetas = rng.normal(size=(4, d)) * 2
    Sigma = p.cov
    mvn = ss.multivariate_normal(p.mu, Sigma)
    np.testing.assert_allclose(factor_logq(p, thetas), mvn.logpdf(thetas).reshape(-1), rtol=1e-10, atol=1e-10)
    dense = -np.linalg.solve(Sigma, (thetas - p.mu).T).T
    np.testing.assert_allclose(factor_grad_logq(p, thetas), dense, rtol=1e-10, atol=1e-10)
    assert isinstance(factor_logq(p, thetas[0]), float)


def test_factor_sample_covariance():
    rng = np.random.default_rng(2)
    p = random_factor(rng, 4)
    S = 200_000
    draws = factor_sample(p, rng.standard_normal(S), rng.standard_normal((S, 4)))
    np.testing.assert_allclose(np.cov(draws.T), p.cov, atol=0.05 * np.abs(p.cov).max())
    np.testing.assert_allclose(factor_sample(p, 0.0, np.zeros(4)), p.mu)


def test_factor_zero_c_rejected():
    p = GaussianFactorParams(np.zeros(2), np.ones(2), np.array([1.0, 0.0]))
    with pytest.raises(DomainError):
        factor_logq(p, np.zeros(2))


def test_factor_reparam_gradient_unbiased():
    rng = np.random.default_rng(3)
    d = 4
    A = rng.normal(size=(d, d))
    cov = A @ A.T + np.eye(d)
    mean = rng.normal(size=d)
    model = gaussian_target_model(mean, cov)
    p = random_factor(rng, d)
    P = np.linalg.inv(cov)
    Si = np.linalg.inv(p.cov)
    analytic = np.concatenate([-P @ (p.mu - mean), (Si - P) @ p.b, np.diag(Si - P) * p.c])
    S = 100_000
    e1, e2 = rng.standard_normal(S), rng.standard_normal((S, d))
    grad, _ = reparam_gradient_factor(model, p, e1, e2)
    per = np.array([reparam_gradient_factor(model, p, e1[i:i + 1], e2[i:i + 1])[0] for i in range(3000)])
    se = per.std(axis=0) / math.sqrt(S)
    assert np.all(np.abs(grad - analytic) < 5 * se + 1e-10)


def transcribed_nagvac(b, c, g):
    """Element-by-element loop transcription of the closed form."""
    d = len(b)
    g1, g2, g3 = g[:d], g[d:2 * d], g[2 * d:]
    out = np.zeros(3 * d)
    bg1 = sum(b[i] * g1[i] for i in range(d))
    bg2 = sum(b[i] * g2[i] for i in range(d))
    k1 = sum(b[i] ** 2 / c[i] ** 2 for i in range(d))
    v1 = [c[i] ** 2 - 2 * b[i] ** 2 / c[i] ** 4 for i in range(d)]
    v2 = [b[i] ** 2 / c[i] ** 3 for i in range(d)]
    k2 = 1.0 / (2.0 * (1.0 + sum(v2[i] ** 2 / v1[i] for i in range(d))))
    uv = sum(v2[i] / v1[i] * g3[i] for i in range(d))
    for i in range(d):
        out[i] = bg1 * b[i] + c[i] ** 2 * g1[i]
        out[d + i] = (1 + k1) / (2 * k1) * (bg2 * b[i] + c[i] ** 2 * g2[i])
        out[2 * d + i] = g3[i] / (2 * v1[i]) + k2 * uv * v2[i] / v1[i]
    return out


@pytest.mark.parametrize("seed", range(20))
def test_nagvac_matches_transcription(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 9))
    b, c, g = rng.normal(size=d), rng.uniform(0.2, 2, size=d), rng.normal(size=3 * d)
    np.testing.assert_allclose(nagvac_natural_gradient(b, c, g), transcribed_nagvac(b, c, g), rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(nagvac_v1(b, c), c ** 2 - 2 * b ** 2 / c ** 4)


def test_nagvac_degenerate_inputs():
    with pytest.raises(DegenerateFactorError):
        nagvac_natural_gradient(np.zeros(3), np.ones(3), np.ones(9))
    b = np.array([1.0 / math.sqrt(2.0)])  # v1 = 1 - 2 b^2 = 0 at c = 1
    with pytest.raises(DegenerateFactorError):
        nagvac_natural_gradient(b, np.ones(1), np.ones(3))
    with pytest.raises(ValueError):
        nagvac_natural_gradient(np.ones(2), np.ones(2), np.ones(5))


@pytest.mark.parametrize("seed", range(10))
def test_factor_natural_gradient_matches_dense_block_fisher(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 8))
    b, c, g = rng.normal(size=d), rng.uniform(0.3, 2, size=d), rng.normal(size=3 * d)
    Si, Ibb, Icc = dense_fisher_blocks(b, c)
    expected = np.concatenate([
        np.linalg.solve(Si, g[:d]),
        np.linalg.solve(Ibb, g[d:2 * d]),
        np.linalg.solve(Icc, g[2 * d:]),
    ])
    np.testing.assert_allclose(factor_natural_gradient(b, c, g), expected, rtol=1e-8, atol=1e-10)
    # the mu blocks of both maps are Sigma g1
    Sigma = np.outer(b, b) + np.diag(c * c)
    np.testing.assert_allclose(nagvac_natural_gradient(b, c, g)[:d], Sigma @ g[:d], rtol=1e-10, atol=1e-12)


def test_factor_natural_gradient_zero_b():
    with pytest.raises(DegenerateFactorError):
        factor_natural_gradient(np.zeros(2), np.ones(2), np.ones(6))


def test_factor_family_options():
    with pytest.raises(ValueError):
        GaussianFactorFamily(3, natural="other")
    lam = GaussianFactorFamily(5).initial_lambda(np.random.default_rng(0))
    assert np.all(lam[10:] == 0.01) and np.all(lam[5:10] != 0)


def _nagvac_problem():
    theta = np.array([0.5, -1.0, 1.0, 0.0])
    X, y = generate_logistic_data(600, theta, 2)
    return theta, X[:480], y[:480], X[480:], y[480:]


def test_run_nagvac_small_logistic():
    theta, Xt, yt, Xv, yv = _nagvac_problem()
    model = logistic_model(Xt, yt)
    cfg = TrainerConfig(learning_rate=0.01, max_iter=2000, seed=0)
    res = run_nagvac(model, cfg, validation_loss=lambda lam: logistic_loss(Xv, yv, lam[:4]))
    assert res.termination.value == "patience"
    assert min(res.loss) == res.loss[res.best_index]
    assert min(res.loss) < logistic_loss(Xv, yv, np.zeros(4))
    mu = res.lambda_best[:4]
    assert np.all(np.sign(mu[:3]) == np.sign(theta[:3]))
    assert not res.diagnostics


def test_run_nagvac_deterministic_and_requires_loss():
    theta, Xt, yt, Xv, yv = _nagvac_problem()
    model = logistic_model(Xt, yt)
    cfg = TrainerConfig(max_iter=50, seed=4)
    loss = lambda lam: logistic_loss(Xv, yv, lam[:4])
    a = run_nagvac(model, cfg, validation_loss=loss)
    b = run_nagvac(model, cfg, validation_loss=loss)
    np.testing.assert_array_equal(a.lambda_best, b.lambda_best)
    with pytest.raises(ValueError):
        run_nagvac(model, cfg)
    with pytest.raises(ValueError):
        run_nagvac(model, cfg, validation_loss=loss, lambda0=np.ones(5))


# ---------------------------------------------------------------------------
# worked examples


def test_cholesky_sample_worked_cases():
    mu = np.array([1.0, -1.0])
    p = GaussianCholeskyParams.from_L(mu, np.eye(2))
    np.testing.assert_array_equal(reparam_sample_cholesky(p, np.zeros(2)), mu)
    np.testing.assert_array_equal(reparam_sample_cholesky(p, [1.0, 0.0]), mu + [1.0, 0.0])
    p = GaussianCholeskyParams.from_L(mu, np.array([[1.0, 0.0], [0.5, 2.0]]))
    np.testing.assert_allclose(reparam_sample_cholesky(p, [1.0, 1.0]), mu + [1.0, 2.5])


def _per_draw_stats(fn, n):
    per = np.array([fn(i) for i in range(n)])
    return per.mean(axis=0), per.std(axis=0, ddof=1) / math.sqrt(n)


def test_cholesky_gradient_zero_at_optimum():
    mean = np.array([0.5, -1.0])
    cov = np.array([[1.0, 0.3], [0.3, 0.5]])
    model = gaussian_target_model(mean, cov)
    p = GaussianCholeskyParams.from_L(mean, np.linalg.cholesky(cov))
    eps = np.random.default_rng(0).standard_normal((100_000, 2))
    g_mu, g_L, _ = reparam_gradient_cholesky(model, p, eps)
    assert len(g_L) == 3
    # at q = target the per-draw gradient is identically zero
    np.testing.assert_allclose(g_mu, 0, atol=1e-10)
    np.testing.assert_allclose(g_L, 0, atol=1e-10)


def test_cholesky_gradient_1d_analytic():
    model = gaussian_target_model([0.0], [[1.0]])
    mu, L = 0.3, 1.2
    p = GaussianCholeskyParams.from_L([mu], [[L]])
    eps = np.random.default_rng(1).standard_normal((100_000, 1))
    mean, se = _per_draw_stats(
        lambda i: np.concatenate(reparam_gradient_cholesky(model, p, eps[i:i + 1])[:2]), 100_000)
    assert np.all(np.abs(mean - [-mu, 1 / L - L]) <= 4 * se + 1e-12)


def test_cholesky_gradient_vs_crn_finite_differences():
    from varbayes.ffvb import estimate_lb

    mean = np.array([0.2, -0.4, 1.0])
    A = np.random.default_rng(2).normal(size=(3, 3))
    cov = A @ A.T + np.eye(3)
    model = gaussian_target_model(mean, cov)
    fam = GaussianCholeskyFamily(3)
    lam = np.concatenate([np.zeros(3), vech(np.eye(3) * 0.8 + np.tril(np.full((3, 3), 0.1), -1))])
    S = 200_000
    step = 1e-4
    fd = np.array([
        (estimate_lb(fam, model, lam + step * e, S, np.random.default_rng(7))
         - estimate_lb(fam, model, lam - step * e, S, np.random.default_rng(7))) / (2 * step)
        for e in np.eye(len(lam))
    ])
    eps = np.random.default_rng(8).standard_normal((S, 3))
    g_mu, g_L, _ = reparam_gradient_cholesky(model, fam.params(lam), eps)
    per = np.array([np.concatenate(reparam_gradient_cholesky(model, fam.params(lam), eps[i:i + 1])[:2])
                    for i in range(5000)])
    se = per.std(axis=0, ddof=1) / math.sqrt(S)
    assert np.all(np.abs(np.concatenate([g_mu, g_L]) - fd) <= 4 * se * math.sqrt(2) + 1e-6)


def test_cholesky_gvb_covariance_and_determinism():
    mean = np.array([1.0, -0.5])
    cov = np.array([[0.3, 0.1], [0.1, 0.2]])
    model = gaussian_target_model(mean, cov)
    cfg = TrainerConfig(num_samples=50, learning_rate=0.01, max_iter=3000, max_patience=50, seed=4)
    a = run_cholesky_gvb(model, cfg)
    b = run_cholesky_gvb(model, cfg)
    assert np.linalg.norm(GaussianCholeskyParams.from_lambda(a.lambda_best, 2).cov - cov) < 0.05
    np.testing.assert_array_equal(a.lambda_best, b.lambda_best)
    assert a.trace.raw == b.trace.raw and a.iterations == b.iterations


def test_factor_sample_worked_cases():
    mu = np.array([0.5, 1.0])
    p = GaussianFactorParams(mu, np.array([1.0, 2.0]), np.array([1.0, 1.0]))
    np.testing.assert_array_equal(factor_sample(p, 0.0, np.zeros(2)), mu)
    p0 = GaussianFactorParams(np.zeros(2), np.zeros(2), np.array([2.0, 3.0]))
    np.testing.assert_allclose(factor_sample(p0, 5.0, [1.0, -1.0]), [2.0, -3.0])
    p1 = GaussianFactorParams(np.zeros(2), np.array([1.0, 2.0]), np.ones(2))
    np.testing.assert_allclose(factor_sample(p1, 1.0, [1.0, -1.0]), [2.0, 1.0])


def test_factor_density_special_cases():
    p = GaussianFactorParams(np.array([0.4]), np.array([0.7]), np.array([1.3]))
    assert factor_logq(p, np.array([1.1])) == pytest.approx(ss.norm(0.4, math.sqrt(0.49 + 1.69)).logpdf(1.1))
    mu, c = np.array([0.0, 1.0, -2.0]), np.array([0.5, 2.0, 1.0])
    p = GaussianFactorParams(mu, np.zeros(3), c)
    x = np.array([0.3, 0.3, 0.3])
    assert factor_logq(p, x) == pytest.approx(ss.norm(mu, c).logpdf(x).sum())
    np.testing.assert_allclose(factor_grad_logq(p, x), -(x - mu) / c ** 2)
    p = random_factor(np.random.default_rng(0), 6)
    np.testing.assert_allclose(factor_grad_logq(p, p.mu), 0.0, atol=1e-15)


def test_factor_gradient_zero_at_matching_optimum():
    b, c = np.array([0.6, -0.3, 0.2]), np.array([0.8, 1.1, 0.5])
    mean = np.array([0.1, 0.2, 0.3])
    cov = np.outer(b, b) + np.diag(c ** 2)
    model = gaussian_target_model(mean, cov)
    p = GaussianFactorParams(mean, b, c)
    rng = np.random.default_rng(3)
    S = 100_000
    e1, e2 = rng.standard_normal(S), rng.standard_normal((S, 3))
    g, _ = reparam_gradient_factor(model, p, e1, e2)
    assert g.shape == (9,)
    np.testing.assert_allclose(g, 0.0, atol=1e-10)


def test_factor_gradient_1d_crn_finite_differences():
    from varbayes.ffvb import estimate_lb

    model = gaussian_target_model([0.0], [[1.0]])
    fam = GaussianFactorFamily(1)
    lam = np.array([0.2, 0.3, 0.9])
    S = 400_000
    step = 1e-4
    fd = np.array([
        (estimate_lb(fam, model, lam + step * e, S, np.random.default_rng(11))
         - estimate_lb(fam, model, lam - step * e, S, np.random.default_rng(11))) / (2 * step)
        for e in np.eye(3)
    ])
    rng = np.random.default_rng(12)
    e1, e2 = rng.standard_normal(S), rng.standard_normal((S, 1))
    p = GaussianFactorParams.from_lambda(lam)
    g, _ = reparam_gradient_factor(model, p, e1, e2)
    per = np.array([reparam_gradient_factor(model, p, e1[i:i + 1], e2[i:i + 1])[0] for i in range(5000)])
    se = per.std(axis=0, ddof=1) / math.sqrt(S)
    assert np.all(np.abs(g - fd) <= 4 * se * math.sqrt(2) + 1e-6)


def test_nagvac_worked_cases():
    b, c = np.array([0.5, -0.2, 0.1]), np.array([1.1, 0.9, 1.3])
    np.testing.assert_array_equal(nagvac_natural_gradient(b, c, np.zeros(9)), 0.0)
    g = np.random.default_rng(0).normal(size=9)
    out = nagvac_natural_gradient(b, c, g)
    assert out.shape == (9,)
    np.testing.assert_allclose(out, transcribed_nagvac(b, c, g), rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(out[:3], (np.outer(b, b) + np.diag(c ** 2)) @ g[:3], rtol=1e-12)


def test_nagvac_agrees_with_cholesky_gvb():
    theta = np.array([0.5, -1.0, 1.5, 0.0, -0.5])
    X, y = generate_logistic_data(500, theta, 11)
    Xt, yt, Xv, yv = X[:400], y[:400], X[400:], y[400:]
    model = logistic_model(Xt, yt, 50.0)
    chol = run_cholesky_gvb(model, TrainerConfig(max_iter=5000, step_adaptive=500, seed=1))
    nag = run_nagvac(model, TrainerConfig(learning_rate=0.01, max_iter=5000, seed=1),
                     validation_loss=lambda lam: logistic_loss(Xv, yv, lam[:5]))
    assert np.all(np.abs(nag.lambda_best[:5] - chol.lambda_best[:5]) < 0.2)


def test_nagvac_printed_mode_flags_negative_v1():
    X, y = generate_logistic_data(200, np.array([0.5, -0.5]), 3)
    model = logistic_model(X, y)
    # c^2 - 2 b^2 / c^2 < 0 for b = 1, c = 0.5
    lam0 = np.array([0.0, 0.0, 1.0, 1.0, 0.5, 0.5])
    cfg = TrainerConfig(learning_rate=1e-4, max_iter=3, seed=0)
    loss = lambda lam: logistic_loss(X, y, lam[:2])
    printed = run_nagvac(model, cfg, validation_loss=loss, lambda0=lam0, natural="printed")
    assert any("v1" in msg for msg in printed.diagnostics)
    block = run_nagvac(model, cfg, validation_loss=loss, lambda0=lam0)
    assert not any("v1" in msg for msg in block.diagnostics)
