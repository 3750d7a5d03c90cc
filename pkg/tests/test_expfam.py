import numpy as np
import pytest
from scipy.special import digamma
from scipy.stats import invwishart

from crowdmix.expfam import (
    BetaNat,
    CategoricalNat,
    DirichletNat,
    GaussianNat,
    NiwNat,
    beta_expected_stats,
    categorical_expected_stats,
    dirichlet_expected_stats,
    gaussian_expected_stats,
    gaussian_moment_to_nat,
    gaussian_nat_to_moment,
    grad_log_partition_check,
    log_partition,
    niw_expected_stats,
)


# ---------------------------------------------------------------------------
# Dirichlet


def test_dirichlet_uniform_alpha_one():
    # psi(1) - psi(2) = -1 by the recurrence psi(2) = psi(1) + 1
    stats = dirichlet_expected_stats(DirichletNat.from_alpha([1.0, 1.0]))
    assert np.allclose(stats, [-1.0, -1.0], atol=1e-12)


def test_dirichlet_alpha_two_two_monte_carlo():
    rng = np.random.default_rng(0)
    draws = rng.dirichlet([2.0, 2.0], size=1_000_000)
    mc = np.log(draws).mean(axis=0)
    stats = dirichlet_expected_stats(DirichletNat.from_alpha([2.0, 2.0]))
    assert np.allclose(stats, digamma(2.0) - digamma(4.0))
    assert np.max(np.abs(stats - mc)) < 1e-3


def test_dirichlet_alpha_ten_one():
    stats = dirichlet_expected_stats(DirichletNat.from_alpha([10.0, 1.0]))
    assert abs(stats[0] + 0.1) < 1e-12


def test_dirichlet_entries_negative():
    rng = np.random.default_rng(1)
    for _ in range(20):
        alpha = rng.uniform(0.2, 8.0, size=rng.integers(2, 6))
        stats = dirichlet_expected_stats(DirichletNat.from_alpha(alpha))
        assert np.all(stats < 0.0)
        assert np.all(np.isfinite(stats))


def test_dirichlet_rejects_nonfinite():
    with pytest.raises(ValueError):
        DirichletNat(np.array([0.0, np.nan]))
    with pytest.raises(ValueError):
        DirichletNat(np.array([0.0, -1.5]))


# ---------------------------------------------------------------------------
# NIW


def test_niw_zero_mean_identity_scale():
    d = 3
    p = NiwNat.from_standard(np.zeros(d), 1.0, np.eye(d), d + 2.0)
    e = niw_expected_stats(p)
    assert np.allclose(e.mean_prec, 0.0, atol=1e-12)
    assert np.allclose(e.neg_half_prec, -0.5 * (d + 2.0) * np.eye(d), atol=1e-12)


def test_niw_mahalanobis_block():
    p = NiwNat.from_standard(np.zeros(2), 2.0, 2.0 * np.eye(2), 4.0)
    e = niw_expected_stats(p)
    assert abs(e.neg_half_mahal + 0.5) < 1e-12


def test_niw_expected_stats_monte_carlo():
    m = np.array([0.5, -0.3])
    kappa, nu = 2.0, 6.0
    S = np.array([[2.0, 0.3], [0.3, 1.5]])
    p = NiwNat.from_standard(m, kappa, S, nu)
    e = niw_expected_stats(p)

    rng = np.random.default_rng(7)
    n = 100_000
    sigmas = invwishart.rvs(df=nu, scale=S, size=n, random_state=rng)
    precs = np.linalg.inv(sigmas)
    chols = np.linalg.cholesky(sigmas / kappa)
    mus = m + np.einsum("nij,nj->ni", chols, rng.standard_normal((n, 2)))

    mc_mean_prec = np.einsum("nij,nj->ni", precs, mus).mean(axis=0)
    mc_neg_half_prec = -0.5 * precs.mean(axis=0)
    mc_mahal = -0.5 * np.einsum("ni,nij,nj->n", mus, precs, mus).mean()
    mc_logdet = -0.5 * np.linalg.slogdet(sigmas)[1].mean()

    assert np.max(np.abs(e.mean_prec - mc_mean_prec)) < 1e-2
    assert np.max(np.abs(e.neg_half_prec - mc_neg_half_prec)) < 1e-2
    assert abs(e.neg_half_mahal - mc_mahal) < 1e-2
    assert abs(e.neg_half_logdet - mc_logdet) < 1e-2


def test_niw_roundtrip():
    rng = np.random.default_rng(3)
    for _ in range(20):
        d = int(rng.integers(1, 4))
        m = rng.standard_normal(d)
        kappa = float(rng.uniform(0.2, 5.0))
        A = rng.standard_normal((d, d))
        S = A @ A.T + d * np.eye(d)
        nu = float(d + rng.uniform(0.5, 4.0))
        m2, kappa2, S2, nu2 = NiwNat.from_standard(m, kappa, S, nu).to_standard()
        assert np.max(np.abs(m - m2)) < 1e-10
        assert abs(kappa - kappa2) < 1e-10
        assert np.max(np.abs(S - S2)) < 1e-10
        assert abs(nu - nu2) < 1e-10


def test_niw_rejects_bad_scale():
    p = NiwNat.from_standard(np.zeros(2), 1.0, np.eye(2), 4.0)
    bad = NiwNat(p.h1, -np.eye(2), p.h3, p.h4)
    with pytest.raises(np.linalg.LinAlgError):
        niw_expected_stats(bad)


# ---------------------------------------------------------------------------
# Beta


def test_beta_uniform():
    assert np.allclose(beta_expected_stats(BetaNat.from_tau(1.0, 1.0)), [-1.0, -1.0], atol=1e-12)


def test_beta_ten_one():
    stats = beta_expected_stats(BetaNat.from_tau(10.0, 1.0))
    assert abs(stats[0] + 0.1) < 1e-12


def test_beta_nine_one_monte_carlo():
    rng = np.random.default_rng(11)
    draws = rng.beta(9.0, 1.0, size=1_000_000)
    stats = beta_expected_stats(BetaNat.from_tau(9.0, 1.0))
    assert abs(stats[0] - np.log(draws).mean()) < 1e-3


# ---------------------------------------------------------------------------
# Categorical


def test_categorical_symmetry_and_shift():
    p0 = categorical_expected_stats(CategoricalNat(np.zeros(3)))
    assert np.allclose(p0, 1.0 / 3.0, atol=1e-12)
    rng = np.random.default_rng(5)
    for _ in range(20):
        eta = rng.standard_normal(4)
        c = float(rng.standard_normal())
        a = categorical_expected_stats(CategoricalNat(eta))
        b = categorical_expected_stats(CategoricalNat(eta + c))
        assert np.max(np.abs(a - b)) < 1e-12
        assert abs(a.sum() - 1.0) < 1e-12
        assert np.all(a > 0.0)


def test_categorical_direct_normalization():
    p = categorical_expected_stats(CategoricalNat(np.log(np.array([1.0, 3.0]))))
    assert np.allclose(p, [0.25, 0.75], atol=1e-12)


# ---------------------------------------------------------------------------
# Gaussian


def test_gaussian_nat_to_moment_identity():
    mean, cov = gaussian_nat_to_moment(GaussianNat(np.zeros(2), -0.5 * np.eye(2)))
    assert np.allclose(mean, 0.0, atol=1e-12)
    assert np.allclose(cov, np.eye(2), atol=1e-12)
    mean, cov = gaussian_nat_to_moment(GaussianNat(np.array([1.0, 0.0]), -0.5 * np.eye(2)))
    assert np.allclose(mean, [1.0, 0.0], atol=1e-12)


def test_gaussian_roundtrip():
    rng = np.random.default_rng(9)
    for _ in range(20):
        d = int(rng.integers(1, 5))
        mean = rng.standard_normal(d)
        A = rng.standard_normal((d, d))
        cov = A @ A.T + 0.5 * np.eye(d)
        mean2, cov2 = gaussian_nat_to_moment(gaussian_moment_to_nat(mean, cov))
        assert np.max(np.abs(mean - mean2)) < 1e-10
        assert np.max(np.abs(cov - cov2)) < 1e-10


def test_gaussian_rejects_indefinite():
    with pytest.raises(np.linalg.LinAlgError):
        gaussian_nat_to_moment(GaussianNat(np.zeros(2), 0.5 * np.eye(2)))


# ---------------------------------------------------------------------------
# log partitions


def test_log_partition_values():
    assert abs(log_partition(BetaNat.from_tau(1.0, 1.0))) < 1e-12
    assert abs(log_partition(DirichletNat.from_alpha([1.0, 1.0, 1.0])) + np.log(2.0)) < 1e-12
    assert abs(log_partition(gaussian_moment_to_nat(np.zeros(3), np.eye(3)))) < 1e-12


def test_log_partition_categorical_conventions():
    # normalized log-probabilities give 0; generic form is log-sum-exp
    assert abs(log_partition(CategoricalNat(np.log([0.25, 0.75])))) < 1e-12
    eta = np.array([0.4, -1.2, 2.0])
    expect = np.log(np.exp(eta).sum())
    assert abs(log_partition(CategoricalNat(eta)) - expect) < 1e-12


# ---------------------------------------------------------------------------
# gradient identity  grad_eta log Z = E[t]


def test_grad_check_beta_example():
    assert grad_log_partition_check(BetaNat.from_tau(3.0, 2.0), 1e-5) < 1e-5


def test_grad_check_dirichlet_example():
    assert grad_log_partition_check(DirichletNat.from_alpha([2.0, 3.0, 4.0]), 1e-5) < 1e-5


def test_grad_check_niw_example():
    p = NiwNat.from_standard(np.zeros(2), 1.0, np.eye(2), 5.0)
    assert grad_log_partition_check(p, 1e-4) < 1e-3


def _random_family_points(rng):
    k = int(rng.integers(2, 5))
    yield DirichletNat.from_alpha(rng.uniform(0.5, 6.0, size=k)), 1e-4
    yield BetaNat.from_tau(rng.uniform(0.5, 8.0), rng.uniform(0.5, 8.0)), 1e-4
    yield CategoricalNat(rng.standard_normal(k)), 1e-4
    d = int(rng.integers(1, 4))
    A = rng.standard_normal((d, d))
    cov = A @ A.T + 0.5 * np.eye(d)
    yield gaussian_moment_to_nat(rng.standard_normal(d), cov), 1e-4
    B = rng.standard_normal((d, d))
    S = B @ B.T + d * np.eye(d)
    p = NiwNat.from_standard(
        rng.standard_normal(d), rng.uniform(0.5, 3.0), S, d + rng.uniform(1.0, 4.0)
    )
    yield p, 1e-3


def test_grad_check_random_interior_points():
    rng = np.random.default_rng(17)
    for _ in range(20):
        for p, tol in _random_family_points(rng):
            assert grad_log_partition_check(p, 1e-5) < tol, type(p).__name__


def test_grad_check_domain_error():
    # alpha = 1e-6: a 1e-3 step on eta crosses alpha = 0
    p = DirichletNat.from_alpha([1e-6, 2.0])
    with pytest.raises(ValueError):
        grad_log_partition_check(p, 1e-3)
