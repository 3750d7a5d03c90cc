"""Exponential-family primitives.

Every family is represented by its natural parameters and follows the
convention

    p(x) = exp{ <eta, t(x)> - log Z(eta) } h(x),

so that grad_eta log Z(eta) = E[t(x)].  The five families used by the
model:

    Dirichlet    eta = alpha - 1,            t(pi) = log pi
    NIW          eta = (kappa m,
                        S + kappa m m^T,
                        kappa,
                        nu + d + 2),         t(mu, Sigma) = (Sigma^-1 mu,
                                                             -1/2 Sigma^-1,
                                                             -1/2 mu^T Sigma^-1 mu,
                                                             -1/2 log|Sigma|)
    Beta         eta = (tau1 - 1, tau2 - 1), t(a) = (log a, log(1 - a))
    Categorical  eta = unnormalized log-probabilities, t(z) = one-hot(z)
    Gaussian     eta = (Sigma^-1 mu, -1/2 Sigma^-1), t(x) = (x, x x^T)

Log partitions drop additive constants that do not depend on eta; the
gradient identity above holds exactly for the expressions used here.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import digamma, gammaln


def _readonly(x, shape=None) -> np.ndarray:
    a = np.array(x, dtype=float)
    if shape is not None and a.shape != shape:
        raise ValueError(f"expected shape {shape}, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("natural parameters must be finite")
    a.setflags(write=False)
    return a


def multivariate_digamma(a: float, d: int) -> float:
    """psi_d(a) = sum_{i=1..d} psi(a + (1 - i)/2)."""
    return float(np.sum(digamma(a + (1.0 - np.arange(1, d + 1)) / 2.0)))


def multivariate_gammaln(a: float, d: int) -> float:
    """log Gamma_d(a) = d(d-1)/4 log pi + sum_{i=1..d} log Gamma(a + (1 - i)/2)."""
    return float(
        d * (d - 1) / 4.0 * np.log(np.pi)
        + np.sum(gammaln(a + (1.0 - np.arange(1, d + 1)) / 2.0))
    )


def _chol_logdet(S: np.ndarray) -> tuple[np.ndarray, float]:
    """Cholesky factor and log-determinant of a symmetric positive definite S."""
    L = np.linalg.cholesky(S)  # raises LinAlgError if not positive definite
    return L, 2.0 * float(np.sum(np.log(np.diagonal(L))))


# ---------------------------------------------------------------------------
# parameter records


@dataclass(frozen=True)
class DirichletNat:
    """Dirichlet over a K-simplex, eta_k = alpha_k - 1 with alpha_k > 0."""

    eta: np.ndarray

    def __post_init__(self):
        eta = _readonly(self.eta)
        if eta.ndim != 1 or eta.shape[0] < 2:
            raise ValueError("Dirichlet needs a 1-d eta with K >= 2")
        if np.any(eta <= -1.0):
            raise ValueError("Dirichlet eta must satisfy eta_k > -1")
        object.__setattr__(self, "eta", eta)

    @classmethod
    def from_alpha(cls, alpha) -> "DirichletNat":
        return cls(np.asarray(alpha, dtype=float) - 1.0)

    @property
    def alpha(self) -> np.ndarray:
        return self.eta + 1.0


@dataclass(frozen=True)
class NiwNat:
    """Normal-inverse-Wishart over (mu, Sigma) in natural form.

    h1 = kappa m, h2 = S + kappa m m^T, h3 = kappa, h4 = nu + d + 2.
    Requires h3 > 0; the recovered S must be symmetric positive definite
    and the recovered nu must satisfy nu > d - 1 (checked where used).
    """

    h1: np.ndarray
    h2: np.ndarray
    h3: float
    h4: float

    def __post_init__(self):
        h1 = _readonly(self.h1)
        if h1.ndim != 1:
            raise ValueError("h1 must be a vector")
        d = h1.shape[0]
        h2 = _readonly(self.h2, shape=(d, d))
        h3 = float(self.h3)
        h4 = float(self.h4)
        if not np.isfinite(h3) or not np.isfinite(h4):
            raise ValueError("h3, h4 must be finite")
        if h3 <= 0.0:
            raise ValueError("h3 (= kappa) must be positive")
        object.__setattr__(self, "h1", h1)
        object.__setattr__(self, "h2", h2)
        object.__setattr__(self, "h3", h3)
        object.__setattr__(self, "h4", h4)

    @property
    def dim(self) -> int:
        return self.h1.shape[0]

    @classmethod
    def from_standard(cls, m, kappa, S, nu) -> "NiwNat":
        m = np.asarray(m, dtype=float)
        S = np.asarray(S, dtype=float)
        d = m.shape[0]
        return cls(kappa * m, S + kappa * np.outer(m, m), float(kappa), float(nu) + d + 2.0)

    def to_standard(self) -> tuple[np.ndarray, float, np.ndarray, float]:
        """Return (m, kappa, S, nu); S is symmetrized against numeric drift."""
        d = self.dim
        kappa = self.h3
        m = self.h1 / kappa
        S = self.h2 - np.outer(self.h1, self.h1) / kappa
        S = 0.5 * (S + S.T)
        nu = self.h4 - d - 2.0
        if nu <= d - 1.0:
            raise ValueError(f"recovered nu = {nu} must exceed d - 1 = {d - 1}")
        return m, kappa, S, nu


@dataclass(frozen=True)
class BetaNat:
    """Beta over (0, 1), eta = (tau1 - 1, tau2 - 1) with tau > 0."""

    eta: np.ndarray

    def __post_init__(self):
        eta = _readonly(self.eta, shape=(2,))
        if np.any(eta <= -1.0):
            raise ValueError("Beta eta must satisfy eta > -1")
        object.__setattr__(self, "eta", eta)

    @classmethod
    def from_tau(cls, tau1: float, tau2: float) -> "BetaNat":
        return cls(np.array([tau1 - 1.0, tau2 - 1.0]))

    @property
    def tau(self) -> np.ndarray:
        return self.eta + 1.0

    @property
    def mean(self) -> float:
        tau = self.tau
        return float(tau[0] / tau.sum())


@dataclass(frozen=True)
class CategoricalNat:
    """Categorical over K states, eta = (possibly unnormalized) log-probabilities."""

    eta: np.ndarray

    def __post_init__(self):
        eta = _readonly(self.eta)
        if eta.ndim != 1 or eta.shape[0] < 2:
            raise ValueError("Categorical needs a 1-d eta with K >= 2")
        object.__setattr__(self, "eta", eta)


@dataclass(frozen=True)
class GaussianNat:
    """Gaussian in natural form: h = Sigma^-1 mu, J = -1/2 Sigma^-1 (symmetric, negative definite)."""

    h: np.ndarray
    J: np.ndarray

    def __post_init__(self):
        h = _readonly(self.h)
        if h.ndim != 1:
            raise ValueError("h must be a vector")
        d = h.shape[0]
        J = _readonly(self.J, shape=(d, d))
        if not np.allclose(J, J.T, atol=1e-8):
            raise ValueError("J must be symmetric")
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "J", J)

    @property
    def dim(self) -> int:
        return self.h.shape[0]


class NiwExpectedStats(NamedTuple):
    """E[t(mu, Sigma)] blocks under a NIW with standard parameters (m, kappa, S, nu)."""

    mean_prec: np.ndarray       # E[Sigma^-1 mu]           = nu S^-1 m
    neg_half_prec: np.ndarray   # E[-1/2 Sigma^-1]         = -1/2 nu S^-1
    neg_half_mahal: float       # E[-1/2 mu^T Sigma^-1 mu] = -1/2 (d/kappa + nu m^T S^-1 m)
    neg_half_logdet: float      # E[-1/2 log|Sigma|]       = 1/2 (psi_d(nu/2) + d log 2 - log|S|)


# ---------------------------------------------------------------------------
# expected sufficient statistics


def dirichlet_expected_stats(p: DirichletNat) -> np.ndarray:
    """E[log pi_k] = psi(alpha_k) - psi(sum_j alpha_j)."""
    alpha = p.alpha
    return digamma(alpha) - digamma(alpha.sum())


def niw_expected_stats(p: NiwNat) -> NiwExpectedStats:
    m, kappa, S, nu = p.to_standard()
    d = p.dim
    L, logdet_S = _chol_logdet(S)
    Sinv_m = np.linalg.solve(S, m)
    Sinv = np.linalg.inv(S)
    Sinv = 0.5 * (Sinv + Sinv.T)
    return NiwExpectedStats(
        mean_prec=nu * Sinv_m,
        neg_half_prec=-0.5 * nu * Sinv,
        neg_half_mahal=-0.5 * (d / kappa + nu * float(m @ Sinv_m)),
        neg_half_logdet=0.5 * (multivariate_digamma(nu / 2.0, d) + d * np.log(2.0) - logdet_S),
    )


def beta_expected_stats(p: BetaNat) -> np.ndarray:
    """(E[log a], E[log(1 - a)]) = (psi(tau1) - psi(tau1 + tau2), psi(tau2) - psi(tau1 + tau2))."""
    tau = p.tau
    return digamma(tau) - digamma(tau.sum())


def categorical_expected_stats(p: CategoricalNat) -> np.ndarray:
    """Softmax of the (possibly unnormalized) log-probabilities."""
    return softmax(p.eta)


def gaussian_expected_stats(p: GaussianNat) -> tuple[np.ndarray, np.ndarray]:
    """(E[x], E[x x^T]) = (mu, Sigma + mu mu^T)."""
    mean, cov = gaussian_nat_to_moment(p)
    return mean, cov + np.outer(mean, mean)


def softmax(eta: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = eta - np.max(eta, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# moment <-> natural conversions for the Gaussian


def gaussian_moment_to_nat(mean, cov) -> GaussianNat:
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    prec = np.linalg.inv(cov)
    prec = 0.5 * (prec + prec.T)
    return GaussianNat(prec @ mean, -0.5 * prec)


def gaussian_nat_to_moment(p: GaussianNat) -> tuple[np.ndarray, np.ndarray]:
    prec = -2.0 * p.J
    L = np.linalg.cholesky(prec)  # negative-definiteness check
    cov = np.linalg.inv(prec)
    cov = 0.5 * (cov + cov.T)
    return cov @ p.h, cov


# ---------------------------------------------------------------------------
# log partitions


def _dirichlet_log_partition(eta: np.ndarray) -> float:
    alpha = eta + 1.0
    if np.any(alpha <= 0.0):
        raise ValueError("Dirichlet alpha must be positive")
    return float(np.sum(gammaln(alpha)) - gammaln(alpha.sum()))


def _niw_log_partition(h1, h2, h3, h4) -> float:
    d = h1.shape[0]
    kappa = h3
    if kappa <= 0.0:
        raise ValueError("kappa must be positive")
    S = h2 - np.outer(h1, h1) / kappa
    S = 0.5 * (S + S.T)
    nu = h4 - d - 2.0
    if nu <= d - 1.0:
        raise ValueError("nu must exceed d - 1")
    _, logdet_S = _chol_logdet(S)
    return float(
        nu / 2.0 * (d * np.log(2.0) - logdet_S)
        + multivariate_gammaln(nu / 2.0, d)
        - d / 2.0 * np.log(kappa)
    )


def _beta_log_partition(eta: np.ndarray) -> float:
    tau = eta + 1.0
    if np.any(tau <= 0.0):
        raise ValueError("Beta tau must be positive")
    return float(gammaln(tau[0]) + gammaln(tau[1]) - gammaln(tau.sum()))


def _categorical_log_partition(eta: np.ndarray) -> float:
    m = float(np.max(eta))
    return m + float(np.log(np.sum(np.exp(eta - m))))


def _gaussian_log_partition(h, J) -> float:
    prec = -2.0 * J
    cov = np.linalg.inv(prec)
    mean = cov @ h
    sign, logdet_prec = np.linalg.slogdet(prec)
    if sign <= 0:
        raise ValueError("J must be negative definite")
    return float(0.5 * (mean @ h) - 0.5 * logdet_prec)


def log_partition(p) -> float:
    """log Z(eta), up to constants independent of eta.

    Normalized-categorical convention: if sum_k exp(eta_k) = 1 the value
    is 0, the generic unnormalized value being log-sum-exp(eta).
    """
    if isinstance(p, DirichletNat):
        return _dirichlet_log_partition(p.eta)
    if isinstance(p, NiwNat):
        return _niw_log_partition(p.h1, p.h2, p.h3, p.h4)
    if isinstance(p, BetaNat):
        return _beta_log_partition(p.eta)
    if isinstance(p, CategoricalNat):
        return _categorical_log_partition(p.eta)
    if isinstance(p, GaussianNat):
        return _gaussian_log_partition(p.h, p.J)
    raise TypeError(f"unsupported family: {type(p).__name__}")


# ---------------------------------------------------------------------------
# gradient identity check


def _flatten_family(p):
    """Coordinate vector, raw log-partition on coordinates, and E[t] vector."""
    if isinstance(p, DirichletNat):
        vec = p.eta.copy()
        fn = _dirichlet_log_partition
        expected = dirichlet_expected_stats(p)
    elif isinstance(p, BetaNat):
        vec = p.eta.copy()
        fn = _beta_log_partition
        expected = beta_expected_stats(p)
    elif isinstance(p, CategoricalNat):
        vec = p.eta.copy()
        fn = _categorical_log_partition
        expected = categorical_expected_stats(p)
    elif isinstance(p, GaussianNat):
        d = p.dim
        vec = np.concatenate([p.h, p.J.ravel()])
        fn = lambda v: _gaussian_log_partition(v[:d], v[d:].reshape(d, d))
        mean, second = gaussian_expected_stats(p)
        expected = np.concatenate([mean, second.ravel()])
    elif isinstance(p, NiwNat):
        d = p.dim
        vec = np.concatenate([p.h1, p.h2.ravel(), [p.h3, p.h4]])
        fn = lambda v: _niw_log_partition(
            v[:d], v[d:d + d * d].reshape(d, d), v[-2], v[-1]
        )
        e = niw_expected_stats(p)
        expected = np.concatenate(
            [e.mean_prec, e.neg_half_prec.ravel(), [e.neg_half_mahal, e.neg_half_logdet]]
        )
    else:
        raise TypeError(f"unsupported family: {type(p).__name__}")
    return vec, fn, expected


def grad_log_partition_check(p, epsilon: float = 1e-5) -> float:
    """Max abs deviation between central-difference grad log Z and E[t(x)].

    Raises ValueError if a +/- epsilon step leaves the family's valid
    natural-parameter domain.
    """
    vec, fn, expected = _flatten_family(p)
    grad = np.empty_like(vec)
    for i in range(vec.shape[0]):
        hi = vec.copy()
        lo = vec.copy()
        hi[i] += epsilon
        lo[i] -= epsilon
        try:
            grad[i] = (fn(hi) - fn(lo)) / (2.0 * epsilon)
        except (ValueError, np.linalg.LinAlgError) as err:
            raise ValueError(
                f"epsilon={epsilon} leaves the valid domain at coordinate {i}"
            ) from err
    return float(np.max(np.abs(grad - expected)))
