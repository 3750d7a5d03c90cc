"""Latent Gaussian-mixture globals.

Conjugate priors (Dirichlet over mixing weights, one shared NIW over
every component's mean and covariance), the variational posterior over
the globals, generative sampling, and the natural-gradient coordinate
updates whose step-1 fixed point is the textbook conjugate posterior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.stats import invwishart

from .expfam import (
    BetaNat,
    DirichletNat,
    NiwNat,
    dirichlet_expected_stats,
    niw_expected_stats,
)
from .relational import BetaWorkers


class StepRejected(RuntimeError):
    """A natural-gradient step left the valid natural-parameter domain."""


# ---------------------------------------------------------------------------
# prior and variational state


@dataclass(frozen=True)
class MixturePrior:
    """Conjugate prior for a K-component latent Gaussian mixture in R^d.

    Dirichlet(alpha0, ..., alpha0) over the mixing weights and the same
    NIW(m0, kappa0, s0, nu0) over each component's (mu, Sigma).
    """

    n_components: int
    latent_dim: int
    alpha0: float
    m0: np.ndarray
    kappa0: float
    s0: np.ndarray
    nu0: float

    def __post_init__(self):
        K = int(self.n_components)
        d = int(self.latent_dim)
        if K < 2:
            raise ValueError("need at least two components")
        if d < 1:
            raise ValueError("latent dimension must be positive")
        if not self.alpha0 > 0.0:
            raise ValueError("alpha0 must be positive")
        if not self.kappa0 > 0.0:
            raise ValueError("kappa0 must be positive")
        if not self.nu0 > d - 1.0:
            raise ValueError(f"nu0 = {self.nu0} must exceed d - 1 = {d - 1}")
        m0 = np.array(self.m0, dtype=float)
        s0 = np.array(self.s0, dtype=float)
        if m0.shape != (d,):
            raise ValueError(f"m0 must have shape ({d},), got {m0.shape}")
        if s0.shape != (d, d) or not np.allclose(s0, s0.T, atol=1e-8):
            raise ValueError("s0 must be a symmetric (d, d) matrix")
        np.linalg.cholesky(s0)  # positive-definiteness check
        m0.setflags(write=False)
        s0.setflags(write=False)
        object.__setattr__(self, "n_components", K)
        object.__setattr__(self, "latent_dim", d)
        object.__setattr__(self, "alpha0", float(self.alpha0))
        object.__setattr__(self, "m0", m0)
        object.__setattr__(self, "kappa0", float(self.kappa0))
        object.__setattr__(self, "s0", s0)
        object.__setattr__(self, "nu0", float(self.nu0))

    @classmethod
    def default(cls, n_components: int, latent_dim: int) -> "MixturePrior":
        """Weak sparsity-inducing prior: alpha0 = 0.05/K, m0 = 0, kappa0 = 0.5,
        s0 = (d + kappa0) I, nu0 = d + kappa0."""
        d = latent_dim
        kappa0 = 0.5
        return cls(
            n_components=n_components,
            latent_dim=d,
            alpha0=0.05 / n_components,
            m0=np.zeros(d),
            kappa0=kappa0,
            s0=(d + kappa0) * np.eye(d),
            nu0=d + kappa0,
        )

    def pi_nat(self) -> DirichletNat:
        return DirichletNat.from_alpha(np.full(self.n_components, self.alpha0))

    def niw_nat(self) -> NiwNat:
        return NiwNat.from_standard(self.m0, self.kappa0, self.s0, self.nu0)

    def to_dict(self) -> dict:
        return {
            "n_components": self.n_components,
            "latent_dim": self.latent_dim,
            "alpha0": self.alpha0,
            "m0": self.m0.tolist(),
            "kappa0": self.kappa0,
            "s0": self.s0.tolist(),
            "nu0": self.nu0,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MixturePrior":
        return cls(
            n_components=doc["n_components"],
            latent_dim=doc["latent_dim"],
            alpha0=doc["alpha0"],
            m0=np.array(doc["m0"], dtype=float),
            kappa0=doc["kappa0"],
            s0=np.array(doc["s0"], dtype=float),
            nu0=doc["nu0"],
        )


@dataclass(frozen=True)
class GlobalVariational:
    """Variational posterior over the mixture globals and, when present,
    the per-worker accuracy pairs.  Instances are immutable snapshots;
    updates construct a new one."""

    pi: DirichletNat
    components: tuple[NiwNat, ...]
    workers: BetaWorkers | None = None

    def __post_init__(self):
        comps = tuple(self.components)
        if len(comps) != self.pi.eta.shape[0]:
            raise ValueError("need one NIW component per mixing weight")
        if not all(isinstance(c, NiwNat) for c in comps):
            raise TypeError("components must be NiwNat")
        d = comps[0].dim
        if any(c.dim != d for c in comps):
            raise ValueError("components must share one latent dimension")
        object.__setattr__(self, "components", comps)

    @property
    def n_components(self) -> int:
        return len(self.components)

    @property
    def latent_dim(self) -> int:
        return self.components[0].dim

    @property
    def n_workers(self) -> int:
        return 0 if self.workers is None else self.workers.n_workers

    def to_dict(self) -> dict:
        doc = {
            "pi_eta": self.pi.eta.tolist(),
            "components": [
                {"h1": c.h1.tolist(), "h2": c.h2.tolist(), "h3": c.h3, "h4": c.h4}
                for c in self.components
            ],
            "workers": None,
        }
        if self.workers is not None:
            doc["workers"] = {
                "alpha_taus": self.workers.alpha_taus.tolist(),
                "beta_taus": self.workers.beta_taus.tolist(),
            }
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "GlobalVariational":
        pi = DirichletNat(np.array(doc["pi_eta"], dtype=float))
        comps = tuple(
            NiwNat(
                np.array(c["h1"], dtype=float),
                np.array(c["h2"], dtype=float),
                c["h3"],
                c["h4"],
            )
            for c in doc["components"]
        )
        workers = None
        if doc.get("workers") is not None:
            workers = BetaWorkers(
                [BetaNat.from_tau(t1, t2) for t1, t2 in doc["workers"]["alpha_taus"]],
                [BetaNat.from_tau(t1, t2) for t1, t2 in doc["workers"]["beta_taus"]],
            )
        return cls(pi, comps, workers)


class GlobalExpectations(NamedTuple):
    """Stacked expected sufficient statistics consumed by the local updates."""

    log_pi: np.ndarray          # (K,)    E[log pi_k]
    mean_prec: np.ndarray       # (K, d)  E[Sigma_k^-1 mu_k]
    neg_half_prec: np.ndarray   # (K, d, d)
    neg_half_mahal: np.ndarray  # (K,)
    neg_half_logdet: np.ndarray # (K,)


def global_expectations(glob: GlobalVariational) -> GlobalExpectations:
    stats = [niw_expected_stats(c) for c in glob.components]
    return GlobalExpectations(
        log_pi=dirichlet_expected_stats(glob.pi),
        mean_prec=np.array([s.mean_prec for s in stats]),
        neg_half_prec=np.array([s.neg_half_prec for s in stats]),
        neg_half_mahal=np.array([s.neg_half_mahal for s in stats]),
        neg_half_logdet=np.array([s.neg_half_logdet for s in stats]),
    )


# ---------------------------------------------------------------------------
# initialization and sampling


def init_global(
    prior: MixturePrior,
    rng: np.random.Generator,
    n_workers: int = 0,
    init_spread: float = math.sqrt(3.0),
    init_kappa: float = 1.0,
    worker_init: tuple[float, float] = (10.0, 1.0),
) -> GlobalVariational:
    """Random variational starting point.

    Mixing-weight concentrations start uniform on (1, 2); component
    locations are zero-mean Gaussian draws with standard deviation
    init_spread, each with kappa = init_kappa, S = (d + init_kappa) I
    and matching nu; worker posteriors start at Beta(*worker_init).
    """
    K, d = prior.n_components, prior.latent_dim
    pi = DirichletNat.from_alpha(rng.uniform(1.0, 2.0, size=K))
    scale = (d + init_kappa) * np.eye(d)
    components = tuple(
        NiwNat.from_standard(
            init_spread * rng.standard_normal(d), init_kappa, scale, d + init_kappa
        )
        for _ in range(K)
    )
    workers = BetaWorkers.constant_init(n_workers, *worker_init) if n_workers else None
    return GlobalVariational(pi, components, workers)


def sample_generative(params, n: int, rng: np.random.Generator, decoder=None):
    """Draw (labels, latents, observations) from the generative model.

    `params` is either a GlobalVariational, in which case the mixture
    parameters are first drawn from the variational posterior, or a
    (pi, means, covs) triple of point values; covs may be (K, d, d)
    matrices or (K, d) diagonals.  With a decoder the observations are
    N(mean, diag exp(logvar)) draws from its heads; without one they are
    the latents themselves.
    """
    if isinstance(params, GlobalVariational):
        pi = rng.dirichlet(params.pi.alpha)
        means, covs = [], []
        for comp in params.components:
            m, kappa, S, nu = comp.to_standard()
            cov = np.atleast_2d(invwishart.rvs(df=nu, scale=S, random_state=rng))
            means.append(rng.multivariate_normal(m, cov / kappa))
            covs.append(cov)
        means = np.array(means)
        covs = np.array(covs)
    else:
        pi, means, covs = params
        pi = np.asarray(pi, dtype=float)
        means = np.asarray(means, dtype=float)
        covs = np.asarray(covs, dtype=float)
        if covs.ndim == 2:
            covs = np.array([np.diag(row) for row in covs])
    labels = rng.choice(pi.shape[0], size=n, p=pi / pi.sum())
    chols = np.linalg.cholesky(covs)
    noise = rng.standard_normal((n, means.shape[1]))
    latents = means[labels] + np.einsum("nij,nj->ni", chols[labels], noise)
    if decoder is None:
        observations = latents.copy()
    else:
        heads = decoder.forward(latents)
        mean = heads["mean"].data
        std = np.exp(0.5 * heads["logvar"].data)
        observations = mean + std * rng.standard_normal(mean.shape)
    return labels, latents, observations


# ---------------------------------------------------------------------------
# natural-gradient updates


@dataclass(frozen=True)
class GlobalGrads:
    """Natural-gradient direction for the global variational parameters.

    Worker blocks are optional; when absent the worker posteriors pass
    through apply_natural_gradient unchanged.
    """

    pi: np.ndarray               # (K,)
    h1: np.ndarray               # (K, d)
    h2: np.ndarray               # (K, d, d)
    h3: np.ndarray               # (K,)
    h4: np.ndarray               # (K,)
    worker_alpha: np.ndarray | None = None  # (M, 2)
    worker_beta: np.ndarray | None = None   # (M, 2)


def mixture_natural_gradient(
    prior: MixturePrior,
    q_z: np.ndarray,
    means: np.ndarray,
    covs: np.ndarray,
    current: GlobalVariational,
    scale: float = 1.0,
) -> GlobalGrads:
    """Natural gradients for the Dirichlet and NIW blocks.

    The step-1 fixed point is the conjugate update: prior natural
    parameters plus scaled responsibility-weighted local moments.
    q_z is (n, K) responsibilities, means (n, d), covs (n, d, d) full
    matrices or (n, d) diagonals; scale is the minibatch factor N/|B|.
    """
    K, d = current.n_components, current.latent_dim
    q_z = np.asarray(q_z, dtype=float).reshape(-1, K)
    means = np.asarray(means, dtype=float).reshape(-1, d)
    covs = np.asarray(covs, dtype=float)
    if covs.ndim == 2:
        covs = covs[:, :, None] * np.eye(d)
    counts = q_z.sum(axis=0)
    first = q_z.T @ means
    second = np.einsum(
        "nk,nij->kij", q_z, covs + means[:, :, None] * means[:, None, :]
    )
    niw0 = prior.niw_nat()
    return GlobalGrads(
        pi=prior.pi_nat().eta + scale * counts - current.pi.eta,
        h1=niw0.h1 + scale * first - np.array([c.h1 for c in current.components]),
        h2=niw0.h2 + scale * second - np.array([c.h2 for c in current.components]),
        h3=niw0.h3 + scale * counts - np.array([c.h3 for c in current.components]),
        h4=niw0.h4 + scale * counts - np.array([c.h4 for c in current.components]),
    )


def apply_natural_gradient(
    current: GlobalVariational, grads: GlobalGrads, step: float
) -> GlobalVariational:
    """eta <- eta + step * grad with every family invariant revalidated.

    Raises StepRejected when the stepped parameters leave the valid
    domain; the caller may retry with a smaller step.
    """
    if not 0.0 < step <= 1.0:
        raise ValueError(f"step must lie in (0, 1], got {step}")
    try:
        pi = DirichletNat(current.pi.eta + step * grads.pi)
        components = []
        for k, c in enumerate(current.components):
            cand = NiwNat(
                c.h1 + step * grads.h1[k],
                c.h2 + step * grads.h2[k],
                c.h3 + step * grads.h3[k],
                c.h4 + step * grads.h4[k],
            )
            _, _, S, _ = cand.to_standard()
            np.linalg.cholesky(S)
            components.append(cand)
        workers = current.workers
        if grads.worker_alpha is not None:
            if workers is None:
                raise ValueError("worker gradients supplied without worker posteriors")
            workers = BetaWorkers(
                [
                    BetaNat(p.eta + step * grads.worker_alpha[m])
                    for m, p in enumerate(workers.alpha_nats)
                ],
                [
                    BetaNat(p.eta + step * grads.worker_beta[m])
                    for m, p in enumerate(workers.beta_nats)
                ],
            )
    except (ValueError, np.linalg.LinAlgError) as err:
        raise StepRejected(f"step {step} left the valid domain: {err}") from err
    return GlobalVariational(pi, tuple(components), workers)


def effective_components(glob: GlobalVariational, threshold: float) -> int:
    """Number of components whose expected mixing weight exceeds threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    alpha = glob.pi.alpha
    return int(np.sum(alpha / alpha.sum() > threshold))
