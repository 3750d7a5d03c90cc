"""Natural-gradient variational inference for the Bayesian variant.

The recognition network emits diagonal Gaussian evidence potentials;
cluster responsibilities and latent Gaussians are refined jointly by
block-coordinate updates that carry pairwise annotation messages.
Globals (mixing weights, components, worker accuracies) follow scaled
stochastic natural gradients, while the recognition and decoder
networks ascend reparameterization gradients of the objective through
the final latent refresh.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import log_softmax

from .data import Dataset, minibatch_iterator
from .expfam import (
    BetaNat,
    beta_expected_stats,
    dirichlet_expected_stats,
    log_partition,
    niw_expected_stats,
)
from .metrics import clustering_accuracy, nmi
from .mixture import (
    GlobalExpectations,
    GlobalVariational,
    MixturePrior,
    StepRejected,
    apply_natural_gradient,
    effective_components,
    global_expectations,
    init_global,
    mixture_natural_gradient,
)
from .nnet import (
    Adam,
    Mlp,
    SgdMomentum,
    Tape,
    TrainingDivergence,
    backward,
    cholesky,
    constant,
    diag_embed,
    diag_gaussian_loglik,
    diag_part,
    einsum2,
    log,
    mat_inv,
    softplus,
    tensor_sum,
    zero_grads,
)
from .relational import (
    AnnotationStore,
    _message_weights,
    beta_natural_gradient,
    expected_rel_loglik,
    sample_annotation_minibatch,
)

# Added below -softplus(raw) so evidence precisions stay bounded away
# from singular even when the raw head saturates at large negatives.
PRECISION_FLOOR = 1e-4

# Most halvings of a rejected global step before giving up.
MAX_STEP_HALVINGS = 30


# ---------------------------------------------------------------------------
# local containers


@dataclass(frozen=True)
class RecognitionPotential:
    """Diagonal Gaussian evidence (h, diag j) for a batch of items."""

    h: np.ndarray       # (n, d)
    j_diag: np.ndarray  # (n, d), strictly negative

    def __post_init__(self):
        h = np.asarray(self.h, dtype=float)
        j = np.asarray(self.j_diag, dtype=float)
        if h.ndim != 2 or h.shape != j.shape:
            raise ValueError("h and j_diag must be matching (n, d) arrays")
        if not (np.all(np.isfinite(h)) and np.all(np.isfinite(j))):
            raise TrainingDivergence("non-finite recognition potential")
        if np.any(j >= 0.0):
            raise ValueError("j_diag must be strictly negative")
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "j_diag", j)

    @property
    def n_items(self) -> int:
        return self.h.shape[0]


@dataclass
class LocalVariational:
    """Local posteriors for one working set: categorical q(z), Gaussian q(x)."""

    log_resp: np.ndarray  # (n, K), normalized log responsibilities
    x_h: np.ndarray       # (n, d)
    x_j: np.ndarray       # (n, d, d), negative definite
    x_mean: np.ndarray    # (n, d)
    x_cov: np.ndarray     # (n, d, d)

    @property
    def resp(self) -> np.ndarray:
        return np.exp(self.log_resp)

    @property
    def n_items(self) -> int:
        return self.log_resp.shape[0]


def recognition_potential(net: Mlp, observations) -> RecognitionPotential:
    """Evidence potentials from the recognition network.

    The raw precision head passes through -softplus(.) - PRECISION_FLOOR,
    so the potential is always a proper (strictly negative) diagonal.
    """
    heads = net.forward(np.asarray(observations, dtype=float))
    loc = heads["loc"].data
    raw = heads["prec_raw"].data
    if not (np.all(np.isfinite(loc)) and np.all(np.isfinite(raw))):
        raise TrainingDivergence("recognition network produced non-finite outputs")
    j_diag = -np.logaddexp(0.0, raw) - PRECISION_FLOOR
    return RecognitionPotential(loc, j_diag)


def _calibrate_recognition_init(
    net: Mlp, observations, precision: float, spread: float, max_items: int = 2048
) -> None:
    """Start the evidence potentials confident and well separated.

    Sets the raw-precision head bias so potentials begin with diagonal
    precision close to ``precision``, then rescales the location head so the
    implied potential means (h divided by the precision) have an average
    per-coordinate standard deviation of ``spread`` over the given
    observations.  Diffuse potentials cannot anchor the latent posteriors:
    the mixture then contracts every q(x) onto one high-precision component
    before the networks learn anything, and no amount of later training
    recovers the lost structure.  ``spread=0`` skips the location rescaling.
    """
    half = precision / 2.0 - PRECISION_FLOOR
    # inverse softplus, stable for both small and large targets
    raw_bias = half + math.log(-math.expm1(-half))
    net.head_biases["prec_raw"].data[:] = raw_bias
    if spread == 0.0:
        return
    obs = np.asarray(observations, dtype=float)[:max_items]
    heads = net.forward(obs)
    item_precision = 2.0 * (np.logaddexp(0.0, heads["prec_raw"].data) + PRECISION_FLOOR)
    implied_means = heads["loc"].data / item_precision
    current = float(np.mean(np.std(implied_means, axis=0)))
    if current > 0.0:
        net.head_weights["loc"].data *= spread / current
        net.head_biases["loc"].data *= spread / current


# ---------------------------------------------------------------------------
# block-coordinate local updates


def update_local_x(resp, exps: GlobalExpectations, potential: RecognitionPotential):
    """Coordinate refresh of every q(x_i) given responsibilities.

    Natural parameters are the responsibility-weighted expected Gaussian
    parameters plus the evidence potential; returns (h, j, mean, cov).
    """
    resp = np.asarray(resp, dtype=float)
    d = exps.mean_prec.shape[1]
    x_h = resp @ exps.mean_prec + potential.h
    x_j = np.einsum("nk,kij->nij", resp, exps.neg_half_prec)
    idx = np.arange(d)
    x_j[:, idx, idx] += potential.j_diag
    prec = -2.0 * x_j
    np.linalg.cholesky(prec)  # fails unless every x_j is negative definite
    x_cov = np.linalg.inv(prec)
    x_cov = 0.5 * (x_cov + np.swapaxes(x_cov, -1, -2))
    x_mean = np.einsum("nij,nj->ni", x_cov, x_h)
    return x_h, x_j, x_mean, x_cov


def component_logits(exps: GlobalExpectations, x_mean, x_cov) -> np.ndarray:
    """Per item and component: <E t(mu_k, Sigma_k), (E t(x_i), 1)>."""
    x_mean = np.asarray(x_mean, dtype=float)
    x_cov = np.asarray(x_cov, dtype=float)
    second = x_cov + x_mean[:, :, None] * x_mean[:, None, :]
    return (
        x_mean @ exps.mean_prec.T
        + np.einsum("nij,kij->nk", second, exps.neg_half_prec)
        + exps.neg_half_mahal
        + exps.neg_half_logdet
    )


def annotation_graph(store: AnnotationStore | None, workers, n_items: int):
    """Neighbor lists of (other item, message weight) per working-set item."""
    neighbors = [[] for _ in range(n_items)]
    if store is None or workers is None or store.n_annotations == 0:
        return neighbors
    t = store.triples
    if t[:, :2].max() >= n_items:
        raise ValueError("store must be indexed by working-set position")
    weights = _message_weights(t[:, 3].astype(float), workers.log_stats()[t[:, 2]])
    for (i, j, _, _), w in zip(t, weights):
        neighbors[i].append((int(j), float(w)))
        neighbors[j].append((int(i), float(w)))
    return neighbors


def update_local_z(base_logits, neighbors, log_resp) -> np.ndarray:
    """One pass of coordinate refreshes on every q(z_i).

    base_logits holds E[log pi] plus the component brackets.  Items with
    annotation messages are visited sequentially so each sees its
    neighbors' freshest responsibilities; the rest update in one shot.
    """
    base = np.asarray(base_logits, dtype=float)
    out = np.array(log_resp, dtype=float)
    resp = np.exp(out)
    linked = [p for p, nb in enumerate(neighbors) if nb]
    free = np.setdiff1d(np.arange(base.shape[0]), linked)
    if free.size:
        out[free] = log_softmax(base[free], axis=-1)
        resp[free] = np.exp(out[free])
    for p in linked:
        eta = base[p].copy()
        for q, w in neighbors[p]:
            eta += w * resp[q]
        out[p] = log_softmax(eta)
        resp[p] = np.exp(out[p])
    return out


def block_coordinate_local(
    glob: GlobalVariational,
    potential: RecognitionPotential,
    store: AnnotationStore | None = None,
    sweeps: int = 4,
    tol: float = 1e-6,
    init_log_resp=None,
) -> LocalVariational:
    """Alternate q(x) / q(z) coordinate updates for one working set.

    `store`, when given, must be indexed by working-set position.  Runs
    at most `sweeps` rounds from uniform responsibilities (or the given
    start), stops early once the largest parameter change drops below
    `tol`, and always ends on a q(x) refresh so the returned Gaussians
    are consistent with the returned responsibilities.
    """
    n = potential.n_items
    if sweeps < 1:
        raise ValueError("sweeps must be at least 1")
    exps = global_expectations(glob)
    K = exps.log_pi.shape[0]
    if init_log_resp is None:
        log_resp = np.full((n, K), -math.log(K))
    else:
        log_resp = np.array(init_log_resp, dtype=float)
    neighbors = annotation_graph(store, glob.workers, n)
    x_h, x_j, x_mean, x_cov = update_local_x(np.exp(log_resp), exps, potential)
    for _ in range(sweeps):
        base = exps.log_pi + component_logits(exps, x_mean, x_cov)
        new_log_resp = update_local_z(base, neighbors, log_resp)
        new_x = update_local_x(np.exp(new_log_resp), exps, potential)
        delta = max(
            np.max(np.abs(new_log_resp - log_resp)),
            np.max(np.abs(new_x[0] - x_h)),
            np.max(np.abs(new_x[1] - x_j)),
        )
        log_resp = new_log_resp
        x_h, x_j, x_mean, x_cov = new_x
        if delta < tol:
            break
    return LocalVariational(log_resp, x_h, x_j, x_mean, x_cov)


# ---------------------------------------------------------------------------
# objective pieces


def _gaussian_log_partitions(x_h, x_mean, x_j) -> np.ndarray:
    """log Z of each local Gaussian, constants dropped as everywhere else."""
    sign, logdet = np.linalg.slogdet(-2.0 * x_j)
    if np.any(sign <= 0):
        raise ValueError("x_j must be negative definite")
    return 0.5 * np.einsum("ni,ni->n", x_mean, x_h) - 0.5 * logdet


def local_kl(exps: GlobalExpectations, local: LocalVariational, rows=None) -> float:
    """Expected KL of the local posteriors from their conditionals, summed.

    z part: sum_k r_ik (log r_ik - E[log pi_k]); x part is the bracket
    <eta_i - mixture evidence, E t(x_i)> - log Z(eta_i) plus the
    responsibility-weighted expected component log partitions.  `rows`
    restricts the sum (e.g. to the data minibatch of a working set).
    """
    if rows is None:
        rows = np.arange(local.n_items)
    lr = local.log_resp[rows]
    r = np.exp(lr)
    # 0 log 0 = 0, so components with zero responsibility contribute nothing
    occupied = r > 0.0
    diff = lr - exps.log_pi
    kl_z = float(np.sum(r[occupied] * diff[occupied]))
    mean = local.x_mean[rows]
    cov = local.x_cov[rows]
    second = cov + mean[:, :, None] * mean[:, None, :]
    dh = local.x_h[rows] - r @ exps.mean_prec
    dj = local.x_j[rows] - np.einsum("nk,kij->nij", r, exps.neg_half_prec)
    inner = np.einsum("ni,ni->n", dh, mean) + np.einsum("nij,nij->n", dj, second)
    log_z = _gaussian_log_partitions(local.x_h[rows], mean, local.x_j[rows])
    kl_x = float(np.sum(inner - log_z - r @ (exps.neg_half_mahal + exps.neg_half_logdet)))
    return kl_z + kl_x


def _bracket_kl(eta_q, eta_p, expected, log_z_q, log_z_p) -> float:
    return float(np.dot(eta_q - eta_p, expected) - (log_z_q - log_z_p))


def _niw_flat(p) -> np.ndarray:
    return np.concatenate([p.h1, p.h2.ravel(), [p.h3], [p.h4]])


def default_worker_prior() -> tuple[BetaNat, BetaNat]:
    """Uniform Beta(1, 1) priors on every worker accuracy."""
    return BetaNat.from_tau(1.0, 1.0), BetaNat.from_tau(1.0, 1.0)


def global_kl(glob: GlobalVariational, prior: MixturePrior, worker_prior=None) -> float:
    """KL(q || p) summed over mixing weights, components and workers.

    Each family contributes <eta_q - eta_p, E_q t> - (log Z_q - log Z_p);
    the worker prior defaults to Beta(1, 1) on every accuracy.
    """
    pi0 = prior.pi_nat()
    total = _bracket_kl(
        glob.pi.eta,
        pi0.eta,
        dirichlet_expected_stats(glob.pi),
        log_partition(glob.pi),
        log_partition(pi0),
    )
    niw0 = prior.niw_nat()
    eta0 = _niw_flat(niw0)
    log_z0 = log_partition(niw0)
    for comp in glob.components:
        stats = niw_expected_stats(comp)
        expected = np.concatenate(
            [
                stats.mean_prec,
                stats.neg_half_prec.ravel(),
                [stats.neg_half_mahal],
                [stats.neg_half_logdet],
            ]
        )
        total += _bracket_kl(_niw_flat(comp), eta0, expected, log_partition(comp), log_z0)
    if glob.workers is not None:
        prior_a, prior_b = worker_prior if worker_prior is not None else default_worker_prior()
        for nat, p0 in [(a, prior_a) for a in glob.workers.alpha_nats] + [
            (b, prior_b) for b in glob.workers.beta_nats
        ]:
            total += _bracket_kl(
                nat.eta, p0.eta, beta_expected_stats(nat), log_partition(nat), log_partition(p0)
            )
    return total


def surrogate_elbo(
    glob: GlobalVariational,
    prior: MixturePrior,
    local: LocalVariational,
    potential: RecognitionPotential,
    store: AnnotationStore | None = None,
    worker_prior=None,
) -> float:
    """Full-batch bound with <psi, E t(x)> standing in for the decoder.

    Every block-coordinate local update and every step-1 global update
    is an exact coordinate maximization of this quantity, so it must not
    decrease along the inner loop.
    """
    exps = global_expectations(glob)
    mean, cov = local.x_mean, local.x_cov
    second_diag = np.diagonal(cov, axis1=1, axis2=2) + mean**2
    data = float(np.sum(potential.h * mean) + np.sum(potential.j_diag * second_diag))
    rel = 0.0
    if store is not None and glob.workers is not None:
        rel = expected_rel_loglik(store, local.resp, glob.workers)
    return data + rel - local_kl(exps, local) - global_kl(glob, prior, worker_prior)


def final_objective(
    glob: GlobalVariational,
    prior: MixturePrior,
    local: LocalVariational,
    potential: RecognitionPotential | None = None,
    store: AnnotationStore | None = None,
    worker_prior=None,
    observations=None,
    decoder: Mlp | None = None,
    rng: np.random.Generator | None = None,
    data_scale: float = 1.0,
    rel_scale: float = 1.0,
    rows=None,
) -> float:
    """Monte-Carlo estimate of the training objective.

    With a decoder the data term draws one reparameterized latent sample
    per item; without one the potential bracket <psi, E t(x)> stands in.
    `rows` restricts the per-item data and local-KL terms, e.g. to the
    data minibatch inside a larger working set; `store` must be indexed
    like `local`.  Scales restore full-data magnitudes from minibatches.
    """
    exps = global_expectations(glob)
    if rows is None:
        rows = np.arange(local.n_items)
    rows = np.asarray(rows, dtype=int)
    mean, cov = local.x_mean[rows], local.x_cov[rows]
    if decoder is not None:
        if observations is None or rng is None:
            raise ValueError("the decoder data term needs observations and an rng")
        obs = np.asarray(observations, dtype=float)[rows]
        noise = rng.standard_normal(mean.shape)
        draws = mean + np.einsum("nij,nj->ni", np.linalg.cholesky(cov), noise)
        heads = decoder.forward(draws)
        data = float(np.sum(diag_gaussian_loglik(obs, heads["mean"], heads["logvar"]).data))
    else:
        if potential is None:
            raise ValueError("need a decoder or a potential for the data term")
        second_diag = np.diagonal(cov, axis1=1, axis2=2) + mean**2
        data = float(
            np.sum(potential.h[rows] * mean) + np.sum(potential.j_diag[rows] * second_diag)
        )
    rel = 0.0
    if store is not None and glob.workers is not None:
        rel = expected_rel_loglik(store, local.resp, glob.workers, scale=rel_scale)
    value = (
        data_scale * (data - local_kl(exps, local, rows))
        + rel
        - global_kl(glob, prior, worker_prior)
    )
    if not np.isfinite(value):
        raise TrainingDivergence("non-finite objective estimate")
    return float(value)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class BayesConfig:
    """Settings for the natural-gradient training loop."""

    n_components: int = 15
    latent_dim: int = 2
    epochs: int = 20
    batch_size: int = 50
    annotation_batch_size: int | None = None  # default: n_annotations * |B| / N
    hidden: tuple[int, ...] = (40, 40)
    net_lr: float = 1e-3
    net_momentum: float = 0.9
    global_step: float = 0.05
    global_step_decay: float = 0.0  # step_t = global_step / (1 + t)^decay
    local_sweeps: int = 4
    local_tol: float = 1e-6
    n_samples: int = 1
    net_optimizer: str = "adam"  # "adam" or "sgd"
    kl_warmup: float = 1.0   # fraction of updates over which the latent KL
                             # weight in the network gradient ramps 0 -> 1
    alpha0: float | None = None  # default 0.05 / n_components
    kappa0: float = 0.5
    s0_scale: float | None = None  # default latent_dim + kappa0
    nu0: float | None = None       # default latent_dim + kappa0
    init_spread: float = math.sqrt(3.0)
    init_kappa: float = 1.0
    worker_init: tuple[float, float] = (10.0, 1.0)
    worker_prior: tuple[float, float] = (1.0, 1.0)
    logvar_clamp: tuple[float, float] = (-8.0, 8.0)
    init_potential_precision: float = 200.0  # starting diagonal precision of
                                             # the evidence potentials
    init_potential_spread: float = 1.0      # target per-coordinate std of the
                                            # implied potential means at init
                                            # (0 disables the rescaling)

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not 0.0 <= self.global_step <= 1.0:
            raise ValueError("global_step must lie in [0, 1]")
        if self.global_step_decay < 0.0:
            raise ValueError("global_step_decay must be non-negative")
        if self.local_sweeps < 1 or self.n_samples < 1:
            raise ValueError("local_sweeps and n_samples must be at least 1")
        if self.net_lr < 0.0:
            raise ValueError("net_lr must be non-negative")
        if self.net_optimizer not in ("adam", "sgd"):
            raise ValueError("net_optimizer must be 'adam' or 'sgd'")
        if not 0.0 <= self.kl_warmup <= 1.0:
            raise ValueError("kl_warmup must lie in [0, 1]")
        if self.init_potential_precision <= 2.0 * PRECISION_FLOOR:
            raise ValueError("init_potential_precision must exceed the precision floor")
        if self.init_potential_spread < 0.0:
            raise ValueError("init_potential_spread must be non-negative")

    def prior(self) -> MixturePrior:
        K, d = self.n_components, self.latent_dim
        s0_scale = (d + self.kappa0) if self.s0_scale is None else self.s0_scale
        return MixturePrior(
            n_components=K,
            latent_dim=d,
            alpha0=(0.05 / K) if self.alpha0 is None else self.alpha0,
            m0=np.zeros(d),
            kappa0=self.kappa0,
            s0=s0_scale * np.eye(d),
            nu0=(d + self.kappa0) if self.nu0 is None else self.nu0,
        )


@dataclass
class BayesModel:
    """Trained state: prior, global posteriors and both networks."""

    prior: MixturePrior
    glob: GlobalVariational
    recognition: Mlp
    decoder: Mlp
    worker_prior: tuple[float, float] = (1.0, 1.0)
    local_sweeps: int = 4
    local_tol: float = 1e-6

    def local_posterior(self, observations, store: AnnotationStore | None = None) -> LocalVariational:
        potential = recognition_potential(self.recognition, observations)
        return block_coordinate_local(
            self.glob, potential, store, sweeps=self.local_sweeps, tol=self.local_tol
        )

    def responsibilities(self, observations) -> np.ndarray:
        return self.local_posterior(observations).resp

    def predict(self, observations) -> np.ndarray:
        """Most probable component per item (lowest index on ties)."""
        return np.argmax(self.responsibilities(observations), axis=1)

    def to_dict(self) -> dict:
        return {
            "prior": self.prior.to_dict(),
            "globals": self.glob.to_dict(),
            "recognition": self.recognition.state_dict(),
            "decoder": self.decoder.state_dict(),
            "worker_prior": list(self.worker_prior),
            "local_sweeps": int(self.local_sweeps),
            "local_tol": float(self.local_tol),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "BayesModel":
        return cls(
            prior=MixturePrior.from_dict(doc["prior"]),
            glob=GlobalVariational.from_dict(doc["globals"]),
            recognition=Mlp.from_state(doc["recognition"]),
            decoder=Mlp.from_state(doc["decoder"]),
            worker_prior=tuple(float(v) for v in doc.get("worker_prior", (1.0, 1.0))),
            local_sweeps=int(doc.get("local_sweeps", 4)),
            local_tol=float(doc.get("local_tol", 1e-6)),
        )


@dataclass
class TrainResult:
    model: BayesModel
    history: list = field(default_factory=list)
    diverged: bool = False


def _restrict_store(store: AnnotationStore | None, items: np.ndarray) -> AnnotationStore | None:
    """Renumber triples onto positions within `items` (sorted, unique)."""
    if store is None or store.n_annotations == 0:
        return None
    t = store.triples
    keep = np.isin(t[:, 0], items) & np.isin(t[:, 1], items)
    if not np.any(keep):
        return None
    t = t[keep]
    renumbered = np.stack(
        [np.searchsorted(items, t[:, 0]), np.searchsorted(items, t[:, 1]), t[:, 2], t[:, 3]],
        axis=1,
    )
    return AnnotationStore(renumbered, n_items=items.size, n_workers=store.n_workers)


def _network_objective(recognition, decoder, obs_batch, resp, exps, noise, data_scale, kl_weight=1.0):
    """Tape graph of the objective terms the networks can influence.

    Rebuilds the final q(x) refresh with responsibilities held constant:
    recon + kl_weight * (log Z(eta_x) - <psi, E t(x)>), summed over the
    batch.  `kl_weight` < 1 damps the pull of q(x) toward the mixture
    conditional (warmup against potential collapse); at 1 the gradient
    is exactly that of the training objective.  Returns the (scaled)
    objective and reconstruction tensors.
    """
    c_h = constant(resp @ exps.mean_prec)
    c_j = constant(np.einsum("nk,kij->nij", resp, exps.neg_half_prec))
    heads = recognition.forward(obs_batch)
    psi_h = heads["loc"]
    j_diag = -softplus(heads["prec_raw"]) - PRECISION_FLOOR
    x_j = c_j + diag_embed(j_diag)
    prec = x_j * (-2.0)
    cov = mat_inv(prec)
    h_tot = c_h + psi_h
    mean = einsum2("nij,nj->ni", cov, h_tot)
    log_z = tensor_sum(mean * h_tot) * 0.5 - tensor_sum(log(diag_part(cholesky(prec))))
    second_diag = diag_part(cov) + mean * mean
    psi_term = tensor_sum(psi_h * mean) + tensor_sum(j_diag * second_diag)
    chol_cov = cholesky(cov)
    recon = None
    for eps in noise:
        draw = mean + einsum2("nij,nj->ni", chol_cov, constant(eps))
        dec = decoder.forward(draw)
        row_ll = diag_gaussian_loglik(obs_batch, dec["mean"], dec["logvar"])
        recon = tensor_sum(row_ll) if recon is None else recon + tensor_sum(row_ll)
    recon = recon * (1.0 / noise.shape[0])
    objective = (recon + (log_z - psi_term) * kl_weight) * data_scale
    return objective, recon


def _stepped_globals(glob, grads, step) -> GlobalVariational:
    """Apply the natural-gradient step, halving it while it gets rejected."""
    trial = step
    for _ in range(MAX_STEP_HALVINGS):
        try:
            return apply_natural_gradient(glob, grads, trial)
        except StepRejected:
            trial *= 0.5
    raise TrainingDivergence("global natural-gradient step kept leaving the valid domain")


def train_bayes_scdc(
    dataset: Dataset,
    store: AnnotationStore | None,
    config: BayesConfig,
    rng: np.random.Generator,
) -> TrainResult:
    """Stochastic natural-gradient training loop.

    Each iteration pairs a uniform data minibatch with a proportional
    annotation minibatch, rebuilds the local posteriors of the combined
    working set from scratch, steps the globals along their scaled
    natural gradients, and follows reparameterization gradients of the
    objective through both networks.  Divergence restores the last
    finished epoch and sets the diverged flag on the result.
    """
    obs = dataset.observations
    n = dataset.n_items
    prior = config.prior()
    d = prior.latent_dim
    n_ann = store.n_annotations if store is not None else 0
    n_workers = store.n_workers if n_ann else 0
    glob = init_global(
        prior,
        rng,
        n_workers=n_workers,
        init_spread=config.init_spread,
        init_kappa=config.init_kappa,
        worker_init=config.worker_init,
    )
    recognition = Mlp([dataset.dim, *config.hidden], {"loc": d, "prec_raw": d}, rng)
    _calibrate_recognition_init(
        recognition, obs, config.init_potential_precision, config.init_potential_spread
    )
    decoder = Mlp(
        [d, *config.hidden],
        {"mean": dataset.dim, "logvar": dataset.dim},
        rng,
        clamp={"logvar": config.logvar_clamp},
    )
    params = recognition.parameters() + decoder.parameters()
    if config.net_optimizer == "adam":
        opt = Adam(params, lr=config.net_lr, maximize=True)
    else:
        opt = SgdMomentum(params, lr=config.net_lr, momentum=config.net_momentum, maximize=True)
    batches_per_epoch = -(-n // config.batch_size)
    warmup_updates = round(config.kl_warmup * config.epochs * batches_per_epoch)
    worker_prior = (BetaNat.from_tau(*config.worker_prior), BetaNat.from_tau(*config.worker_prior))
    threshold = min(0.5, 2.0 / n)
    model = BayesModel(
        prior, glob, recognition, decoder, config.worker_prior, config.local_sweeps, config.local_tol
    )
    history: list[dict] = []
    snapshot = [p.data.copy() for p in params]
    updates = 0
    diverged = False
    for epoch in range(config.epochs):
        estimates = []
        try:
            for batch in minibatch_iterator(n, config.batch_size, rng):
                batch = np.sort(batch)
                if n_ann:
                    want = config.annotation_batch_size
                    if want is None:
                        want = max(1, round(n_ann * batch.size / n))
                    sub, rel_scale = sample_annotation_minibatch(store, min(want, n_ann), rng)
                    working = np.unique(np.concatenate([batch, sub.annotated_items]))
                    local_store = _restrict_store(sub, working)
                else:
                    working = batch
                    local_store, rel_scale = None, 1.0
                rows = np.searchsorted(working, batch)
                data_scale = n / batch.size

                exps = global_expectations(glob)
                potential = recognition_potential(recognition, obs[working])
                local = block_coordinate_local(
                    glob, potential, local_store, config.local_sweeps, config.local_tol
                )
                resp = local.resp

                grads = mixture_natural_gradient(
                    prior, resp[rows], local.x_mean[rows], local.x_cov[rows], glob, scale=data_scale
                )
                if n_workers and local_store is not None:
                    grad_a, grad_b = beta_natural_gradient(
                        local_store, resp, worker_prior, glob.workers, scale=rel_scale
                    )
                    grads = replace(grads, worker_alpha=grad_a, worker_beta=grad_b)
                if config.global_step > 0.0:
                    step = config.global_step / (1.0 + updates) ** config.global_step_decay
                    new_glob = _stepped_globals(glob, grads, step)
                else:
                    new_glob = glob
                updates += 1

                noise = rng.standard_normal((config.n_samples, batch.size, d))
                # Dead zone then linear ramp: the latent KL stays off for the
                # first half of the warmup window while the decoder and the
                # mixture settle on the confident initial potentials, then
                # ramps to full strength by the window's end.
                if updates > warmup_updates:
                    kl_weight = 1.0
                else:
                    half = 0.5 * (warmup_updates + 1.0)
                    kl_weight = max(0.0, (updates - half) / half)
                with Tape() as tape:
                    objective, recon = _network_objective(
                        recognition, decoder, obs[batch], resp[rows], exps, noise, data_scale,
                        kl_weight=kl_weight,
                    )
                backward(tape, objective)
                opt.step()
                zero_grads(params)

                rel = 0.0
                if local_store is not None and glob.workers is not None:
                    rel = expected_rel_loglik(local_store, resp, glob.workers, scale=rel_scale)
                estimate = (
                    data_scale * (float(recon.data) - local_kl(exps, local, rows))
                    + rel
                    - global_kl(glob, prior, worker_prior)
                )
                if not np.isfinite(estimate):
                    raise TrainingDivergence("non-finite objective estimate")
                estimates.append(estimate)
                glob = new_glob
        except (TrainingDivergence, np.linalg.LinAlgError):
            diverged = True
            for p, saved in zip(params, snapshot):
                p.data = saved
            glob = model.glob
            break
        model = BayesModel(
            prior,
            glob,
            recognition,
            decoder,
            config.worker_prior,
            config.local_sweeps,
            config.local_tol,
        )
        snapshot = [p.data.copy() for p in params]
        record = {"epoch": epoch, "objective": float(np.mean(estimates))}
        predicted = model.predict(obs)
        record["effective_k"] = effective_components(glob, threshold)
        if dataset.labels is not None:
            record["accuracy"] = clustering_accuracy(predicted, dataset.labels)
            record["nmi"] = nmi(predicted, dataset.labels)
        else:
            record["accuracy"] = float("nan")
            record["nmi"] = float("nan")
        history.append(record)
    return TrainResult(model, history, diverged)
