"""Two-coin worker model for pairwise same-cluster annotations.

Worker m labels a pair (i, j) with L = 1 ("same cluster") or L = 0.  Their
accuracy is (alpha_m, beta_m): alpha_m is the probability of answering 1
when the pair really is in one cluster, beta_m of answering 0 when it is
not, so

    p(L | z_i, z_j) = Bern(L | alpha_m)^{[z_i = z_j]} Bern(L | 1 - beta_m)^{[z_i != z_j]}.

Labels are symmetric in (i, j) and stored canonically with i < j; absence
of a triple is the "unobserved" indicator state.
"""

from __future__ import annotations

import numpy as np
from scipy.special import digamma

from .expfam import BetaNat

ACCURACY_CLAMP = 1e-6


class AnnotationStore:
    """Immutable canonical set of (i, j, m, label) annotation triples."""

    def __init__(self, triples, n_items: int, n_workers: int):
        self.n_items = int(n_items)
        self.n_workers = int(n_workers)
        canonical = {}
        for row, triple in enumerate(triples):
            if len(triple) != 4:
                raise ValueError(f"triple {row}: expected (i, j, m, label)")
            i, j, m, label = (int(v) for v in triple)
            if i == j:
                raise ValueError(f"triple {row}: self-pair ({i}, {j})")
            if not (0 <= i < self.n_items and 0 <= j < self.n_items):
                raise ValueError(f"triple {row}: item index out of range")
            if not 0 <= m < self.n_workers:
                raise ValueError(f"triple {row}: worker index {m} out of range")
            if label not in (0, 1):
                raise ValueError(f"triple {row}: label must be 0 or 1, got {label}")
            key = (min(i, j), max(i, j), m)
            if key in canonical and canonical[key] != label:
                raise ValueError(f"triple {row}: conflicting label for pair {key}")
            canonical[key] = label
        rows = sorted((i, j, m, l) for (i, j, m), l in canonical.items())
        self.triples = np.array(rows, dtype=int).reshape(len(rows), 4)
        self.triples.setflags(write=False)
        self._index = {(i, j, m): l for i, j, m, l in rows}

    @property
    def n_annotations(self) -> int:
        return self.triples.shape[0]

    @property
    def annotated_items(self) -> np.ndarray:
        if self.n_annotations == 0:
            return np.empty(0, dtype=int)
        return np.unique(self.triples[:, :2])

    @property
    def n_labeled(self) -> int:
        return self.annotated_items.size

    def label(self, i: int, j: int, m: int):
        """Label for (i, j) by worker m in either orientation, or None."""
        return self._index.get((min(i, j), max(i, j), int(m)))

    def has(self, i: int, j: int, m: int) -> bool:
        return self.label(i, j, m) is not None

    def select(self, rows) -> "AnnotationStore":
        return AnnotationStore(self.triples[np.asarray(rows, dtype=int)], self.n_items, self.n_workers)


# ---------------------------------------------------------------------------
# worker accuracies: point values or Beta posteriors


def _clamped(values) -> np.ndarray:
    return np.clip(np.asarray(values, dtype=float), ACCURACY_CLAMP, 1.0 - ACCURACY_CLAMP)


class PointWorkers:
    """Point worker accuracies, clamped away from {0, 1} before any log."""

    def __init__(self, alpha, beta):
        self.alpha = _clamped(alpha)
        self.beta = _clamped(beta)
        if self.alpha.shape != self.beta.shape or self.alpha.ndim != 1:
            raise ValueError("alpha and beta must be equal-length vectors")

    @property
    def n_workers(self) -> int:
        return self.alpha.shape[0]

    def log_stats(self) -> np.ndarray:
        """(M, 4) rows of (log a, log(1-a), log b, log(1-b))."""
        return np.stack(
            [
                np.log(self.alpha),
                np.log1p(-self.alpha),
                np.log(self.beta),
                np.log1p(-self.beta),
            ],
            axis=1,
        )


class BetaWorkers:
    """Beta posteriors q(alpha_m), q(beta_m); logs enter as expectations."""

    def __init__(self, alpha_nats, beta_nats):
        self.alpha_nats = tuple(alpha_nats)
        self.beta_nats = tuple(beta_nats)
        if len(self.alpha_nats) != len(self.beta_nats):
            raise ValueError("need one (alpha, beta) posterior pair per worker")
        for p in self.alpha_nats + self.beta_nats:
            if not isinstance(p, BetaNat):
                raise TypeError("posteriors must be BetaNat")

    @classmethod
    def constant_init(cls, n_workers: int, tau1: float, tau2: float) -> "BetaWorkers":
        nats = [BetaNat.from_tau(tau1, tau2) for _ in range(n_workers)]
        return cls(list(nats), [BetaNat.from_tau(tau1, tau2) for _ in range(n_workers)])

    @property
    def n_workers(self) -> int:
        return len(self.alpha_nats)

    @property
    def alpha_taus(self) -> np.ndarray:
        return np.array([p.tau for p in self.alpha_nats])

    @property
    def beta_taus(self) -> np.ndarray:
        return np.array([p.tau for p in self.beta_nats])

    @property
    def mean_accuracies(self) -> tuple[np.ndarray, np.ndarray]:
        ta, tb = self.alpha_taus, self.beta_taus
        return ta[:, 0] / ta.sum(axis=1), tb[:, 0] / tb.sum(axis=1)

    def log_stats(self) -> np.ndarray:
        """(M, 4) rows of (E log a, E log(1-a), E log b, E log(1-b))."""
        ta, tb = self.alpha_taus, self.beta_taus
        ea = digamma(ta) - digamma(ta.sum(axis=1, keepdims=True))
        eb = digamma(tb) - digamma(tb.sum(axis=1, keepdims=True))
        return np.concatenate([ea, eb], axis=1)


# ---------------------------------------------------------------------------
# likelihood pieces


def annotation_log_likelihood(label: int, same_cluster: bool, alpha_m: float, beta_m: float) -> float:
    """log p(L = label | pair relation, worker accuracies), point form."""
    if label not in (0, 1):
        raise ValueError("label must be 0 or 1")
    for v in (alpha_m, beta_m):
        if not 0.0 < v < 1.0:
            raise ValueError("accuracies must lie strictly inside (0, 1)")
    if same_cluster:
        return float(np.log(alpha_m) if label == 1 else np.log1p(-alpha_m))
    return float(np.log1p(-beta_m) if label == 1 else np.log(beta_m))


def _message_weights(labels: np.ndarray, log_stats: np.ndarray) -> np.ndarray:
    """w = E[log((1-a)/b)] + L (E[log(a/(1-a))] + E[log(b/(1-b))]) per triple."""
    base = log_stats[:, 1] - log_stats[:, 2]
    swing = (log_stats[:, 0] - log_stats[:, 1]) + (log_stats[:, 2] - log_stats[:, 3])
    return base + labels * swing


def message_weight(store: AnnotationStore, i: int, j: int, m: int, workers) -> float:
    """Weight of the z-message along annotation (i, j, m); 0 if unannotated."""
    label = store.label(i, j, m)
    if label is None:
        return 0.0
    ls = workers.log_stats()[m : m + 1]
    return float(_message_weights(np.array([label], dtype=float), ls)[0])


def worker_weight(alpha_m: float, beta_m: float) -> float:
    """log(a/(1-a)) + log(b/(1-b)); the effective vote weight of a worker."""
    for v in (alpha_m, beta_m):
        if not 0.0 < v < 1.0:
            raise ValueError("accuracies must lie strictly inside (0, 1)")
    return float(np.log(alpha_m / (1.0 - alpha_m)) + np.log(beta_m / (1.0 - beta_m)))


def expected_worker_weights(workers) -> np.ndarray:
    """Per-worker expected log-odds weight under the worker representation."""
    ls = workers.log_stats()
    return (ls[:, 0] - ls[:, 1]) + (ls[:, 2] - ls[:, 3])


def expected_rel_loglik(store: AnnotationStore, q_z: np.ndarray, workers, scale: float = 1.0) -> float:
    """E_q log p(L | Z, alpha, beta) summed over the stored triples.

    Per triple: w * <E t(z_i), E t(z_j)> + E[L log((1-b)/b) + log b],
    with w the message weight above.
    """
    if store.n_annotations == 0:
        return 0.0
    t = store.triples
    q_z = np.asarray(q_z, dtype=float)
    ls = workers.log_stats()[t[:, 2]]
    labels = t[:, 3].astype(float)
    w = _message_weights(labels, ls)
    p_same = np.sum(q_z[t[:, 0]] * q_z[t[:, 1]], axis=1)
    const = labels * (ls[:, 3] - ls[:, 2]) + ls[:, 2]
    return float(scale * np.sum(w * p_same + const))


def beta_natural_gradient(
    store: AnnotationStore,
    q_z: np.ndarray,
    prior: tuple[BetaNat, BetaNat],
    current: BetaWorkers,
    scale: float = 1.0,
    m: int | None = None,
):
    """Natural gradients of the objective in the worker Beta parameters.

    Fixed point: posterior = prior + (scaled) expected confusion counts,
    counting each canonical i < j triple once.  Returns (M, 2) arrays for
    the alpha and beta parameters, or the m-th rows when m is given.
    """
    q_z = np.asarray(q_z, dtype=float)
    M = current.n_workers
    counts_a = np.zeros((M, 2))
    counts_b = np.zeros((M, 2))
    if store.n_annotations > 0:
        t = store.triples
        labels = t[:, 3].astype(float)
        p_same = np.sum(q_z[t[:, 0]] * q_z[t[:, 1]], axis=1)
        np.add.at(counts_a, t[:, 2], p_same[:, None] * np.stack([labels, 1.0 - labels], axis=1))
        np.add.at(
            counts_b, t[:, 2], (1.0 - p_same)[:, None] * np.stack([1.0 - labels, labels], axis=1)
        )
    prior_a, prior_b = prior
    grad_a = prior_a.eta + scale * counts_a - np.array([p.eta for p in current.alpha_nats])
    grad_b = prior_b.eta + scale * counts_b - np.array([p.eta for p in current.beta_nats])
    if m is not None:
        return grad_a[m], grad_b[m]
    return grad_a, grad_b


def sample_annotation_minibatch(store: AnnotationStore, batch_size: int, rng):
    """Uniform without-replacement triple sample plus its N_a/|S| scale."""
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    n = store.n_annotations
    if batch_size >= n:
        return store, 1.0
    rows = rng.choice(n, size=batch_size, replace=False)
    return store.select(np.sort(rows)), n / float(batch_size)
