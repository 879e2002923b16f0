"""Per-class diagonal-Gaussian feature estimators and their noised aggregation.

Clients track a running (mean, variance) of split-layer features per class
with momentum `beta`; the server averages client estimates plus fresh
Gaussian noise into a global estimator, from which label-conditioned
feature batches are sampled.
"""

from dataclasses import dataclass

import numpy as np

from .seeds import rng_for


class StatsError(ValueError):
    pass


@dataclass(eq=False)
class NoiseSpec:
    """Gaussian perturbation added to every client estimate on aggregation."""

    sigma_eps: float
    seed: int

    def __post_init__(self):
        if self.sigma_eps < 0:
            raise StatsError("sigma_eps must be >= 0")


@dataclass(eq=False)
class ClassFeatureStats:
    """C independent diagonal Gaussians over the split-layer feature space."""

    mean: np.ndarray          # (num_classes, dim)
    var: np.ndarray           # (num_classes, dim), >= 0
    count: np.ndarray         # (num_classes,) batches seen per class
    beta: float               # moving-average momentum in [0, 1]

    def __post_init__(self):
        self.mean = np.ascontiguousarray(self.mean, dtype=np.float64)
        self.var = np.ascontiguousarray(self.var, dtype=np.float64)
        self.count = np.ascontiguousarray(self.count, dtype=np.int64)
        if self.mean.ndim != 2 or self.mean.shape != self.var.shape:
            raise StatsError("mean/var must be (num_classes, dim) and congruent")
        if self.count.shape != (self.mean.shape[0],):
            raise StatsError("count must have one entry per class")
        if not 0.0 <= self.beta <= 1.0:
            raise StatsError("beta must lie in [0, 1]")
        if np.any(self.var < 0):
            raise StatsError("variances must be >= 0")

    @property
    def num_classes(self):
        return self.mean.shape[0]

    @property
    def dim(self):
        return self.mean.shape[1]

    @classmethod
    def init(cls, num_classes, dim, beta):
        """Fresh estimator: standard-normal prior (mean 0, variance 1)."""
        return cls(
            np.zeros((num_classes, dim)),
            np.ones((num_classes, dim)),
            np.zeros(num_classes, dtype=np.int64),
            beta,
        )

    def copy(self, beta=None):
        return ClassFeatureStats(
            self.mean.copy(), self.var.copy(), self.count.copy(),
            self.beta if beta is None else beta,
        )

    def to_json_dict(self):
        return {
            str(c): {
                "mean": self.mean[c].tolist(),
                "var": self.var[c].tolist(),
                "count": int(self.count[c]),
            }
            for c in range(self.num_classes)
        }

    @classmethod
    def from_json_dict(cls, doc, beta):
        classes = sorted(doc, key=int)
        mean = np.asarray([doc[c]["mean"] for c in classes])
        var = np.asarray([doc[c]["var"] for c in classes])
        count = np.asarray([doc[c]["count"] for c in classes], dtype=np.int64)
        return cls(mean, var, count, beta)


def client_update(stats, features, labels):
    """Fold one feature batch into the estimator, class by class.

    For every class in the batch: moving-average blend of batch mean and
    (population) variance with momentum beta. The first batch a class ever
    sees is copied verbatim instead of blended with the prior.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise StatsError("features/labels rows disagree")
    if features.shape[1] != stats.dim:
        raise StatsError(f"feature dim {features.shape[1]} != estimator dim {stats.dim}")
    if labels.min() < 0 or labels.max() >= stats.num_classes:
        raise StatsError("label out of range")
    out = stats.copy()
    b = stats.beta
    for c in np.unique(labels):
        rows = features[labels == c]
        m = rows.mean(axis=0)
        v = rows.var(axis=0)
        if out.count[c] == 0:
            out.mean[c] = m
            out.var[c] = v
        else:
            out.mean[c] = b * out.mean[c] + (1.0 - b) * m
            out.var[c] = b * out.var[c] + (1.0 - b) * v
        out.count[c] += 1
    np.maximum(out.var, 0.0, out=out.var)
    return out


def server_aggregate(client_stats, global_stats, noise):
    """Blend noised client estimates into the global estimator.

    Per class: the mean over clients that have updated that class of
    (estimate + fresh N(0, sigma_eps) noise, drawn independently per
    client, class, dimension, and separately for mean and variance) is
    blended into the global value with momentum beta_g. Classes nobody
    contributed to stay untouched. Variances are clamped at 0 after noise.
    """
    if not client_stats:
        raise StatsError("need at least one client estimator")
    for cs in client_stats:
        if cs.mean.shape != global_stats.mean.shape:
            raise StatsError("client/global estimator shapes disagree")
    rng = rng_for(noise.seed)
    bg = global_stats.beta
    shape = global_stats.mean.shape
    noisy_mean = np.zeros(shape)
    noisy_var = np.zeros(shape)
    contributors = np.zeros(global_stats.num_classes, dtype=np.int64)
    # noise draw order is fixed by client list order, so aggregation is
    # reproducible regardless of how clients were simulated
    for cs in client_stats:
        eps_mean = rng.normal(0.0, noise.sigma_eps, size=shape) if noise.sigma_eps > 0 else 0.0
        eps_var = rng.normal(0.0, noise.sigma_eps, size=shape) if noise.sigma_eps > 0 else 0.0
        active = cs.count > 0
        noisy_mean[active] += (cs.mean + eps_mean)[active]
        noisy_var[active] += (cs.var + eps_var)[active]
        contributors += active
    out = global_stats.copy()
    for c in np.flatnonzero(contributors):
        m = noisy_mean[c] / contributors[c]
        v = noisy_var[c] / contributors[c]
        out.mean[c] = bg * out.mean[c] + (1.0 - bg) * m
        out.var[c] = bg * out.var[c] + (1.0 - bg) * v
        out.count[c] += 1
    np.maximum(out.var, 0.0, out=out.var)
    return out


def sample_features(stats, labels, rng):
    """Draw one feature row per label from N(mean[y], diag(var[y]))."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= stats.num_classes):
        raise StatsError("label out of range")
    z = rng.standard_normal((labels.size, stats.dim))
    return stats.mean[labels] + np.sqrt(stats.var[labels]) * z
