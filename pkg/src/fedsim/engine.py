"""Round-synchronous federated training loop with three local-update rules.

Local update variants:

* fedavg   - plain minibatch SGD on the raw shard.
* fedprox  - adds the proximal gradient prox_mu * (theta - theta_global).
* fedimpro - split training: every raw batch is paired with a batch of
  features drawn from the server's label-conditional Gaussian estimator
  and fed into the classifier head; the loss is the sum of both terms, so
  the feature-extractor block only ever receives raw-data gradient. Each
  client also folds its own split features into a local estimator, and the
  server aggregates those (noised) after each round.

Every stochastic choice draws from a Generator keyed by
(sampling_seed, round, client, purpose), so runs are reproducible and
independent of client simulation order.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import featstats, metrics, nn, seeds
from .data import batches
from .featstats import ClassFeatureStats, NoiseSpec
from .nn import GradientVector

ALGORITHMS = ("fedavg", "fedprox", "fedimpro")


class ConfigError(ValueError):
    pass


@dataclass
class FedConfig:
    """Everything the round loop needs besides the data and the model."""

    num_clients: int
    clients_per_round: int
    rounds: int
    local_epochs: int
    lr: float
    batch_size: int
    algorithm: str
    split_index: int
    prox_mu: float = 0.0
    beta_m: float = 0.9
    beta_g: float = 0.5
    sigma_eps: float = 0.01
    shared_ratio: float = 1.0
    stats_warm_start: bool = True
    init_seed: int = 0
    sampling_seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}")
        if not 1 <= self.clients_per_round <= self.num_clients:
            raise ConfigError("need 1 <= clients_per_round <= num_clients")
        if self.rounds < 0 or self.local_epochs < 1 or self.batch_size < 1:
            raise ConfigError("rounds >= 0, local_epochs >= 1, batch_size >= 1")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.prox_mu < 0 or self.shared_ratio < 0 or self.sigma_eps < 0:
            raise ConfigError("prox_mu, shared_ratio and sigma_eps must be >= 0")


@dataclass
class RoundRecord:
    """Metrics snapshot taken after a round's aggregation."""

    round: int
    accuracy: float | None
    divergence_total: float
    divergence_low: float
    divergence_high: float
    divergence_per_layer: list
    cgv_low: float | None = None
    cgv_high: float | None = None
    wall_time: float = 0.0


def sample_clients(num_clients, k, rng):
    """Uniform draw of k distinct clients, reported in ascending order."""
    picked = rng.choice(num_clients, size=k, replace=False)
    return sorted(int(m) for m in picked)


def client_update(global_model, global_stats, local_stats, shard, dataset, config,
                  round_index):
    """One client's local training pass; returns (new model, new stats).

    `local_stats` is the client's estimator going into the round (only used
    by fedimpro); it is returned unchanged for the other algorithms.
    """
    model = global_model.copy()
    theta_anchor = global_model.theta
    stats = local_stats
    fedimpro = config.algorithm == "fedimpro"
    if fedimpro:
        feat_rng = seeds.rng_for(config.sampling_seed, round_index, shard.client_id,
                                 seeds.FEATURE_DRAW)
    batch_seed = seeds.subseed(config.sampling_seed, round_index, seeds.BATCH_ORDER)
    for epoch in range(config.local_epochs):
        for x, y in batches(shard, dataset, config.batch_size, batch_seed, epoch):
            if fedimpro:
                _, grad, h = nn._loss_grad_feature(model, x, y, entry="raw")
                stats = featstats.client_update(stats, h, y)
                n_shared = int(round(config.shared_ratio * y.size))
                if n_shared > 0:
                    y_shared = y[np.arange(n_shared) % y.size]
                    h_shared = featstats.sample_features(global_stats, y_shared, feat_rng)
                    _, g_shared = nn.loss_and_grad(model, h_shared, y_shared, entry="feature")
                    grad = GradientVector(
                        grad.flat + (n_shared / y.size) * g_shared.flat, grad.d_low
                    )
            else:
                _, grad = nn.loss_and_grad(model, x, y)
                if config.algorithm == "fedprox" and config.prox_mu > 0:
                    grad = GradientVector(
                        grad.flat + config.prox_mu * (model.theta - theta_anchor),
                        grad.d_low,
                    )
            if config.lr > 0:
                model = nn.apply_update(model, grad, config.lr)
    return model, stats


def aggregate(models, weights):
    """Parameter-wise weighted average; weights renormalize over the set."""
    if not models:
        raise ConfigError("nothing to aggregate")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(models),) or w.sum() <= 0:
        raise ConfigError("need one positive-sum weight per model")
    ref = models[0]
    for m in models[1:]:
        if m.theta.size != ref.theta.size or not np.array_equal(m.dims, ref.dims):
            raise nn.ShapeError("models disagree in architecture")
    w = w / w.sum()
    stack = np.stack([m.theta for m in models])
    return ref.with_theta(w @ stack)


def pseudo_gradient(model_before, model_after):
    """Parameter displacement (after - before), exposed block-wise."""
    if model_before.theta.size != model_after.theta.size:
        raise nn.ShapeError("models disagree in size")
    return GradientVector(model_after.theta - model_before.theta,
                          model_before.num_params_low)


def run(model, dataset, manifest, config, test_data=None, eval_cadence=5,
        measure_cgv=False, on_record=None, on_round_end=None):
    """Execute the full round loop; returns the RoundRecord list.

    Metrics are recorded every `eval_cadence` rounds (and on the final
    round). `on_record` fires per record (for streaming emission) and
    `on_round_end(round_index, model)` after every aggregation.
    """
    if model.split_index != config.split_index:
        raise ConfigError(
            f"config split_index {config.split_index} != model split {model.split_index}"
        )
    shards = manifest.shards(dataset)
    if len(shards) != config.num_clients:
        raise ConfigError(
            f"manifest has {len(shards)} clients, config says {config.num_clients}"
        )
    fedimpro = config.algorithm == "fedimpro"
    global_stats = None
    client_stats = {}
    if fedimpro:
        global_stats = ClassFeatureStats.init(dataset.num_classes, model.feature_dim,
                                              config.beta_g)

    records = []
    for r in range(config.rounds):
        t0 = time.perf_counter()
        selected = sample_clients(
            config.num_clients, config.clients_per_round,
            seeds.rng_for(config.sampling_seed, r, seeds.CLIENT_SAMPLING),
        )
        local_models = []
        local_stats = []
        for m in selected:
            if fedimpro:
                if config.stats_warm_start and m in client_stats:
                    base = client_stats[m]
                else:
                    base = global_stats.copy(beta=config.beta_m)
            else:
                base = None
            lm, ls = client_update(model, global_stats, base, shards[m], dataset,
                                   config, r)
            local_models.append(lm)
            local_stats.append(ls)
        model = aggregate(local_models, [shards[m].p_m for m in selected])
        if fedimpro:
            noise = NoiseSpec(config.sigma_eps,
                              seeds.subseed(config.sampling_seed, r, seeds.SERVER_NOISE))
            global_stats = featstats.server_aggregate(local_stats, global_stats, noise)
            for m, ls in zip(selected, local_stats):
                client_stats[m] = ls

        if eval_cadence > 0 and ((r + 1) % eval_cadence == 0 or r == config.rounds - 1):
            acc = metrics.evaluate(model, test_data) if test_data is not None else None
            div = metrics.weight_divergence(model, local_models)
            cgv_low = cgv_high = None
            if measure_cgv:
                rep = metrics.cgv(model, shards, dataset)
                cgv_low = rep.avg_low_sq
                cgv_high = rep.avg_high_sq
            rec = RoundRecord(
                round=r,
                accuracy=acc,
                divergence_total=div.mean_total,
                divergence_low=div.mean_low,
                divergence_high=div.mean_high,
                divergence_per_layer=div.mean_per_layer.tolist(),
                cgv_low=cgv_low,
                cgv_high=cgv_high,
                wall_time=time.perf_counter() - t0,
            )
            records.append(rec)
            if on_record is not None:
                on_record(rec)
        if on_round_end is not None:
            on_round_end(r, model)
    return records, model, global_stats
