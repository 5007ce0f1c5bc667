"""Federated round loop: sampling, local updates, weighted aggregation.

One round: the server samples K of N clients uniformly without
replacement, broadcasts the current keys, each selected client runs E
local epochs of SGD on its shard (optionally with a FedProx proximal
pull toward the broadcast keys), and the server averages the returned
keys weighted by shard size over the selected subset. Only key matrices
and scalar losses cross the client-to-server boundary.

Everything is deterministic for a fixed config seed: client sampling
derives from (seed, round), per-client shuffling from (seed, round,
client id), and aggregation always sums in ascending client-id order, so
results do not depend on scheduling or thread count.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import cache_model as cm
from .errors import AggregationError, SamplingError
from .features import World
from .partition import Partition
from .rng import derive_rng

THREADS_ENV_VAR = "CACHEFED_THREADS"


@dataclass(frozen=True)
class FederationConfig:
    """Protocol parameters for one federated run.

    ``clients_per_round=None`` means full participation (K = N).

    One local epoch is one pass over the client's shard. How the pass is
    chunked into SGD steps is controlled by exactly one of:

    * ``steps_per_epoch`` (the default): the shuffled shard is split into
      that many equal-count batches, so every client performs the same
      number of mean-gradient steps per epoch regardless of shard size.
      Combined with sample-count aggregation weights, each round then
      moves the global keys by (nearly) the global mean gradient per
      step, which keeps heavily skewed partitions from being dominated
      by large shards. Shards smaller than steps_per_epoch fall back to
      one sample per step.
    * ``batch_size``: fixed-size batches (None here with
      ``steps_per_epoch=None`` means one full-shard batch per epoch).
    """

    num_clients: int
    clients_per_round: int | None = None
    rounds: int = 20
    local_epochs: int = 1
    lr: float = 0.001
    alpha: float = cm.DEFAULT_ALPHA
    beta: float = cm.DEFAULT_BETA
    prox_mu: float = 0.0
    seed: int = 0
    steps_per_epoch: int | None = 64
    batch_size: int | None = None
    lr_schedule: str = "constant"  # "constant" | "inverse_t"
    schedule_gamma: float = 1.0

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        k = self.resolved_clients_per_round
        if not 1 <= k <= self.num_clients:
            raise ValueError(
                f"clients_per_round must lie in [1, {self.num_clients}], got {k}"
            )
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.local_epochs < 0:
            raise ValueError("local_epochs must be >= 0")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.prox_mu < 0:
            raise ValueError("prox_mu must be >= 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1 or None for full-shard batches")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be >= 1 or None")
        if self.steps_per_epoch is not None and self.batch_size is not None:
            raise ValueError("set either steps_per_epoch or batch_size, not both")
        if self.lr_schedule not in ("constant", "inverse_t"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.schedule_gamma <= 0:
            raise ValueError("schedule_gamma must be > 0")

    @property
    def resolved_clients_per_round(self) -> int:
        if self.clients_per_round is None:
            return self.num_clients
        return self.clients_per_round

    def lr_at(self, round_index: int) -> float:
        if self.lr_schedule == "constant":
            return self.lr
        return self.lr * self.schedule_gamma / (self.schedule_gamma + round_index - 1)


@dataclass(frozen=True)
class RoundLog:
    round_index: int
    selected: tuple[int, ...]
    client_losses: dict[int, float]
    accuracy: float
    params_uploaded: int
    flops_estimate: int

    def __post_init__(self):
        if len(set(self.selected)) != len(self.selected):
            raise ValueError("selected client ids must be distinct")

    @property
    def mean_loss(self) -> float:
        if not self.client_losses:
            return float("nan")
        return float(np.mean(list(self.client_losses.values())))


@dataclass
class ServerState:
    global_model: cm.CacheModel
    round_index: int
    history: list[RoundLog] = field(default_factory=list)
    initial_accuracy: float = float("nan")


@dataclass(frozen=True)
class ClientResult:
    """Everything a client is allowed to send back to the server."""

    client_id: int
    keys: np.ndarray
    epoch_losses: tuple[float, ...]


def sample_clients(round_index: int, cfg: FederationConfig, p: Partition) -> list[int]:
    """K distinct client ids drawn from the nonempty clients, keyed by (seed, round).

    With ``clients_per_round=None`` (full participation) every nonempty
    client is selected; empty shards keep their client id but never
    participate.
    """
    eligible = p.nonempty_clients()
    if cfg.clients_per_round is None:
        if not eligible:
            raise SamplingError(f"round {round_index}: no nonempty clients")
        return eligible
    k = cfg.clients_per_round
    if len(eligible) < k:
        raise SamplingError(
            f"round {round_index}: need {k} nonempty clients, only {len(eligible)} available"
        )
    rng = derive_rng(cfg.seed, "sample", round_index)
    chosen = rng.choice(np.array(eligible, dtype=np.int64), size=k, replace=False)
    return sorted(int(c) for c in chosen)


def _batches(order: np.ndarray, cfg: FederationConfig):
    if cfg.steps_per_epoch is not None:
        for batch in np.array_split(order, min(cfg.steps_per_epoch, order.shape[0])):
            yield batch
    elif cfg.batch_size is None:
        yield order
    else:
        for start in range(0, order.shape[0], cfg.batch_size):
            yield order[start : start + cfg.batch_size]


def steps_per_epoch_for(cfg: FederationConfig, shard_size: int) -> int:
    """Number of SGD steps one epoch takes on a shard of the given size."""
    if cfg.steps_per_epoch is not None:
        return min(cfg.steps_per_epoch, shard_size)
    if cfg.batch_size is None:
        return 1
    return math.ceil(shard_size / cfg.batch_size)


def client_update(
    client_id: int,
    global_model: cm.CacheModel,
    text_head,
    features: np.ndarray,
    labels: np.ndarray,
    cfg: FederationConfig,
    round_index: int,
) -> ClientResult:
    """Run E local epochs of SGD on one shard, starting from the broadcast keys.

    With ``prox_mu > 0`` the gradient gains the FedProx pull
    prox_mu * (W1_local - W1_broadcast). Returns only the updated keys
    and per-epoch mean losses.
    """
    if features.shape[0] == 0:
        raise SamplingError(f"client {client_id} has an empty shard")
    global_keys = global_model.keys
    model = global_model
    lr = cfg.lr_at(round_index)
    rng = derive_rng(cfg.seed, "client", round_index, client_id)
    n = features.shape[0]
    epoch_losses = []
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        total = 0.0
        for batch_idx in _batches(order, cfg):
            loss, grad = cm.loss_and_grad_w1(
                model, text_head, features[batch_idx], labels[batch_idx]
            )
            if cfg.prox_mu > 0.0:
                grad = grad + cfg.prox_mu * (model.keys - global_keys)
            model = cm.sgd_step(model, grad, lr)
            total += loss * batch_idx.shape[0]
        epoch_losses.append(total / n)
    return ClientResult(client_id=client_id, keys=model.keys, epoch_losses=tuple(epoch_losses))


def aggregate(updates: list[tuple[int, np.ndarray]], p: Partition) -> np.ndarray:
    """Average key matrices weighted by shard size over the selected subset.

    The denominator is the selected clients' sample mass, so the weights
    form a convex combination even under partial participation. Summation
    runs in ascending client-id order.
    """
    if not updates:
        raise AggregationError("no updates to aggregate")
    n_k = p.n_k
    ordered = sorted(updates, key=lambda u: u[0])
    total = float(sum(n_k[k] for k, _ in ordered))
    if total <= 0.0:
        raise AggregationError("selected clients hold zero samples in total")
    out = np.zeros_like(ordered[0][1])
    for k, keys in ordered:
        if keys.shape != out.shape:
            raise AggregationError(
                f"client {k} update shape {keys.shape} != {out.shape}"
            )
        out += (n_k[k] / total) * keys
    return out


@dataclass(frozen=True)
class ModelDims:
    feature_dim: int
    cache_size: int
    num_classes: int
    samples_per_client: int


def _flops_per_sample(dims: ModelDims, prox: bool) -> int:
    c, m, n = dims.feature_dim, dims.cache_size, dims.num_classes
    # Forward: zero-shot 2CN, similarity 2CM, affinity 3M (shift, scale,
    # exp), adapter 2MN, fuse 2N, softmax 4N. Backward: d_fused 2N,
    # d_affinity 2NM + M, elementwise scale 2M, key gradient 2CM.
    flops = 2 * c * n + 2 * c * m + 3 * m + 2 * m * n + 2 * n + 4 * n
    flops += 2 * n + 2 * n * m + m + 2 * m + 2 * c * m
    if prox:
        flops += 3 * c * m  # subtract, scale, add
    return flops


def _flops_per_step(dims: ModelDims) -> int:
    # SGD key update: scale + subtract over C x M.
    return 2 * dims.feature_dim * dims.cache_size


def cost_accounting(cfg: FederationConfig, dims: ModelDims) -> tuple[int, int]:
    """(params_per_round, flops_per_round) from the closed-form count.

    Only the key matrix travels, so params_per_round = K * C * M. FLOPs
    count multiply and add as one operation each and exp as one; the
    per-sample and per-step terms are documented next to the formulas.
    Both results are exactly linear in E and K.
    """
    k = cfg.resolved_clients_per_round
    params_per_round = k * dims.feature_dim * dims.cache_size
    spc = dims.samples_per_client
    steps = steps_per_epoch_for(cfg, spc)
    per_client_epoch = spc * _flops_per_sample(dims, cfg.prox_mu > 0.0) + steps * _flops_per_step(dims)
    flops_per_round = k * cfg.local_epochs * per_client_epoch
    return params_per_round, flops_per_round


def _round_flops(cfg: FederationConfig, model: cm.CacheModel, shard_sizes: list[int]) -> int:
    total = 0
    for n_k in shard_sizes:
        dims = ModelDims(model.feature_dim, model.num_cached, model.num_classes, n_k)
        steps = steps_per_epoch_for(cfg, n_k)
        total += cfg.local_epochs * (
            n_k * _flops_per_sample(dims, cfg.prox_mu > 0.0) + steps * _flops_per_step(dims)
        )
    return total


def thread_cap() -> int:
    """Worker cap from CACHEFED_THREADS (0 or unset = auto)."""
    raw = os.environ.get(THREADS_ENV_VAR, "0")
    try:
        value = int(raw)
    except ValueError as exc:
        raise ValueError(f"{THREADS_ENV_VAR} must be an integer, got {raw!r}") from exc
    if value < 0:
        raise ValueError(f"{THREADS_ENV_VAR} must be >= 0, got {value}")
    if value == 0:
        return 1  # auto: shards are tiny, sequential is fastest
    return value


def run_training(
    world: World,
    p: Partition,
    cfg: FederationConfig,
    client_update_fn=client_update,
) -> tuple[ServerState, list[RoundLog]]:
    """Run T federated rounds and evaluate the global model after each.

    The cache is initialized from the world's balanced synthetic split,
    mirroring the server-side initialization step. Client updates within
    a round are independent; they may run on a thread pool (capped by
    CACHEFED_THREADS) without changing results.
    """
    train, test = world.real_train, world.real_test
    model = cm.init_cache(world.synthetic_balanced, alpha=cfg.alpha, beta=cfg.beta)
    state = ServerState(global_model=model, round_index=0)
    state.initial_accuracy = cm.evaluate(model, world.text_head, test)
    workers = thread_cap()

    for t in range(1, cfg.rounds + 1):
        selected = sample_clients(t, cfg, p)

        def one_client(k: int, model=model, t=t):
            shard = p.shards[k]
            return client_update_fn(
                k, model, world.text_head, train.features[shard], train.labels[shard], cfg, t
            )

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(one_client, selected))
        else:
            results = [one_client(k) for k in selected]

        new_keys = aggregate([(r.client_id, r.keys) for r in results], p)
        model = replace(model, keys=new_keys)
        accuracy = cm.evaluate(model, world.text_head, test)
        params = len(selected) * model.feature_dim * model.num_cached
        flops = _round_flops(cfg, model, [len(p.shards[k]) for k in selected])
        state.history.append(
            RoundLog(
                round_index=t,
                selected=tuple(selected),
                client_losses={
                    r.client_id: (r.epoch_losses[-1] if r.epoch_losses else float("nan"))
                    for r in results
                },
                accuracy=accuracy,
                params_uploaded=params,
                flops_estimate=flops,
            )
        )
        state.global_model = model
        state.round_index = t

    return state, state.history


# ---------------------------------------------------------------------------
# History export

CSV_HEADER = "# columns: round,accuracy,mean_loss,params_uploaded,flops"


def history_to_csv(state: ServerState) -> str:
    """Round history as CSV text, including a round-0 evaluation row."""
    lines = [CSV_HEADER]
    lines.append(f"0,{state.initial_accuracy!r},,0,0")
    for log in state.history:
        lines.append(
            f"{log.round_index},{log.accuracy!r},{log.mean_loss!r},"
            f"{log.params_uploaded},{log.flops_estimate}"
        )
    return "\n".join(lines) + "\n"


def history_to_jsonl(state: ServerState) -> str:
    """One JSON object per round, round 0 first."""
    rows = [{"round": 0, "accuracy": state.initial_accuracy}]
    for log in state.history:
        rows.append(
            {
                "round": log.round_index,
                "selected": list(log.selected),
                "client_losses": {str(k): v for k, v in sorted(log.client_losses.items())},
                "accuracy": log.accuracy,
                "mean_loss": log.mean_loss,
                "params_uploaded": log.params_uploaded,
                "flops": log.flops_estimate,
            }
        )
    return "\n".join(json.dumps(r, sort_keys=True) for r in rows) + "\n"
