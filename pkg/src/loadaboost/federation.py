"""Simulated federated training: FedAvg and loss-gated LoAdaBoost rounds."""

from __future__ import annotations

import math
from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import ClientPartition, Dataset, SharedHoldout, share_data
from .nn_core import (DEFAULT_HIDDEN, AdamState, LayerSpec, ModelWeights, average_weights,
                      forward, init_weights, train_epochs)

FEDAVG = "fedavg"
LOADABOOST = "loadaboost"
ALGORITHMS = (FEDAVG, LOADABOOST)

INITIAL_MEDIAN_LOSS = 1.0
ADAM_POLICY = "reset-per-round"

# SeedSequence stream tags
_INIT, _SELECT, _CLIENT, _SHARE = 0, 1, 2, 3


class InvariantError(RuntimeError):
    """A run produced a state that must be impossible."""


def stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def client_rng(seed: int, t: int, client_id: int) -> np.random.Generator:
    """Generator driving client ``client_id``'s shuffling in round ``t``."""
    return stream(seed, _CLIENT, t, client_id)


def init_seed(seed: int) -> int:
    return int(np.random.SeedSequence([int(seed), _INIT]).generate_state(1)[0])


@dataclass(frozen=True)
class FederationConfig:
    K: int
    C: float = 0.1
    E: int = 5
    B: int = 30
    T: int = 20
    algorithm: str = FEDAVG
    seed: int = 0
    hidden: tuple[int, ...] = DEFAULT_HIDDEN
    eta: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not 0 < self.C <= 1:
            raise ValueError(f"C must lie in (0, 1], got {self.C}")
        if self.E < 1 or self.B < 1 or self.T < 1:
            raise ValueError("E, B and T must all be >= 1")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; choose from {ALGORITHMS}")

    @property
    def m(self) -> int:
        return clients_per_round(self.K, self.C)

    def fresh_adam(self, n_params: int) -> AdamState:
        return AdamState.fresh(n_params, self.eta, self.beta1, self.beta2, self.epsilon)


@dataclass(eq=False)
class ClientReport:
    client_id: int
    weights: ModelWeights
    reported_loss: float
    epochs_used: int
    # epochs trained per chunk: initial chunk, then one entry per retrain round
    schedule: tuple[int, ...] = ()
    final_loss: float = float("nan")


@dataclass(eq=False)
class RoundRecord:
    round_index: int
    selected: tuple[int, ...]
    reports: list[ClientReport]
    weights: ModelWeights
    median_loss_out: float
    test_auc: float

    @property
    def total_epochs(self) -> int:
        return sum(r.epochs_used for r in self.reports)


@dataclass(eq=False)
class RunHistory:
    config: FederationConfig
    rounds: list[RoundRecord] = field(default_factory=list)
    adam_policy: str = ADAM_POLICY
    shared_per_client: int = 0

    @property
    def final_weights(self) -> ModelWeights:
        return self.rounds[-1].weights

    def auc_curve(self) -> list[tuple[int, float]]:
        return [(r.round_index, r.test_auc) for r in self.rounds]


def clients_per_round(K: int, C: float) -> int:
    # 1e-9 keeps e.g. 0.1 * 90 from flooring to 8
    return max(int(math.floor(C * K + 1e-9)), 1)


def select_clients(K: int, C: float, rng: np.random.Generator) -> np.ndarray:
    m = clients_per_round(K, C)
    return np.sort(rng.choice(K, size=m, replace=False))


def median(losses: Sequence[float]) -> float:
    """Middle order statistic; the mean of the two middle values for even counts."""
    xs = sorted(float(x) for x in losses)
    if not xs:
        raise ValueError("median of an empty sequence")
    mid = len(xs) // 2
    if len(xs) % 2:
        return xs[mid]
    return (xs[mid - 1] + xs[mid]) / 2.0


def half_epochs(E: int) -> int:
    return (E + 1) // 2


def epoch_budget(E: int) -> int:
    """Integer cap on a LoAdaBoost client's epochs: E + ceil(E/2)."""
    return E + half_epochs(E)


def retrain_epochs(E: int, r: int, used: int) -> int:
    """Epochs for retrain round ``r`` (1-based), cut to what remains of the budget."""
    return min(max(half_epochs(E) - r + 1, 1), epoch_budget(E) - used)


def client_update_fedavg(w_in: ModelWeights, client: Dataset, E: int, B: int,
                         rng: np.random.Generator, adam: AdamState,
                         client_id: int = 0) -> ClientReport:
    w, _, loss = train_epochs(w_in, client.features, client.labels, E, B, adam, rng)
    return ClientReport(client_id, w, loss, E, (E,), loss)


def client_update_loadaboost(w_in: ModelWeights, client: Dataset, E: int, B: int,
                             median_prev: float, rng: np.random.Generator, adam: AdamState,
                             client_id: int = 0) -> ClientReport:
    """Train ceil(E/2) epochs, then keep retraining with a shrinking epoch count
    while the full-data loss stays above ``median_prev``.

    The reported loss is always the one measured after the initial chunk;
    retraining only changes the returned weights and the epoch count.
    """
    if not median_prev > 0:
        raise ValueError("previous median loss must be positive")
    x, y = client.features.astype(np.float64), client.labels
    h = half_epochs(E)
    w, adam, loss0 = train_epochs(w_in, x, y, h, B, adam, rng)
    used, schedule, loss = h, [h], loss0
    r = 0
    while loss > median_prev and used < epoch_budget(E):
        r += 1
        n = retrain_epochs(E, r, used)
        w, adam, loss = train_epochs(w, x, y, n, B, adam, rng)
        used += n
        schedule.append(n)
    return ClientReport(client_id, w, loss0, used, tuple(schedule), loss)


def _client_job(args):
    algorithm, w, client, E, B, median_prev, seed, t, cid, adam = args
    rng = client_rng(seed, t, cid)
    if algorithm == FEDAVG:
        return client_update_fedavg(w, client, E, B, rng, adam, cid)
    return client_update_loadaboost(w, client, E, B, median_prev, rng, adam, cid)


def _check_report(cfg: FederationConfig, rep: ClientReport) -> None:
    if cfg.algorithm == FEDAVG:
        ok = rep.epochs_used == cfg.E
    else:
        ok = half_epochs(cfg.E) <= rep.epochs_used <= epoch_budget(cfg.E)
    if not ok:
        raise InvariantError(f"client {rep.client_id} used {rep.epochs_used} epochs under {cfg}")


def run_federated(config: FederationConfig, partition: ClientPartition, test: Dataset,
                  shared: Optional[tuple[SharedHoldout, float]] = None,
                  executor: Optional[Executor] = None,
                  init: Optional[ModelWeights] = None) -> RunHistory:
    """Run ``config.T`` global rounds and return the round-by-round history.

    ``shared`` is an optional ``(G, alpha)`` pair distributed to every client
    once before the first round. Client updates within a round are mapped
    over ``executor`` when one is given; results do not depend on it.
    """
    # local import: evaluation builds on this module
    from .evaluation import roc_auc

    if len(partition) != config.K:
        raise ValueError(f"config.K={config.K} but partition has {len(partition)} clients")
    shared_count = 0
    if shared is not None:
        holdout, alpha = shared
        before = partition.sizes
        partition = share_data(partition, holdout, alpha, int(stream(config.seed, _SHARE).integers(2**63)))
        shared_count = partition.sizes[0] - before[0]

    spec = LayerSpec.for_features(test.n_features, config.hidden)
    w = init if init is not None else init_weights(spec, init_seed(config.seed))
    history = RunHistory(config, shared_per_client=shared_count)
    median_prev = INITIAL_MEDIAN_LOSS
    mapper = executor.map if executor is not None else map

    for t in range(1, config.T + 1):
        selected = select_clients(config.K, config.C, stream(config.seed, _SELECT, t))
        jobs = [(config.algorithm, w, partition.clients[k], config.E, config.B, median_prev,
                 config.seed, t, int(k), config.fresh_adam(spec.n_params)) for k in selected]
        reports = sorted(mapper(_client_job, jobs), key=lambda r: r.client_id)
        for rep in reports:
            _check_report(config, rep)
        w = average_weights([r.weights for r in reports])
        median_out = median([r.reported_loss for r in reports])
        if config.algorithm == LOADABOOST:
            median_prev = median_out
        auc = roc_auc(forward(w, test.features), test.labels)
        history.rounds.append(RoundRecord(t, tuple(int(k) for k in selected), reports, w,
                                          median_out, auc))
    return history
