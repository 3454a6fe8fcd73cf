"""Metrics and the client-wise cross-validation harness."""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .data import (DataError, Dataset, concat, make_folds, make_shared_holdout, partition_iid,
                   partition_noniid, shared_count, split_holdout)
from .federation import ALGORITHMS, FederationConfig, RunHistory, run_federated

log = logging.getLogger(__name__)

IID = "iid"
NONIID = "noniid"
NONIID_SHARING = "noniid_sharing"
SCENARIOS = (IID, NONIID, NONIID_SHARING)


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney rank sum (midranks for ties)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.size != y.size:
        raise ValueError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative labels")
    ranks = rankdata(s, method="average")
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass(frozen=True)
class CurvePoint:
    round: int
    auc: float


def monotone_max(curve: Sequence[CurvePoint]) -> list[CurvePoint]:
    if not curve:
        raise ValueError("empty curve")
    best = np.maximum.accumulate([p.auc for p in curve])
    return [CurvePoint(p.round, float(b)) for p, b in zip(curve, best)]


def average_epochs(history: RunHistory) -> float:
    """Total client epochs over all rounds divided by the per-round client count."""
    if not history.rounds:
        raise ValueError("empty history")
    return sum(r.total_epochs for r in history.rounds) / history.config.m


def convergence_auc(history: RunHistory) -> float:
    """Final value of the running-maximum test AUC curve."""
    return max(r.test_auc for r in history.rounds)


# ------------------------------------------------------------------- Wilcoxon


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    p_value: float
    n: int
    degenerate: bool = False


def _signed_rank_null_counts(doubled_ranks: np.ndarray) -> np.ndarray:
    """counts[s] = number of sign assignments whose positive doubled-rank sum is s."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in doubled_ranks:
        r = int(r)
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:-r] if r else counts
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(a, b) -> WilcoxonResult:
    """Exact one-sided signed-rank test of ``a > b`` on paired samples.

    Zero differences are dropped and tied magnitudes get midranks. The null
    distribution is counted exactly over all 2**n sign assignments. When every
    difference is zero the result is p = 1 with ``degenerate`` set.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size or a.size == 0:
        raise ValueError("need two non-empty samples of equal length")
    d = a - b
    d = d[d != 0]
    if d.size == 0:
        warnings.warn("all paired differences are zero; reporting p = 1", RuntimeWarning)
        return WilcoxonResult(0.0, 1.0, 0, True)
    # midranks are multiples of 1/2, so doubling keeps everything integral
    doubled = np.rint(2 * rankdata(np.abs(d), method="average")).astype(np.int64)
    observed = int(doubled[d > 0].sum())
    counts = _signed_rank_null_counts(doubled)
    p = counts[observed:].sum() / 2 ** d.size
    return WilcoxonResult(observed / 2.0, float(p), int(d.size))


# ------------------------------------------------------------ cross-validation


@dataclass
class CvResult:
    algorithm: str
    auc_per_repetition: list[float]
    average_epochs_per_repetition: list[float]
    fold_aucs: list[list[float]] = field(default_factory=list)
    p_value: Optional[float] = None

    @property
    def mean_auc(self) -> float:
        return float(np.mean(self.auc_per_repetition))

    @property
    def std_auc(self) -> float:
        n = len(self.auc_per_repetition)
        return float(np.std(self.auc_per_repetition, ddof=1)) if n > 1 else 0.0

    @property
    def average_epochs(self) -> float:
        return float(np.mean(self.average_epochs_per_repetition))


@dataclass(frozen=True)
class Scenario:
    kind: str = IID
    alpha: Optional[float] = None
    beta: Optional[float] = None
    holdout_fraction: float = 0.1

    def __post_init__(self):
        if self.kind not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.kind!r}")
        sharing = self.kind == NONIID_SHARING
        if sharing != (self.alpha is not None and self.beta is not None):
            raise ValueError("alpha and beta are required exactly for noniid_sharing")
        if sharing and not (0 < self.alpha <= 1 and 0 < self.beta <= 1):
            raise ValueError("alpha and beta must lie in (0, 1]")


@dataclass
class FoldRun:
    algorithm: str
    repetition: int
    fold: int
    history: RunHistory

    @property
    def curve(self) -> list[CurvePoint]:
        return [CurvePoint(t, auc) for t, auc in self.history.auc_curve()]


@dataclass
class CrossValidation:
    results: dict[str, CvResult]
    runs: list[FoldRun]
    shared_per_client: int = 0
    n_client_examples: int = 0
    holdout_size: int = 0
    comparison: Optional[WilcoxonResult] = None


def _seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def _fold_job(args):
    algorithm, rep, fold, cfg, train, test, shared = args
    return FoldRun(algorithm, rep, fold, run_federated(cfg, train, test, shared))


def cross_validate(base: FederationConfig, dataset: Dataset, K: int, n_folds: int,
                   repetitions: int, scenario: Scenario = Scenario(),
                   algorithms: Sequence[str] = ALGORITHMS, paired: bool = True,
                   executor: Optional[Executor] = None) -> CrossValidation:
    """Client-wise k-fold cross-validation, repeated with distinct seeds.

    Each repetition partitions the data into ``K`` clients, groups the clients
    into folds and trains one federation per (fold, algorithm) on the other
    folds' clients, testing on the held-out fold. With ``paired`` every
    algorithm sees the same partition, initial weights and client selections.
    """
    for alg in algorithms:
        if alg not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {alg!r}")
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")

    pool, holdout_pool = dataset, None
    if scenario.kind == NONIID_SHARING:
        pool, holdout_pool = split_holdout(dataset, scenario.holdout_fraction, _seed(base.seed, 0xF0))

    jobs = []
    holdout_size = 0
    for rep in range(repetitions):
        rep_seed = _seed(base.seed, rep)
        if scenario.kind == IID:
            partition = partition_iid(pool, K, _seed(rep_seed, 1))
        else:
            partition = partition_noniid(pool, K)
        folds = make_folds(partition, n_folds, _seed(rep_seed, 2))
        if holdout_pool is not None:
            # beta is relative to all client data, so |G| is the same for every fold
            holdout = make_shared_holdout(holdout_pool, len(pool), scenario.beta, _seed(rep_seed, 3))
            holdout_size = len(holdout.data)
        for f, test_ids in enumerate(folds):
            train_ids = np.sort(np.concatenate([folds[g] for g in range(n_folds) if g != f]))
            if train_ids.size == 0:
                raise DataError("cross-validation needs at least two folds")
            test = concat([partition.clients[k] for k in test_ids])
            train = type(partition)([partition.clients[k] for k in train_ids], partition.scheme,
                                    partition.sort_keys, [partition.indices[k] for k in train_ids])
            shared = None
            if holdout_pool is not None:
                shared = (holdout, scenario.alpha)
            for i, alg in enumerate(algorithms):
                run_seed = _seed(rep_seed, 4, f) if paired else _seed(rep_seed, 4, f, i + 1)
                cfg = FederationConfig(len(train), base.C, base.E, base.B, base.T, alg, run_seed,
                                       base.hidden, base.eta, base.beta1, base.beta2, base.epsilon)
                jobs.append((alg, rep, f, cfg, train, test, shared))

    mapper = executor.map if executor is not None else map
    runs = list(mapper(_fold_job, jobs))

    results = {}
    for alg in algorithms:
        mine = [r for r in runs if r.algorithm == alg]
        fold_aucs, epochs = [], []
        for rep in range(repetitions):
            reps = sorted((r for r in mine if r.repetition == rep), key=lambda r: r.fold)
            fold_aucs.append([convergence_auc(r.history) for r in reps])
            epochs.append(float(np.mean([average_epochs(r.history) for r in reps])))
        results[alg] = CvResult(alg, [float(np.mean(x)) for x in fold_aucs], epochs, fold_aucs)
        log.info("%s: AUC %.4f +- %.4f, average epochs %.2f", alg, results[alg].mean_auc,
                 results[alg].std_auc, results[alg].average_epochs)

    comparison = None
    if len(algorithms) == 2:
        first, second = (results[a] for a in algorithms)
        # one-sided: does the second algorithm beat the first?
        comparison = wilcoxon_signed_rank(second.auc_per_repetition, first.auc_per_repetition)
        first.p_value = second.p_value = comparison.p_value

    shared_per_client = shared_count(scenario.alpha, holdout_size) if holdout_pool is not None else 0
    if shared_per_client:
        log.info("data sharing: |G| = %d, %d examples added to every client",
                 holdout_size, shared_per_client)
    return CrossValidation(results, runs, shared_per_client, len(pool), holdout_size, comparison)
